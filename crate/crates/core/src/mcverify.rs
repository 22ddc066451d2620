//! Direct Monte Carlo estimates of double-crossing probabilities and comparison reports.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asymptotics::AsymptoticResult;
use crate::error::{Error, Result};
use crate::models::{CovModel, ModelKind};
use crate::simulate::{map_paths, Grid, PathSampler, ScalarSampler, ScalarScratch};

/// 97.5% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub start: f64,
    pub end: f64,
    pub n: usize,
}

impl From<&Grid> for GridSummary {
    fn from(g: &Grid) -> Self {
        GridSummary { start: g.start(), end: g.end(), n: g.n() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McProbability {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_paths: usize,
    pub hits: usize,
    pub grid: GridSummary,
    pub u: f64,
    pub seed: u64,
    pub method: String,
    /// Standard error of `p_hat`.
    pub std_err: f64,
}

/// Wilson score interval for `hits` successes in `n` trials.
pub fn wilson(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = z * z;
    let den = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / den;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / den;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

impl McProbability {
    fn from_hits(hits: usize, n: usize, grid: &Grid, u: f64, seed: u64, method: &str) -> Self {
        let p = hits as f64 / n as f64;
        let (lo, hi) = wilson(hits, n, Z95);
        McProbability {
            p_hat: p,
            ci_low: lo,
            ci_high: hi,
            n_paths: n,
            hits,
            grid: grid.into(),
            u,
            seed,
            method: method.into(),
            std_err: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }

    /// `sqrt(se1^2 + se2^2)`.
    pub fn pooled_se(&self, other: &McProbability) -> f64 {
        (self.std_err.powi(2) + other.std_err.powi(2)).sqrt()
    }
}

/// Scalar path sampler for the model on `grid`.
pub fn model_sampler(m: &CovModel, grid: &Grid) -> Result<ScalarSampler> {
    m.validate()?;
    if grid.start() != 0.0 || (grid.end() - m.horizon).abs() > 1e-9 * m.horizon {
        return Err(Error::Grid(format!("grid must cover [0, {}]", m.horizon)));
    }
    Ok(match &m.kind {
        ModelKind::Stationary { correlation } => ScalarSampler::stationary(correlation, grid)?.0,
        ModelKind::Fbm { hurst } => ScalarSampler::fbm(*hurst, grid)?.0,
    })
}

fn check_levels(us: &[f64], n_paths: usize) -> Result<()> {
    if us.iter().any(|&u| !(u >= 0.0 && u.is_finite())) {
        return Err(Error::Domain("levels u must be finite and nonnegative".into()));
    }
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be positive".into()));
    }
    Ok(())
}

/// Crude estimates of `P{max X > a u, min X < -b u}` at several levels from one path batch.
pub fn mc_double_crossing_levels(m: &CovModel, us: &[f64], grid: &Grid, n_paths: usize, seed: u64) -> Result<Vec<McProbability>> {
    check_levels(us, n_paths)?;
    let sampler = model_sampler(m, grid)?;
    let ext = map_paths(&sampler, n_paths, seed, |x| {
        let mut mx = f64::NEG_INFINITY;
        let mut mn = f64::INFINITY;
        for &v in x {
            mx = mx.max(v);
            mn = mn.min(v);
        }
        (mx, mn)
    });
    Ok(us
        .iter()
        .map(|&u| {
            let hits = ext.iter().filter(|(mx, mn)| *mx > m.a * u && *mn < -m.b * u).count();
            McProbability::from_hits(hits, n_paths, grid, u, seed, "crude")
        })
        .collect())
}

pub fn mc_double_crossing(m: &CovModel, u: f64, grid: &Grid, n_paths: usize, seed: u64) -> Result<McProbability> {
    Ok(mc_double_crossing_levels(m, &[u], grid, n_paths, seed)?.remove(0))
}

/// Crude estimates on nested subgrids sharing one path batch: entry `k` uses every
/// `strides[k]`-th node of `grid`. Each stride must divide the number of grid steps.
pub fn mc_double_crossing_nested(
    m: &CovModel,
    u: f64,
    grid: &Grid,
    strides: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<McProbability>> {
    check_levels(&[u], n_paths)?;
    let steps = grid.n() - 1;
    if strides.iter().any(|&k| k == 0 || steps % k != 0) {
        return Err(Error::Grid(format!("strides must divide the {steps} grid steps")));
    }
    let sampler = model_sampler(m, grid)?;
    let (hi, lo) = (m.a * u, -m.b * u);
    let flags = map_paths(&sampler, n_paths, seed, |x| {
        strides
            .iter()
            .map(|&k| {
                let sub = x.iter().step_by(k);
                sub.clone().any(|&v| v > hi) && sub.clone().any(|&v| v < lo)
            })
            .collect::<Vec<bool>>()
    });
    strides
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let sub = Grid::new(grid.points().iter().step_by(k).copied().collect())?;
            let hits = flags.iter().filter(|f| f[j]).count();
            Ok(McProbability::from_hits(hits, n_paths, &sub, u, seed, "crude"))
        })
        .collect()
}

/// True when some nodes `t`, `s` with `|t - s| < eps` have `x(t) > hi` and `x(s) < lo`.
pub fn strip_event(x: &[f64], pts: &[f64], eps: f64, hi: f64, lo: f64) -> bool {
    let n = x.len();
    let mut last_up: Option<usize> = None;
    let mut next_up = vec![usize::MAX; n];
    let mut nxt = usize::MAX;
    for k in (0..n).rev() {
        if x[k] > hi {
            nxt = k;
        }
        next_up[k] = nxt;
    }
    for k in 0..n {
        if x[k] > hi {
            last_up = Some(k);
        }
        if x[k] < lo {
            if let Some(i) = last_up {
                if pts[k] - pts[i] < eps {
                    return true;
                }
            }
            let j = next_up[k];
            if j != usize::MAX && pts[j] - pts[k] < eps {
                return true;
            }
        }
    }
    false
}

/// Crude estimates of the double-crossing probability restricted to `|t - s| < eps`,
/// together with the unrestricted estimates from the same paths: `(strip, full)`.
pub fn diagonal_strip_levels(
    m: &CovModel,
    eps: f64,
    us: &[f64],
    grid: &Grid,
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<McProbability>, Vec<McProbability>)> {
    check_levels(us, n_paths)?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps = {eps} must be positive")));
    }
    let sampler = model_sampler(m, grid)?;
    let pts = grid.points();
    let flags: Vec<Vec<(bool, bool)>> = map_paths(&sampler, n_paths, seed, |x| {
        let (mut mx, mut mn) = (f64::NEG_INFINITY, f64::INFINITY);
        for &v in x {
            mx = mx.max(v);
            mn = mn.min(v);
        }
        us.iter()
            .map(|&u| {
                let full = mx > m.a * u && mn < -m.b * u;
                (full && strip_event(x, pts, eps, m.a * u, -m.b * u), full)
            })
            .collect()
    });
    let mut strip = Vec::new();
    let mut full = Vec::new();
    for (j, &u) in us.iter().enumerate() {
        let hs = flags.iter().filter(|f| f[j].0).count();
        let hf = flags.iter().filter(|f| f[j].1).count();
        strip.push(McProbability::from_hits(hs, n_paths, grid, u, seed, "strip"));
        full.push(McProbability::from_hits(hf, n_paths, grid, u, seed, "crude"));
    }
    Ok((strip, full))
}

pub fn diagonal_strip_probability(m: &CovModel, eps: f64, u: f64, grid: &Grid, n_paths: usize, seed: u64) -> Result<McProbability> {
    Ok(diagonal_strip_levels(m, eps, &[u], grid, n_paths, seed)?.0.remove(0))
}

/// Stationary paths shifted towards the two corner events: the first path of each draw
/// towards `X(0) > a u, X(T) < -b u`, the second towards the mirrored event.
struct ShiftedPair {
    inner: ScalarSampler,
    shifts: [Vec<f64>; 2],
}

impl PathSampler for ShiftedPair {
    type Scratch = (ScalarScratch, Vec<f64>);
    fn path_len(&self) -> usize {
        self.inner.path_len()
    }
    fn paths_per_draw(&self) -> usize {
        2
    }
    fn scratch(&self) -> Self::Scratch {
        let ppd = self.inner.paths_per_draw();
        (self.inner.scratch(), vec![0.0; 2 * ppd * self.inner.path_len()])
    }
    fn draw(&self, rng: &mut ChaCha8Rng, sc: &mut Self::Scratch, out: &mut [f64]) {
        let n = self.inner.path_len();
        let ppd = self.inner.paths_per_draw();
        let mut filled = 0;
        while filled < 2 * n {
            let (buf, _) = sc.1.split_at_mut(ppd * n);
            self.inner.draw(rng, &mut sc.0, buf);
            let take = (ppd * n).min(2 * n - filled);
            out[filled..filled + take].copy_from_slice(&buf[..take]);
            filled += take;
        }
        for p in 0..2 {
            for k in 0..n {
                out[p * n + k] += self.shifts[p][k];
            }
        }
    }
}

/// Mean-shift importance sampling for stationary models: an equal mixture of two Gaussian
/// shifts aimed at the corner events, weighted by the mixture likelihood ratio.
pub fn mc_double_crossing_is(m: &CovModel, u: f64, grid: &Grid, n_paths: usize, seed: u64) -> Result<McProbability> {
    check_levels(&[u], n_paths)?;
    let rho = m.correlation().ok_or_else(|| Error::Model("importance sampling is implemented for stationary models".into()))?;
    let sampler = model_sampler(m, grid)?;
    let pts = grid.points().to_vec();
    let t = m.horizon;
    let rt = rho.rho(t);
    let kss = DMatrix::from_row_slice(2, 2, &[1.0, rt, rt, 1.0]);
    let kinv = kss
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("correlation at the endpoints is degenerate".into()))?;
    let thetas = [
        &kinv * DVector::from_column_slice(&[m.a * u, -m.b * u]),
        &kinv * DVector::from_column_slice(&[-m.b * u, m.a * u]),
    ];
    let shift = |th: &DVector<f64>| pts.iter().map(|&s| rho.rho(s) * th[0] + rho.rho(t - s) * th[1]).collect::<Vec<f64>>();
    let quad: Vec<f64> = thetas.iter().map(|th| (th.transpose() * &kss * th)[(0, 0)]).collect();
    let pair = ShiftedPair { inner: sampler, shifts: [shift(&thetas[0]), shift(&thetas[1])] };
    let n_even = n_paths + n_paths % 2;
    let last = pts.len() - 1;
    let vals = map_paths(&pair, n_even, seed, |x| {
        let (mut mx, mut mn) = (f64::NEG_INFINITY, f64::INFINITY);
        for &v in x {
            mx = mx.max(v);
            mn = mn.min(v);
        }
        if !(mx > m.a * u && mn < -m.b * u) {
            return 0.0;
        }
        let xs = [x[0], x[last]];
        // dQ_j/dP = exp(theta_j^T x_S - theta_j^T K theta_j / 2)
        let mix: f64 = (0..2)
            .map(|j| 0.5 * (thetas[j][0] * xs[0] + thetas[j][1] * xs[1] - 0.5 * quad[j]).exp())
            .sum();
        1.0 / mix
    });
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let hits = vals.iter().filter(|v| **v > 0.0).count();
    Ok(McProbability {
        p_hat: mean,
        ci_low: (mean - Z95 * se).max(0.0),
        ci_high: (mean + Z95 * se).min(1.0),
        n_paths: vals.len(),
        hits,
        grid: grid.into(),
        u,
        seed,
        method: "importance".into(),
        std_err: se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub u: f64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub approx: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub verdict: bool,
    /// Relative difference of the ratios at the two largest levels.
    pub ratio_change: f64,
    pub threshold: f64,
    pub reason: String,
}

impl CompareReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Evaluation(format!("CSV write failed: {e}"));
        w.write_record(["u", "p_hat", "ci_low", "ci_high", "approx", "ratio"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([r.u, r.p_hat, r.ci_low, r.ci_high, r.approx, r.ratio].map(|v| format!("{v:e}")))
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Evaluation(e.to_string()))
    }
}

/// Table of `p_hat / approx` over a common level grid. The verdict passes when the ratios at
/// the two largest levels differ by less than their pooled relative CI half-width plus 25%.
pub fn compare_report(asym: &[AsymptoticResult], mc: &[McProbability]) -> Result<CompareReport> {
    if asym.len() != mc.len() || asym.is_empty() {
        return Err(Error::GridMismatch(format!("{} asymptotic values vs {} estimates", asym.len(), mc.len())));
    }
    let mut rows = Vec::new();
    for (a, p) in asym.iter().zip(mc) {
        if (a.u - p.u).abs() > 1e-12 * a.u.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("levels {} and {} differ", a.u, p.u)));
        }
        rows.push(CompareRow {
            u: a.u,
            p_hat: p.p_hat,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
            approx: a.approx_prob,
            ratio: p.p_hat / a.approx_prob,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| rows[i].u.total_cmp(&rows[j].u));
    if rows.len() < 2 {
        return Ok(CompareReport { rows, verdict: false, ratio_change: f64::NAN, threshold: f64::NAN, reason: "need two levels".into() });
    }
    let (i, j) = (order[order.len() - 2], order[order.len() - 1]);
    let (r1, r2) = (&rows[i], &rows[j]);
    if r1.p_hat <= 0.0 || r2.p_hat <= 0.0 {
        return Ok(CompareReport {
            rows,
            verdict: false,
            ratio_change: f64::NAN,
            threshold: f64::NAN,
            reason: "no hits at one of the top levels".into(),
        });
    }
    let half = |r: &CompareRow| (r.ci_high - r.ci_low) / (2.0 * r.p_hat);
    let threshold = (half(r1).powi(2) + half(r2).powi(2)).sqrt() + 0.25;
    let change = (r1.ratio - r2.ratio).abs() / (0.5 * (r1.ratio + r2.ratio));
    let verdict = change < threshold;
    Ok(CompareReport {
        rows,
        verdict,
        ratio_change: change,
        threshold,
        reason: if verdict { "ratios stable".into() } else { "ratios drift between the top levels".into() },
    })
}
