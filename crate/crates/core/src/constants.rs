//! Quadrature and Monte Carlo estimates of the Pickands, Piterbarg, generalized and `G` constants.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ui};

use crate::error::{Error, Result};
use crate::linalg::is_positive_definite;
use crate::models::DerivedData;
use crate::quad;
use crate::simulate::{bridge_max, map_paths, std_normal, Grid, LimitFieldSampler, PathSampler, ScalarSampler};

/// Default cap on Pareto-pruned points for inclusion-exclusion (`d >= 3`).
pub const ORTHANT_CAP: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub grid_step: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { s: 16.0, lambda: 8.0, grid_step: 0.02, n_paths: 100_000, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Estimate at `2S` minus estimate at `S`.
    #[serde(rename = "dS")]
    pub d_s: f64,
    /// Estimate at `step/2` minus estimate at `step`.
    #[serde(rename = "dStep")]
    pub d_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `exp(sqrt(2) B_H(t) - t^{2H})`: gives 1 for `2H = 1` and `1/sqrt(pi)` for `2H = 2`.
    #[default]
    Classical,
    /// `exp(B_H(t) - t^{2H}/2)`: `2^{-1/(2H)}` times the classical value.
    UnitVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub value: f64,
    pub std_err: f64,
    pub config: EstimatorConfig,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Convergence>,
}

impl EstimateRecord {
    /// A constant supplied from outside (closed form or an earlier run).
    pub fn supplied(value: f64, std_err: f64, normalization: Normalization) -> Self {
        EstimateRecord {
            value,
            std_err,
            config: EstimatorConfig { s: 0.0, lambda: 0.0, grid_step: 0.0, n_paths: 0, seed: 0 },
            method: "supplied".into(),
            normalization: Some(normalization),
            convergence: None,
        }
    }

    fn from_samples(xs: &[f64], config: EstimatorConfig, method: &str) -> Result<Self> {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Err(Error::Domain("n_paths must be positive".into()));
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::NumericalFailure(format!("{method}: non-finite estimate")));
        }
        Ok(EstimateRecord {
            value: mean,
            std_err: (var / n).sqrt(),
            config,
            method: method.into(),
            normalization: None,
            convergence: None,
        })
    }

    /// Pooled standard error against another estimate.
    pub fn pooled_se(&self, other: &EstimateRecord) -> f64 {
        (self.std_err.powi(2) + other.std_err.powi(2)).sqrt()
    }
}

/// Fills in `dS` and `dStep` by re-running `f(S, step)` at `2S` and `step/2`.
pub fn with_convergence<F>(mut base: EstimateRecord, f: F) -> Result<EstimateRecord>
where
    F: Fn(f64, f64) -> Result<EstimateRecord>,
{
    let (s, h) = (base.config.s, base.config.grid_step);
    let wide = f(2.0 * s, h)?;
    let fine = f(s, h / 2.0)?;
    base.convergence = Some(Convergence { d_s: wide.value - base.value, d_step: fine.value - base.value });
    Ok(base)
}

fn check_run(s: f64, step: f64, n_paths: usize) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("horizon {s} must be positive")));
    }
    if !(step > 0.0 && step <= s) {
        return Err(Error::Domain(format!("grid step {step} must lie in (0, {s}]")));
    }
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be positive".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------
// orthant-union integral

/// Drops points dominated componentwise by another point (`d`-vectors stored flat).
pub fn pareto_prune(points: &[f64], d: usize) -> Vec<f64> {
    let n = points.len() / d;
    if n <= 1 {
        return points.to_vec();
    }
    if d == 1 {
        return vec![points.iter().copied().fold(f64::NEG_INFINITY, f64::max)];
    }
    if d == 2 {
        let mut idx: Vec<usize> = (0..n).collect();
        // x descending, y descending on ties
        idx.sort_by(|&a, &b| {
            points[2 * b].total_cmp(&points[2 * a]).then(points[2 * b + 1].total_cmp(&points[2 * a + 1]))
        });
        let mut out = Vec::new();
        let mut best_y = f64::NEG_INFINITY;
        for k in idx {
            let y = points[2 * k + 1];
            if y > best_y {
                out.push(points[2 * k]);
                out.push(y);
                best_y = y;
            }
        }
        return out;
    }
    let p = |k: usize| &points[k * d..(k + 1) * d];
    let mut keep = Vec::new();
    'outer: for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let dominated = p(a).iter().zip(p(b)).all(|(x, y)| x <= y);
            let equal = p(a) == p(b);
            if dominated && (!equal || b < a) {
                continue 'outer;
            }
        }
        keep.extend_from_slice(p(a));
    }
    keep
}

/// `int exp(1^T x) 1{exists k: x < v_k} dx` over `R^d` for points `v_k` stored flat.
pub fn orthant_union_integral_flat(points: &[f64], d: usize, cap: usize) -> Result<f64> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::DimensionMismatch("points must be d-vectors".into()));
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    if points.iter().any(|x| x.is_nan()) {
        return Err(Error::Domain("NaN point".into()));
    }
    let front = pareto_prune(points, d);
    match d {
        1 => Ok(front[0].exp()),
        2 => {
            // front is sorted by x descending with y ascending; sweep from the left
            let m = front.len() / 2;
            let mut total = 0.0;
            let mut prev_ex = 0.0;
            for k in (0..m).rev() {
                let ex = front[2 * k].exp();
                total += front[2 * k + 1].exp() * (ex - prev_ex);
                prev_ex = ex;
            }
            Ok(total)
        }
        _ => {
            let m = front.len() / d;
            if m > cap {
                return Err(Error::TooManyExtremePoints { count: m, cap });
            }
            let mut total = 0.0;
            let mut mins = vec![vec![f64::INFINITY; d]; m + 1];
            inclusion_exclusion(&front, d, 0, 0, &mut mins, &mut total);
            Ok(total)
        }
    }
}

fn inclusion_exclusion(front: &[f64], d: usize, start: usize, depth: usize, mins: &mut Vec<Vec<f64>>, total: &mut f64) {
    let m = front.len() / d;
    for k in start..m {
        let (lo, hi) = mins.split_at_mut(depth + 1);
        let cur = &mut hi[0];
        for j in 0..d {
            cur[j] = lo[depth][j].min(front[k * d + j]);
        }
        let sign = if depth % 2 == 0 { 1.0 } else { -1.0 };
        *total += sign * cur.iter().sum::<f64>().exp();
        inclusion_exclusion(front, d, k + 1, depth + 1, mins, total);
    }
}

/// Integral of `exp(1^T x)` over the union of the open lower orthants `{x < v_k}`.
pub fn orthant_union_integral(points: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = points.first() else { return Ok(0.0) };
    let d = first.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::DimensionMismatch("points of different lengths".into()));
    }
    orthant_union_integral_flat(&points.concat(), d, ORTHANT_CAP)
}

/// Pareto frontier of the Minkowski sum of point sets, pruning after each addition.
pub fn minkowski_front(sets: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for s in sets {
        let front = pareto_prune(s, d);
        let mut next = Vec::with_capacity(acc.len() / d * front.len() / d * d);
        for a in acc.chunks(d) {
            for b in front.chunks(d) {
                next.extend(a.iter().zip(b).map(|(x, y)| x + y));
            }
        }
        acc = pareto_prune(&next, d);
    }
    acc
}

// ---------------------------------------------------------------------------------------
// G integral

/// `int_0^inf exp(-c t^beta) dt`.
fn one_dim_g(c: f64, beta: f64) -> f64 {
    c.powf(-1.0 / beta) * gamma(1.0 / beta + 1.0)
}

/// `int_L^inf exp(-c t^beta) dt = c^{-1/beta} Gamma(1/beta, c L^beta) / beta`.
fn one_dim_tail(c: f64, beta: f64, l: f64) -> f64 {
    c.powf(-1.0 / beta) * gamma_ui(1.0 / beta, c * l.powf(beta)) / beta
}

/// `G(beta, Xi) = int_{[0,inf)^n} exp(-1/2 sum Xi_ij t_i^{beta_i/2} t_j^{beta_j/2}) dt`.
///
/// Nested adaptive quadrature in `y_i = t_i^{beta_i/2}` over `[0, Lambda]^n`; the cutoff is
/// doubled until the tail bound from the smallest eigenvalue of `Xi` is below `tol` relative.
pub fn g_integral(beta: &[f64], xi: &DMatrix<f64>, lambda_cutoff: f64, tol: f64) -> Result<f64> {
    let n = beta.len();
    if xi.nrows() != n || xi.ncols() != n {
        return Err(Error::DimensionMismatch(format!("Xi must be {n}x{n}")));
    }
    if n == 0 {
        return Ok(1.0);
    }
    if n > 3 {
        return Err(Error::DimensionUnsupported(format!("G integral over {n} coordinates")));
    }
    if beta.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::Domain("beta must be positive".into()));
    }
    if !(lambda_cutoff > 0.0 && tol > 0.0) {
        return Err(Error::Domain("cutoff and tolerance must be positive".into()));
    }
    let sym = (xi + xi.transpose()) * 0.5;
    if !is_positive_definite(&sym) {
        return Err(Error::Divergent("the quadratic form of Xi is not positive definite".into()));
    }
    if n == 1 {
        return Ok(one_dim_g(sym[(0, 0)] / 2.0, beta[0]));
    }
    let min_eig = sym.clone().symmetric_eigenvalues().min();
    let c = min_eig / 2.0;
    let mut lam = lambda_cutoff;
    for _ in 0..12 {
        let tail: f64 = (0..n)
            .map(|i| {
                one_dim_tail(c, beta[i], lam)
                    * (0..n).filter(|&j| j != i).map(|j| one_dim_g(c, beta[j])).product::<f64>()
            })
            .sum();
        let value = g_box(beta, &sym, lam, tol);
        if tail <= tol * value {
            return Ok(value);
        }
        lam *= 2.0;
    }
    Err(Error::NumericalFailure("G integral tail did not converge".into()))
}

fn g_box(beta: &[f64], xi: &DMatrix<f64>, lam: f64, tol: f64) -> f64 {
    let n = beta.len();
    let tops: Vec<f64> = beta.iter().map(|b| lam.powf(b / 2.0)).collect();
    // density of t = y^{2/beta}: (2/beta) y^{2/beta - 1}
    let jac = |i: usize, y: f64| (2.0 / beta[i]) * y.powf(2.0 / beta[i] - 1.0);
    fn level(
        k: usize,
        y: &mut [f64],
        n: usize,
        tops: &[f64],
        xi: &DMatrix<f64>,
        jac: &dyn Fn(usize, f64) -> f64,
        tol: f64,
    ) -> f64 {
        if k == n {
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += xi[(i, j)] * y[i] * y[j];
                }
            }
            return (-0.5 * q).exp();
        }
        quad::integrate(
            |v| {
                let mut inner = y.to_vec();
                inner[k] = v;
                jac(k, v) * level(k + 1, &mut inner, n, tops, xi, jac, tol)
            },
            0.0,
            tops[k],
            1e-300,
            tol * 0.1,
        )
        .value
    }
    level(0, &mut vec![0.0; n], n, &tops, xi, &jac, tol)
}

/// The product `prod_i (2 xi_i)^{-1/beta_i} Gamma(1/beta_i + 1)` printed for diagonal `Xi`,
/// next to the direct evaluation of `G` with `Xi_ii = 2 xi_i`, which gives
/// `prod_i xi_i^{-1/beta_i} Gamma(1/beta_i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorollaryComparison {
    pub corollary: f64,
    pub direct: f64,
    pub ratio: f64,
}

pub fn corollary_g_comparison(beta: &[f64], xi: &[f64]) -> Result<CorollaryComparison> {
    if beta.len() != xi.len() {
        return Err(Error::DimensionMismatch("beta and xi lengths differ".into()));
    }
    let corollary: f64 = beta.iter().zip(xi).map(|(&b, &x)| one_dim_g(2.0 * x, b)).product();
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(xi.len(), xi.iter().map(|x| 2.0 * x)));
    let direct = g_integral(beta, &diag, 8.0, 1e-9)?;
    Ok(CorollaryComparison { corollary, direct, ratio: corollary / direct })
}

// ---------------------------------------------------------------------------------------
// Pickands constants

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PickandsEstimator {
    /// `S^{-1} E sup_{[0,S]} exp(W)`.
    #[default]
    Truncated,
    /// `E[sup exp(W) / int exp(W)]` over `[-S, S]`, free of the `1/S` bias.
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupMode {
    /// Maximum over grid nodes.
    Grid,
    /// Exact Brownian-bridge maxima between nodes (Brownian paths only).
    #[default]
    BridgeExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PickandsOptions {
    pub estimator: PickandsEstimator,
    pub normalization: Normalization,
    pub sup: SupMode,
}

/// Brownian path `sd B(t) - mu t` on a uniform grid, reduced on the fly to
/// `(sup, int exp)` so no path is stored. Exact bridge maxima between nodes when requested.
struct DriftedBrownian {
    steps: usize,
    dt: f64,
    sd: f64,
    mu: f64,
    bridge: bool,
    /// Start at `-S` (two-sided path pinned at the midpoint) instead of `0`.
    two_sided: bool,
}

impl PathSampler for DriftedBrownian {
    type Scratch = Vec<f64>;
    fn path_len(&self) -> usize {
        2
    }
    fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.steps + 1]
    }
    fn draw(&self, rng: &mut ChaCha8Rng, x: &mut Vec<f64>, out: &mut [f64]) {
        let var = self.sd * self.sd * self.dt;
        let s = self.sd * self.dt.sqrt();
        x[0] = 0.0;
        for k in 0..self.steps {
            x[k + 1] = x[k] + s * std_normal(rng);
        }
        let (t0, anchor) = if self.two_sided {
            let mid = self.steps / 2;
            (-(mid as f64) * self.dt, x[mid])
        } else {
            (0.0, 0.0)
        };
        let w = |k: usize| {
            let t = t0 + k as f64 * self.dt;
            x[k] - anchor - self.mu * t.abs()
        };
        let mut best = w(0);
        let mut integral = 0.0;
        let mut prev = best;
        for k in 1..=self.steps {
            let cur = w(k);
            integral += 0.5 * self.dt * (prev.exp() + cur.exp());
            best = best.max(cur);
            if self.bridge {
                // P{bridge max > best} = exp(-2 (best - prev)(best - cur) / var)
                let e = 2.0 * (best - prev) * (best - cur) / var;
                if e < 60.0 {
                    let u: f64 = 1.0 - rng.random::<f64>();
                    best = best.max(bridge_max(prev, cur, var, u));
                }
            }
            prev = cur;
        }
        out[0] = best;
        out[1] = integral;
    }
}

fn scale_drift(norm: Normalization) -> (f64, f64) {
    match norm {
        Normalization::Classical => (std::f64::consts::SQRT_2, 1.0),
        Normalization::UnitVariance => (1.0, 0.5),
    }
}

/// Pickands constant for `alpha = 2H` by Monte Carlo over a uniform grid of step `grid_step`.
pub fn pickands_constant(
    two_h: f64,
    s: f64,
    grid_step: f64,
    n_paths: usize,
    seed: u64,
    opts: PickandsOptions,
) -> Result<EstimateRecord> {
    if !(two_h > 0.0 && two_h <= 2.0) {
        return Err(Error::Domain(format!("2H = {two_h} outside (0, 2]")));
    }
    check_run(s, grid_step, n_paths)?;
    let config = EstimatorConfig { s, lambda: 0.0, grid_step, n_paths, seed };
    let (sd, c) = scale_drift(opts.normalization);
    let steps = (s / grid_step).round() as usize;
    let two_sided = opts.estimator == PickandsEstimator::Ratio;
    let method = format!(
        "pickands/{}/{}",
        if two_sided { "ratio" } else { "truncated" },
        match opts.sup {
            SupMode::Grid => "grid",
            SupMode::BridgeExact => "bridge",
        }
    );
    let samples: Vec<f64> = if two_h == 2.0 {
        // B_1(t) = t N
        if !two_sided {
            return Err(Error::Domain("the truncated estimator has infinite mean for 2H = 2; use the ratio estimator".into()));
        }
        let ns = map_paths(&NormalDraw, n_paths, seed, |p| p[0]);
        ns.iter()
            .map(|&n| {
                let w = |k: usize| {
                    let t = -s + k as f64 * grid_step;
                    sd * t * n - c * t * t
                };
                let mut best = f64::NEG_INFINITY;
                let mut integral = 0.0;
                for k in 0..=2 * steps {
                    best = best.max(w(k));
                    if k > 0 {
                        integral += 0.5 * grid_step * (w(k - 1).exp() + w(k).exp());
                    }
                }
                best.exp() / integral
            })
            .collect()
    } else if two_h == 1.0 {
        let sampler = DriftedBrownian {
            steps: if two_sided { 2 * steps } else { steps },
            dt: grid_step,
            sd,
            mu: c,
            bridge: opts.sup == SupMode::BridgeExact,
            two_sided,
        };
        map_paths(&sampler, n_paths, seed, |p| if two_sided { p[0].exp() / p[1] } else { p[0].exp() / s })
    } else {
        let h = two_h / 2.0;
        let len = if two_sided { 2.0 * s } else { s };
        let g = Grid::uniform(len, if two_sided { 2 * steps } else { steps })?;
        let (sampler, _) = ScalarSampler::fbm(h, &g)?;
        map_paths(&sampler, n_paths, seed, |x| {
            let (mid, t0) = if two_sided { (x[steps], -s) } else { (0.0, 0.0) };
            let w = |k: usize| {
                let t = t0 + k as f64 * grid_step;
                sd * (x[k] - mid) - c * t.abs().powf(two_h)
            };
            let mut best = f64::NEG_INFINITY;
            let mut integral = 0.0;
            let mut prev = 0.0f64;
            for k in 0..x.len() {
                let cur = w(k);
                best = best.max(cur);
                if k > 0 {
                    integral += 0.5 * grid_step * (prev.exp() + cur.exp());
                }
                prev = cur;
            }
            if two_sided {
                best.exp() / integral
            } else {
                best.exp() / s
            }
        })
    };
    let mut rec = EstimateRecord::from_samples(&samples, config, &method)?;
    rec.normalization = Some(opts.normalization);
    Ok(rec)
}

struct NormalDraw;

impl PathSampler for NormalDraw {
    type Scratch = ();
    fn path_len(&self) -> usize {
        1
    }
    fn scratch(&self) {}
    fn draw(&self, rng: &mut ChaCha8Rng, _: &mut (), out: &mut [f64]) {
        out[0] = std_normal(rng);
    }
}

// ---------------------------------------------------------------------------------------
// Piterbarg constants

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiterbargVariant {
    /// `E sup exp(B(t) - (1 + lambda) t / 2)`.
    HalfDrift,
    /// `E sup exp(B(t) - lambda t)`.
    Plain,
}

fn drift_coefficient(drift: f64, variant: PiterbargVariant) -> Result<f64> {
    let mu = match variant {
        PiterbargVariant::HalfDrift => (1.0 + drift) / 2.0,
        PiterbargVariant::Plain => drift,
    };
    if !(mu > 0.5) {
        return Err(Error::DriftTooSmall(format!(
            "drift coefficient {mu} must exceed 1/2 for a finite constant ({variant:?}, lambda = {drift})"
        )));
    }
    Ok(mu)
}

/// `2 mu / (2 mu - 1)`: the infinite-horizon value, since `sup_t (B(t) - mu t)` is
/// exponential with rate `2 mu`.
pub fn piterbarg_closed_form(drift: f64, variant: PiterbargVariant) -> Result<f64> {
    let mu = drift_coefficient(drift, variant)?;
    Ok(2.0 * mu / (2.0 * mu - 1.0))
}

/// `E sup_{[0, Lambda]} exp(B(t) - mu t)` by Monte Carlo.
pub fn piterbarg_constant(
    drift: f64,
    lambda: f64,
    grid_step: f64,
    n_paths: usize,
    seed: u64,
    variant: PiterbargVariant,
    sup: SupMode,
) -> Result<EstimateRecord> {
    let mu = drift_coefficient(drift, variant)?;
    check_run(lambda, grid_step, n_paths)?;
    let steps = (lambda / grid_step).round() as usize;
    let sampler = DriftedBrownian { steps, dt: grid_step, sd: 1.0, mu, bridge: sup == SupMode::BridgeExact, two_sided: false };
    let samples = map_paths(&sampler, n_paths, seed, |p| p[0].exp());
    let config = EstimatorConfig { s: 0.0, lambda, grid_step, n_paths, seed };
    let method = match (variant, sup) {
        (PiterbargVariant::Plain, SupMode::BridgeExact) => "piterbarg/plain/bridge",
        (PiterbargVariant::Plain, SupMode::Grid) => "piterbarg/plain/grid",
        (PiterbargVariant::HalfDrift, SupMode::BridgeExact) => "piterbarg/half_drift/bridge",
        (PiterbargVariant::HalfDrift, SupMode::Grid) => "piterbarg/half_drift/grid",
    };
    EstimateRecord::from_samples(&samples, config, method)
}

// ---------------------------------------------------------------------------------------
// generalized constant

/// Per-coordinate grids: `[0, S]` on the Pickands set, `[0, Lambda]` elsewhere.
pub fn limit_grids(dd: &DerivedData, s: f64, lambda: f64, grid_step: f64) -> Result<Vec<Grid>> {
    (0..dd.n)
        .map(|i| {
            let len = if dd.sets.pickands.contains(&i) { s } else { lambda };
            Grid::with_step(len, grid_step)
        })
        .collect()
}

/// `S^{-|I|} E int exp(1^T x) P{exists t: field(t) > x} dx` over the product grid, with
/// the inner integral evaluated exactly per path.
pub fn generalized_constant(
    dd: &DerivedData,
    s: f64,
    lambda: f64,
    grid_step: f64,
    n_paths: usize,
    seed: u64,
) -> Result<EstimateRecord> {
    check_run(s.max(lambda), grid_step, n_paths)?;
    if !(s > 0.0 && lambda > 0.0) {
        return Err(Error::Domain("S and Lambda must be positive".into()));
    }
    if let Some(c) = dd.checks.iter().find(|c| !c.passed) {
        return Err(Error::AssumptionViolation(format!("{}: {}", c.name, c.detail)));
    }
    let grids = limit_grids(dd, s, lambda, grid_step)?;
    generalized_on_grids(dd, grids, s, EstimatorConfig { s, lambda, grid_step, n_paths, seed })
}

/// As [`generalized_constant`] on caller-supplied coordinate grids (e.g. a single node).
pub fn generalized_on_grids(dd: &DerivedData, grids: Vec<Grid>, s: f64, config: EstimatorConfig) -> Result<EstimateRecord> {
    let sampler = LimitFieldSampler::new(dd, grids)?;
    let d = dd.d;
    let norm = s.powi(dd.sets.pickands.len() as i32);
    let vals: Vec<Result<f64>> = map_paths(&sampler, config.n_paths, config.seed, |p| {
        let sets: Vec<Vec<f64>> = (0..dd.n).map(|i| sampler.coordinate(p, i).to_vec()).collect();
        let front = minkowski_front(&sets, d);
        orthant_union_integral_flat(&front, d, ORTHANT_CAP).map(|v| v / norm)
    });
    let samples = vals.into_iter().collect::<Result<Vec<f64>>>()?;
    EstimateRecord::from_samples(&samples, config, "generalized/orthant-union")
}
