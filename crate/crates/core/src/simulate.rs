//! Exact Gaussian path sampling on grids with per-draw counter-based streams.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, JitterPolicy};
use crate::models::{fbm_cov, Correlation, DerivedData};

/// Random stream of draw `index` under `seed`. Independent of scheduling.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Grid("grid needs at least one point".into()));
        }
        if points.iter().any(|x| !x.is_finite()) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("grid points must be finite and strictly increasing".into()));
        }
        Ok(Grid { points })
    }

    /// `steps + 1` equally spaced points on `[0, length]`.
    pub fn uniform(length: f64, steps: usize) -> Result<Self> {
        if !(length > 0.0) || steps == 0 {
            return Err(Error::Grid(format!("uniform grid needs length > 0 and steps > 0 (got {length}, {steps})")));
        }
        Grid::new((0..=steps).map(|k| length * k as f64 / steps as f64).collect())
    }

    /// Uniform grid on `[0, length]` with the given step, which must divide the length.
    pub fn with_step(length: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Grid(format!("step {step} must be positive")));
        }
        let k = (length / step).round();
        if k < 1.0 || ((k * step - length).abs() > 1e-9 * length.max(1.0)) {
            return Err(Error::Grid(format!("step {step} does not divide length {length}")));
        }
        Grid::uniform(length, k as usize)
    }

    pub fn single(t: f64) -> Self {
        Grid { points: vec![t] }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Common spacing when the grid is uniform (relative tolerance `1e-9`).
    pub fn uniform_step(&self) -> Option<f64> {
        if self.n() < 2 {
            return None;
        }
        let h = (self.end() - self.start()) / (self.n() - 1) as f64;
        let ok = self.points.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1e-300));
        ok.then_some(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Cholesky,
    Circulant,
    /// Independent increments (Brownian motion).
    Increments,
}

/// Paths stored path-major, then node, then component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathBatch {
    pub n_paths: usize,
    /// Number of grid nodes per path (product of `shape` for product grids).
    pub n_nodes: usize,
    pub dim: usize,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub seed: u64,
    pub scheme: Scheme,
    /// True when a circulant embedding failed and the Cholesky scheme was used instead.
    pub fallback: bool,
}

impl PathBatch {
    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.n_nodes * self.dim;
        &self.values[i * len..(i + 1) * len]
    }

    pub fn value(&self, path: usize, node: usize, comp: usize) -> f64 {
        self.values[(path * self.n_nodes + node) * self.dim + comp]
    }

    /// One row per path; columns are node-major with components innermost.
    pub fn write_csv<W: Write>(&self, out: W, grid: Option<&Grid>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = Vec::with_capacity(self.n_nodes * self.dim);
        for k in 0..self.n_nodes {
            for c in 0..self.dim {
                let node = match grid {
                    Some(g) if g.n() == self.n_nodes => format!("t={}", g.points()[k]),
                    _ => format!("node{k}"),
                };
                header.push(if self.dim == 1 { node } else { format!("{node}:c{c}") });
            }
        }
        let io = |e: csv::Error| Error::Evaluation(format!("CSV write failed: {e}"));
        w.write_record(&header).map_err(io)?;
        for i in 0..self.n_paths {
            w.write_record(self.path(i).iter().map(|x| format!("{x:e}"))).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Evaluation(format!("CSV write failed: {e}")))?;
        Ok(())
    }
}

/// A source of Gaussian paths. Each draw consumes one counter stream and yields
/// `paths_per_draw` paths of `path_len` values.
pub trait PathSampler: Sync {
    type Scratch: Send;
    fn path_len(&self) -> usize;
    fn paths_per_draw(&self) -> usize {
        1
    }
    fn scratch(&self) -> Self::Scratch;
    fn draw(&self, rng: &mut ChaCha8Rng, scratch: &mut Self::Scratch, out: &mut [f64]);
}

/// Applies `f` to `n_paths` paths without storing them. Results come back in path order
/// and depend only on `seed`, not on the thread pool.
pub fn map_paths<S, T, F>(sampler: &S, n_paths: usize, seed: u64, f: F) -> Vec<T>
where
    S: PathSampler,
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    let ppd = sampler.paths_per_draw();
    let len = sampler.path_len();
    let n_draws = n_paths.div_ceil(ppd);
    let nested: Vec<Vec<T>> = (0..n_draws)
        .into_par_iter()
        .map_init(
            || (sampler.scratch(), vec![0.0; ppd * len]),
            |(scratch, buf), k| {
                let mut rng = draw_rng(seed, k as u64);
                sampler.draw(&mut rng, scratch, buf);
                let take = ppd.min(n_paths - k * ppd);
                (0..take).map(|j| f(&buf[j * len..(j + 1) * len])).collect()
            },
        )
        .collect();
    nested.into_iter().flatten().collect()
}

fn collect_batch<S: PathSampler>(s: &S, n_paths: usize, seed: u64, n_nodes: usize, dim: usize, scheme: Scheme) -> PathBatch {
    let values: Vec<f64> = map_paths(s, n_paths, seed, |p| p.to_vec()).concat();
    PathBatch { n_paths, n_nodes, dim, shape: vec![n_nodes], values, seed, scheme, fallback: false }
}

/// Dense sampler `x = L z` from a guarded Cholesky factor.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    n: usize,
    /// Lower factor, row-major packed.
    l: Vec<f64>,
    pub jitter: f64,
}

impl CholeskySampler {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let f = cholesky_psd(cov, JitterPolicy::default())?;
        let n = cov.nrows();
        let mut l = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                l.push(f.l[(i, j)]);
            }
        }
        Ok(CholeskySampler { n, l, jitter: f.jitter })
    }
}

impl PathSampler for CholeskySampler {
    type Scratch = Vec<f64>;
    fn path_len(&self) -> usize {
        self.n
    }
    fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.n]
    }
    fn draw(&self, rng: &mut ChaCha8Rng, z: &mut Vec<f64>, out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = std_normal(rng);
        }
        let mut off = 0;
        for i in 0..self.n {
            let row = &self.l[off..off + i + 1];
            out[i] = row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            off += i + 1;
        }
    }
}

/// Covariance of the stacked vector `(X(t_1), ..., X(t_n))` for a matrix-valued kernel.
pub fn grid_covariance<F: Fn(f64, f64) -> DMatrix<f64>>(cov: F, g: &Grid, d: usize) -> Result<DMatrix<f64>> {
    let n = g.n();
    let mut m = DMatrix::zeros(n * d, n * d);
    for a in 0..n {
        for b in 0..=a {
            let blk = cov(g.points()[a], g.points()[b]);
            if blk.nrows() != d || blk.ncols() != d {
                return Err(Error::DimensionMismatch(format!("kernel must return {d}x{d} blocks")));
            }
            for i in 0..d {
                for j in 0..d {
                    m[(a * d + i, b * d + j)] = blk[(i, j)];
                    m[(b * d + j, a * d + i)] = blk[(i, j)];
                }
            }
        }
    }
    Ok(m)
}

/// Centered Gaussian vectors with the grid covariance of a `d x d` matrix kernel.
pub fn sample_gaussian_grid<F: Fn(f64, f64) -> DMatrix<f64>>(
    cov: F,
    g: &Grid,
    d: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    let s = CholeskySampler::from_covariance(&grid_covariance(cov, g, d)?)?;
    Ok(collect_batch(&s, n_paths, seed, g.n(), d, Scheme::Cholesky))
}

/// Exact sampler of a stationary sequence by circulant embedding; each draw yields two
/// independent sequences (real and imaginary parts).
#[derive(Clone)]
pub struct CirculantSampler {
    m: usize,
    sqrt_eig: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Embedding size.
    pub size: usize,
}

impl std::fmt::Debug for CirculantSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CirculantSampler(m={}, size={})", self.m, self.size)
    }
}

/// Relative negativity tolerance for embedding eigenvalues.
pub const EMBEDDING_TOL: f64 = 1e-10;

impl CirculantSampler {
    /// Tries embeddings of size `2(m-1)k` for `k = 1, 2, 4, 8` using the autocovariance `acf(lag)`.
    /// Returns `None` when all of them have a significantly negative eigenvalue.
    pub fn new<F: Fn(usize) -> f64>(acf: F, m: usize) -> Result<Option<Self>> {
        if m < 2 {
            return Ok(None);
        }
        let c0 = acf(0);
        if !(c0 > 0.0) {
            return Err(Error::Model(format!("autocovariance at lag 0 is {c0}")));
        }
        let mut planner = FftPlanner::new();
        for k in [1usize, 2, 4, 8] {
            let half = (m - 1) * k;
            let size = 2 * half;
            let mut row: Vec<Complex64> = (0..size)
                .map(|j| Complex64::new(acf(if j <= half { j } else { size - j }), 0.0))
                .collect();
            let fft = planner.plan_fft_forward(size);
            fft.process(&mut row);
            let min = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
            if min >= -EMBEDDING_TOL * c0 {
                let sqrt_eig = row.iter().map(|c| (c.re.max(0.0) / size as f64).sqrt()).collect();
                return Ok(Some(CirculantSampler { m, sqrt_eig, fft, size }));
            }
            log::debug!("circulant embedding of size {size} has eigenvalue {min:e}");
        }
        Ok(None)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }
}

pub struct CirculantScratch {
    buf: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl PathSampler for CirculantSampler {
    type Scratch = CirculantScratch;
    fn path_len(&self) -> usize {
        self.m
    }
    fn paths_per_draw(&self) -> usize {
        2
    }
    fn scratch(&self) -> CirculantScratch {
        CirculantScratch {
            buf: vec![Complex64::new(0.0, 0.0); self.size],
            work: vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()],
        }
    }
    fn draw(&self, rng: &mut ChaCha8Rng, sc: &mut CirculantScratch, out: &mut [f64]) {
        for (b, s) in sc.buf.iter_mut().zip(&self.sqrt_eig) {
            let (x, y) = (std_normal(rng), std_normal(rng));
            *b = Complex64::new(s * x, s * y);
        }
        self.fft.process_with_scratch(&mut sc.buf, &mut sc.work);
        let (a, b) = out.split_at_mut(self.m);
        for k in 0..self.m {
            a[k] = sc.buf[k].re;
            b[k] = sc.buf[k].im;
        }
    }
}

/// Integrates an increment sampler into a path started at zero.
#[derive(Debug, Clone)]
pub struct CumulativeSampler<S> {
    inner: S,
}

impl<S: PathSampler> PathSampler for CumulativeSampler<S> {
    type Scratch = (S::Scratch, Vec<f64>);
    fn path_len(&self) -> usize {
        self.inner.path_len() + 1
    }
    fn paths_per_draw(&self) -> usize {
        self.inner.paths_per_draw()
    }
    fn scratch(&self) -> Self::Scratch {
        (self.inner.scratch(), vec![0.0; self.inner.path_len() * self.inner.paths_per_draw()])
    }
    fn draw(&self, rng: &mut ChaCha8Rng, sc: &mut Self::Scratch, out: &mut [f64]) {
        self.inner.draw(rng, &mut sc.0, &mut sc.1);
        let m = self.inner.path_len();
        for p in 0..self.paths_per_draw() {
            let inc = &sc.1[p * m..(p + 1) * m];
            let o = &mut out[p * (m + 1)..(p + 1) * (m + 1)];
            o[0] = 0.0;
            for k in 0..m {
                o[k + 1] = o[k] + inc[k];
            }
        }
    }
}

/// Brownian increments with standard deviation `sd`.
#[derive(Debug, Clone)]
pub struct WhiteNoise {
    pub m: usize,
    pub sd: f64,
}

impl PathSampler for WhiteNoise {
    type Scratch = ();
    fn path_len(&self) -> usize {
        self.m
    }
    fn scratch(&self) {}
    fn draw(&self, rng: &mut ChaCha8Rng, _: &mut (), out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sd * std_normal(rng);
        }
    }
}

/// Scalar path sampler chosen for a kernel and grid.
pub enum ScalarSampler {
    Increments(CumulativeSampler<WhiteNoise>),
    CirculantPath(CirculantSampler),
    CirculantIncrements(CumulativeSampler<CirculantSampler>),
    Cholesky(CholeskySampler),
}

impl ScalarSampler {
    pub fn scheme(&self) -> Scheme {
        match self {
            ScalarSampler::Increments(_) => Scheme::Increments,
            ScalarSampler::CirculantPath(_) | ScalarSampler::CirculantIncrements(_) => Scheme::Circulant,
            ScalarSampler::Cholesky(_) => Scheme::Cholesky,
        }
    }

    /// fBm on a uniform grid starting at zero; Brownian motion uses independent increments,
    /// other Hurst indices circulant embedding of the increments with Cholesky fallback.
    pub fn fbm(h: f64, g: &Grid) -> Result<(Self, bool)> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Domain(format!("Hurst index {h} outside (0, 1)")));
        }
        if g.start() != 0.0 {
            return Err(Error::Grid("fBm grids must start at 0".into()));
        }
        if g.n() == 1 {
            return Ok((ScalarSampler::Increments(CumulativeSampler { inner: WhiteNoise { m: 0, sd: 0.0 } }), false));
        }
        let step = g.uniform_step().ok_or_else(|| Error::Grid("circulant scheme needs a uniform grid".into()))?;
        let m = g.n() - 1;
        if h == 0.5 {
            return Ok((ScalarSampler::Increments(CumulativeSampler { inner: WhiteNoise { m, sd: step.sqrt() } }), false));
        }
        let scale = step.powf(2.0 * h);
        let acf = |k: usize| {
            let k = k as f64;
            0.5 * scale * ((k + 1.0).powf(2.0 * h) - 2.0 * k.powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h))
        };
        match CirculantSampler::new(acf, m)? {
            Some(c) => Ok((ScalarSampler::CirculantIncrements(CumulativeSampler { inner: c }), false)),
            None => {
                log::warn!("circulant embedding failed for H = {h}; using Cholesky");
                Ok((ScalarSampler::Cholesky(fbm_cholesky(h, g)?), true))
            }
        }
    }

    /// Stationary process with correlation `rho` on a uniform grid.
    pub fn stationary(rho: &Correlation, g: &Grid) -> Result<(Self, bool)> {
        let chol = || -> Result<CholeskySampler> {
            let pts = g.points();
            let cov = DMatrix::from_fn(g.n(), g.n(), |i, j| rho.rho(pts[i] - pts[j]));
            CholeskySampler::from_covariance(&cov)
        };
        if g.n() == 1 {
            return Ok((ScalarSampler::Cholesky(chol()?), false));
        }
        let step = g.uniform_step().ok_or_else(|| Error::Grid("circulant scheme needs a uniform grid".into()))?;
        match CirculantSampler::new(|k| rho.rho(k as f64 * step), g.n())? {
            Some(c) => Ok((ScalarSampler::CirculantPath(c), false)),
            None => {
                log::warn!("circulant embedding failed for {rho:?}; using Cholesky");
                Ok((ScalarSampler::Cholesky(chol()?), true))
            }
        }
    }
}

fn fbm_cholesky(h: f64, g: &Grid) -> Result<CholeskySampler> {
    // the node at 0 is identically zero; factor the rest and prepend it
    let pts = &g.points()[1..];
    let cov = DMatrix::from_fn(pts.len(), pts.len(), |i, j| fbm_cov(h, pts[i], pts[j]));
    let inner = CholeskySampler::from_covariance(&cov)?;
    let n = pts.len() + 1;
    let mut l = vec![0.0];
    let mut off = 0;
    for i in 1..n {
        l.push(0.0);
        l.extend_from_slice(&inner.l[off..off + i]);
        off += i;
    }
    Ok(CholeskySampler { n, l, jitter: inner.jitter })
}

pub enum ScalarScratch {
    Increments(<CumulativeSampler<WhiteNoise> as PathSampler>::Scratch),
    CirculantPath(CirculantScratch),
    CirculantIncrements(<CumulativeSampler<CirculantSampler> as PathSampler>::Scratch),
    Cholesky(Vec<f64>),
}

impl PathSampler for ScalarSampler {
    type Scratch = ScalarScratch;
    fn path_len(&self) -> usize {
        match self {
            ScalarSampler::Increments(s) => s.path_len(),
            ScalarSampler::CirculantPath(s) => s.path_len(),
            ScalarSampler::CirculantIncrements(s) => s.path_len(),
            ScalarSampler::Cholesky(s) => s.path_len(),
        }
    }
    fn paths_per_draw(&self) -> usize {
        match self {
            ScalarSampler::Increments(s) => s.paths_per_draw(),
            ScalarSampler::CirculantPath(s) => s.paths_per_draw(),
            ScalarSampler::CirculantIncrements(s) => s.paths_per_draw(),
            ScalarSampler::Cholesky(s) => s.paths_per_draw(),
        }
    }
    fn scratch(&self) -> ScalarScratch {
        match self {
            ScalarSampler::Increments(s) => ScalarScratch::Increments(s.scratch()),
            ScalarSampler::CirculantPath(s) => ScalarScratch::CirculantPath(s.scratch()),
            ScalarSampler::CirculantIncrements(s) => ScalarScratch::CirculantIncrements(s.scratch()),
            ScalarSampler::Cholesky(s) => ScalarScratch::Cholesky(s.scratch()),
        }
    }
    fn draw(&self, rng: &mut ChaCha8Rng, sc: &mut ScalarScratch, out: &mut [f64]) {
        match (self, sc) {
            (ScalarSampler::Increments(s), ScalarScratch::Increments(c)) => s.draw(rng, c, out),
            (ScalarSampler::CirculantPath(s), ScalarScratch::CirculantPath(c)) => s.draw(rng, c, out),
            (ScalarSampler::CirculantIncrements(s), ScalarScratch::CirculantIncrements(c)) => s.draw(rng, c, out),
            (ScalarSampler::Cholesky(s), ScalarScratch::Cholesky(c)) => s.draw(rng, c, out),
            _ => unreachable!("scratch built by the same sampler"),
        }
    }
}

/// fBm paths on a uniform grid over `[0, L]`.
pub fn sample_fbm(h: f64, g: &Grid, n_paths: usize, seed: u64) -> Result<PathBatch> {
    let (s, fallback) = ScalarSampler::fbm(h, g)?;
    let mut b = collect_batch(&s, n_paths, seed, g.n(), 1, s.scheme());
    b.fallback = fallback;
    Ok(b)
}

/// fBm paths with a forced Cholesky scheme (used to cross-check the circulant scheme).
pub fn sample_fbm_cholesky(h: f64, g: &Grid, n_paths: usize, seed: u64) -> Result<PathBatch> {
    if g.start() != 0.0 {
        return Err(Error::Grid("fBm grids must start at 0".into()));
    }
    let s = fbm_cholesky(h, g)?;
    Ok(collect_batch(&s, n_paths, seed, g.n(), 1, Scheme::Cholesky))
}

/// Stationary paths with correlation `rho` on a uniform grid.
pub fn sample_stationary(rho: &Correlation, g: &Grid, n_paths: usize, seed: u64) -> Result<PathBatch> {
    let (s, fallback) = ScalarSampler::stationary(rho, g)?;
    let mut b = collect_batch(&s, n_paths, seed, g.n(), 1, s.scheme());
    b.fallback = fallback;
    Ok(b)
}

/// One scalar fBm-type component of the limit field: `scale * B(t)` on a coordinate grid.
struct FieldComponent {
    coord: usize,
    comp: usize,
    scale: f64,
    sampler: ScalarSampler,
}

/// Sampler of the drifted limit field `Y + Z - d` on a product grid. The field is a sum of
/// per-coordinate terms, so a path is stored as the concatenation of the `n_i x d` arrays
/// `F_i(t_i)`; the value at a product node is `sum_i F_i(t_i)`.
pub struct LimitFieldSampler {
    d: usize,
    grids: Vec<Grid>,
    offsets: Vec<usize>,
    components: Vec<FieldComponent>,
    /// Dense per-coordinate samplers for non-diagonal `V`, stacked node-major.
    dense: Vec<(usize, CholeskySampler)>,
    /// Deterministic part `-S_{nu,V}(t) 1 - |t|^nu W 1`, laid out like a path.
    drift: Vec<f64>,
    /// For each `Z` coordinate: index, node factors `t^{beta/2}` and blocks.
    z_terms: Vec<(usize, Vec<f64>, Vec<DMatrix<f64>>)>,
    n_z: usize,
}

impl LimitFieldSampler {
    pub fn new(dd: &DerivedData, grids: Vec<Grid>) -> Result<Self> {
        let (n, d) = (dd.n, dd.d);
        if grids.len() != n {
            return Err(Error::DimensionMismatch(format!("need {n} coordinate grids, got {}", grids.len())));
        }
        let mut offsets = vec![0];
        for g in &grids {
            if g.start() < 0.0 {
                return Err(Error::Grid("limit-field grids live on [0, S']".into()));
            }
            offsets.push(offsets.last().unwrap() + g.n() * d);
        }
        let mut drift = vec![0.0; offsets[n]];
        let mut components = Vec::new();
        let mut dense = Vec::new();
        for i in 0..n {
            let nu = dd.nu[i].value();
            let v = &dd.v_w[i];
            let w = &dd.w_w[i];
            let v1 = v * nalgebra::DVector::from_element(d, 1.0);
            let w1 = w * nalgebra::DVector::from_element(d, 1.0);
            for (k, &t) in grids[i].points().iter().enumerate() {
                let p = t.powf(nu);
                for c in 0..d {
                    drift[offsets[i] + k * d + c] = -p * (v1[c] + w1[c]);
                }
            }
            if v.amax() == 0.0 {
                continue;
            }
            let diagonal = (0..d).all(|a| (0..d).all(|b| a == b || v[(a, b)] == 0.0));
            if diagonal && grids[i].start() == 0.0 && (grids[i].n() == 1 || grids[i].uniform_step().is_some()) {
                for c in 0..d {
                    let vc = v[(c, c)];
                    if vc < 0.0 {
                        return Err(Error::AssumptionViolation(format!("V[{i}] has a negative diagonal entry")));
                    }
                    if vc > 0.0 {
                        let (sampler, _) = ScalarSampler::fbm(nu / 2.0, &grids[i])?;
                        components.push(FieldComponent { coord: i, comp: c, scale: (2.0 * vc).sqrt(), sampler });
                    }
                }
            } else {
                let vm = v.clone();
                let cov = grid_covariance(
                    |t, s| crate::models::r_fbm_matrix(nu, &vm, t, s).expect("nu in (0, 2]"),
                    &grids[i],
                    d,
                )?;
                dense.push((i, CholeskySampler::from_covariance(&cov)?));
            }
        }
        let mut z_terms = Vec::new();
        for (a, &i) in dd.z_labels.iter().enumerate() {
            let half = dd.beta[i].value() / 2.0;
            let fac = grids[i].points().iter().map(|t| t.powf(half)).collect();
            z_terms.push((i, fac, dd.z_blocks[a].clone()));
        }
        let n_z = dd.z_labels.len();
        Ok(LimitFieldSampler { d, grids, offsets, components, dense, drift, z_terms, n_z })
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Values `F_i(t_k)` of coordinate `i` inside a path: `n_i x d`, node-major.
    pub fn coordinate<'a>(&self, path: &'a [f64], i: usize) -> &'a [f64] {
        &path[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Expands a per-coordinate path into the full product grid (last coordinate fastest).
    pub fn expand(&self, path: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut acc = vec![0.0; d];
        let mut out = Vec::new();
        for (i, g) in self.grids.iter().enumerate() {
            let coord = self.coordinate(path, i);
            let mut next = Vec::with_capacity(acc.len() * g.n());
            for base in acc.chunks(d) {
                for k in 0..g.n() {
                    next.extend((0..d).map(|c| base[c] + coord[k * d + c]));
                }
            }
            acc = next;
        }
        out.extend(acc);
        out
    }

    pub fn product_size(&self) -> usize {
        self.grids.iter().map(Grid::n).product()
    }
}

pub struct LimitScratch {
    comps: Vec<(ScalarScratch, Vec<f64>)>,
    dense: Vec<(Vec<f64>, Vec<f64>)>,
    normals: Vec<f64>,
}

impl PathSampler for LimitFieldSampler {
    type Scratch = LimitScratch;
    fn path_len(&self) -> usize {
        self.drift.len()
    }
    fn scratch(&self) -> LimitScratch {
        LimitScratch {
            comps: self
                .components
                .iter()
                .map(|c| (c.sampler.scratch(), vec![0.0; c.sampler.path_len() * c.sampler.paths_per_draw()]))
                .collect(),
            dense: self.dense.iter().map(|(_, s)| (s.scratch(), vec![0.0; s.path_len()])).collect(),
            normals: vec![0.0; self.n_z * self.d],
        }
    }
    fn draw(&self, rng: &mut ChaCha8Rng, sc: &mut LimitScratch, out: &mut [f64]) {
        let d = self.d;
        out.copy_from_slice(&self.drift);
        for (c, (scr, buf)) in self.components.iter().zip(sc.comps.iter_mut()) {
            c.sampler.draw(rng, scr, buf);
            let off = self.offsets[c.coord];
            for k in 0..self.grids[c.coord].n() {
                out[off + k * d + c.comp] += c.scale * buf[k];
            }
        }
        for ((i, s), (scr, buf)) in self.dense.iter().zip(sc.dense.iter_mut()) {
            s.draw(rng, scr, buf);
            let off = self.offsets[*i];
            for (k, v) in buf.iter().enumerate() {
                out[off + k] += v;
            }
        }
        if self.n_z > 0 {
            for v in sc.normals.iter_mut() {
                *v = std_normal(rng);
            }
            for (i, fac, blocks) in &self.z_terms {
                // C_i . N = sum_k blocks[k] N_k
                let mut cn = vec![0.0; d];
                for (k, blk) in blocks.iter().enumerate() {
                    for a in 0..d {
                        for b in 0..d {
                            cn[a] += blk[(a, b)] * sc.normals[k * d + b];
                        }
                    }
                }
                let off = self.offsets[*i];
                for (k, f) in fac.iter().enumerate() {
                    for a in 0..d {
                        out[off + k * d + a] += f * cn[a];
                    }
                }
            }
        }
    }
}

/// Limit-field values on the full product grid (last coordinate fastest).
pub fn sample_limit_field(dd: &DerivedData, grids: Vec<Grid>, n_paths: usize, seed: u64) -> Result<PathBatch> {
    let s = LimitFieldSampler::new(dd, grids)?;
    let values: Vec<f64> = map_paths(&s, n_paths, seed, |p| s.expand(p)).concat();
    let shape = s.grids.iter().map(Grid::n).collect();
    Ok(PathBatch {
        n_paths,
        n_nodes: s.product_size(),
        dim: s.d,
        shape,
        values,
        seed,
        scheme: Scheme::Circulant,
        fallback: false,
    })
}

/// Exact maximum of a Brownian bridge between `x0` and `x1` over a step with variance
/// `var`, given a uniform variate `v` in `(0, 1]`.
pub fn bridge_max(x0: f64, x1: f64, var: f64, v: f64) -> f64 {
    let dx = x1 - x0;
    0.5 * (x0 + x1 + (dx * dx - 2.0 * var * v.ln()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponent::Exponent;
    use crate::models::IndexSets;

    fn sample_var(b: &PathBatch, node: usize) -> f64 {
        let n = b.n_paths as f64;
        let m: f64 = (0..b.n_paths).map(|i| b.value(i, node, 0)).sum::<f64>() / n;
        (0..b.n_paths).map(|i| (b.value(i, node, 0) - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![]).is_err());
        assert!(Grid::new(vec![0.0, 0.0]).is_err());
        assert!(Grid::with_step(1.0, 0.3).is_err());
        let g = Grid::with_step(1.0, 0.25).unwrap();
        assert_eq!(g.n(), 5);
        assert_eq!(g.uniform_step(), Some(0.25));
        assert_eq!(Grid::new(vec![0.0, 0.1, 0.3]).unwrap().uniform_step(), None);
    }

    #[test]
    fn identity_covariance() {
        let g = Grid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let b = sample_gaussian_grid(
            |t, s| DMatrix::from_element(1, 1, if t == s { 1.0 } else { 0.0 }),
            &g,
            1,
            100_000,
            5,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let c: f64 = (0..b.n_paths).map(|p| b.value(p, i, 0) * b.value(p, j, 0)).sum::<f64>() / 1e5;
                assert!((c - if i == j { 1.0 } else { 0.0 }).abs() < 0.02, "{i} {j} {c}");
            }
        }
        let one = sample_gaussian_grid(|_, _| DMatrix::from_element(1, 1, 4.0), &Grid::single(0.0), 1, 50_000, 1)
            .unwrap();
        assert!((sample_var(&one, 0) - 4.0).abs() < 0.1);
    }

    #[test]
    fn brownian_increments() {
        let g = Grid::new(vec![0.5, 1.0, 1.75]).unwrap();
        let b = sample_gaussian_grid(|t, s| DMatrix::from_element(1, 1, t.min(s)), &g, 1, 100_000, 9).unwrap();
        let inc: Vec<f64> = (0..b.n_paths).map(|p| b.value(p, 2, 0) - b.value(p, 1, 0)).collect();
        let v = inc.iter().map(|x| x * x).sum::<f64>() / 1e5;
        assert!((v - 0.75).abs() < 3.0 * 0.75 * (2.0f64 / 1e5).sqrt());
        let cross = (0..b.n_paths).map(|p| inc[p] * b.value(p, 0, 0)).sum::<f64>() / 1e5;
        assert!(cross.abs() < 4.0 * (0.75f64 * 0.5 / 1e5).sqrt());
    }

    #[test]
    fn fbm_endpoint_variances() {
        let g = Grid::uniform(2.0, 64).unwrap();
        for &h in &[0.5, 0.7] {
            let b = sample_fbm(h, &g, 100_000, 11).unwrap();
            let target = 2f64.powf(2.0 * h);
            let se = target * (2.0f64 / 1e5).sqrt();
            assert!((sample_var(&b, 64) - target).abs() < 3.0 * se, "H={h}");
            assert!(!b.fallback);
        }
        let b = sample_fbm(0.3, &g, 1000, 2).unwrap();
        assert!((0..1000).all(|p| b.value(p, 0, 0) == 0.0));
    }

    #[test]
    fn fbm_increment_stationarity() {
        let g = Grid::uniform(1.0, 32).unwrap();
        let h = 0.3;
        let b = sample_fbm(h, &g, 100_000, 4).unwrap();
        for &(i, j) in &[(3usize, 10usize), (0, 32), (17, 18)] {
            let v = (0..b.n_paths).map(|p| (b.value(p, j, 0) - b.value(p, i, 0)).powi(2)).sum::<f64>() / 1e5;
            let target = ((j - i) as f64 / 32.0).powf(2.0 * h);
            assert!((v - target).abs() < 3.0 * target * (2.0f64 / 1e5).sqrt(), "{i} {j}");
        }
    }

    #[test]
    fn circulant_matches_cholesky() {
        let g = Grid::uniform(1.0, 16).unwrap();
        for &h in &[0.3, 0.7] {
            let a = sample_fbm(h, &g, 100_000, 21).unwrap();
            let c = sample_fbm_cholesky(h, &g, 100_000, 22).unwrap();
            assert_eq!(a.scheme, Scheme::Circulant);
            let (va, vc) = (sample_var(&a, 16), sample_var(&c, 16));
            let se = (2.0f64 / 1e5).sqrt() * 2f64.sqrt();
            assert!((va - vc).abs() < 3.0 * se, "H={h}: {va} vs {vc}");
        }
    }

    #[test]
    fn four_node_covariances() {
        let g = Grid::uniform(1.5, 3).unwrap();
        let n = 100_000;
        let tol = 4.0 / (n as f64).sqrt();
        let check = |b: &PathBatch, k: &dyn Fn(f64, f64) -> f64| {
            for i in 0..4 {
                for j in 0..4 {
                    let c: f64 = (0..n).map(|p| b.value(p, i, 0) * b.value(p, j, 0)).sum::<f64>() / n as f64;
                    let t = k(g.points()[i], g.points()[j]);
                    assert!((c - t).abs() < tol * (1.0 + t.abs()), "{i} {j}: {c} vs {t}");
                }
            }
        };
        let rho = Correlation::pow_exp(1.0, 1.5);
        check(&sample_stationary(&rho, &g, n, 3).unwrap(), &|t, s| rho.rho(t - s));
        check(&sample_fbm(0.3, &g, n, 3).unwrap(), &|t, s| fbm_cov(0.3, t, s));
        check(&sample_fbm(0.5, &g, n, 3).unwrap(), &|t, s| t.min(s));
    }

    #[test]
    fn stationary_padding_and_fallback() {
        let rho = Correlation::pow_exp(1.0, 1.5);
        let g = Grid::uniform(1.0, 1024).unwrap();
        let (s, fb) = ScalarSampler::stationary(&rho, &g).unwrap();
        assert!(!fb);
        match s {
            ScalarSampler::CirculantPath(c) => assert!(c.size >= 2 * 1024),
            _ => panic!("expected circulant"),
        }
        // a correlation with no nonnegative embedding: falls back
        let flat = Correlation::pow_exp(0.05, 1.9);
        let g = Grid::uniform(1.0, 8).unwrap();
        let b = sample_stationary(&flat, &g, 10, 1).unwrap();
        assert!(b.fallback);
        assert_eq!(b.scheme, Scheme::Cholesky);
    }

    #[test]
    fn determinism_across_pools() {
        let g = Grid::uniform(1.0, 50).unwrap();
        let a = sample_fbm(0.35, &g, 101, 77).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| sample_fbm(0.35, &g, 101, 77).unwrap());
        assert_eq!(a.values, b.values);
        let c = sample_fbm(0.35, &g, 101, 78).unwrap();
        assert_ne!(a.values, c.values);
    }

    fn scalar_field(nu: f64, v: f64, w: f64) -> DerivedData {
        let e = Exponent::from_f64(nu);
        let sets = if w > 0.0 {
            IndexSets { drift: vec![0], ..Default::default() }
        } else {
            IndexSets { pickands: vec![0], ..Default::default() }
        };
        DerivedData::from_field(
            vec![e],
            sets,
            vec![DMatrix::from_element(1, 1, v)],
            vec![DMatrix::from_element(1, 1, w)],
        )
        .unwrap()
    }

    #[test]
    fn limit_field_moments() {
        let dd = scalar_field(1.5, 0.5, 0.0);
        let g = Grid::uniform(2.0, 8).unwrap();
        let b = sample_limit_field(&dd, vec![g.clone()], 100_000, 5).unwrap();
        assert!((0..b.n_paths).all(|p| b.value(p, 0, 0) == 0.0));
        let t = 2.0f64;
        let mean = (0..b.n_paths).map(|p| b.value(p, 8, 0)).sum::<f64>() / 1e5;
        assert!((mean + 0.5 * t.powf(1.5)).abs() < 4.0 * (t.powf(1.5) / 1e5).sqrt());
        assert!((sample_var(&b, 8) - t.powf(1.5)).abs() < 3.0 * t.powf(1.5) * (2.0f64 / 1e5).sqrt());
        let drift = scalar_field(1.0, 0.0, 2.0);
        let b = sample_limit_field(&drift, vec![g], 3, 5).unwrap();
        assert_eq!(b.value(1, 4, 0), -2.0);
    }

    #[test]
    fn bridge_max_bounds() {
        assert_eq!(bridge_max(0.3, -0.2, 0.0, 0.5), 0.3);
        assert!(bridge_max(0.0, 0.0, 1.0, 0.1) > 0.0);
        assert_eq!(bridge_max(1.0, 2.0, 0.5, 1.0), 2.0);
    }

    #[test]
    fn csv_export() {
        let g = Grid::uniform(1.0, 2).unwrap();
        let b = sample_fbm(0.5, &g, 2, 1).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf, Some(&g)).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t=0,t=0.5,t=1");
    }
}
