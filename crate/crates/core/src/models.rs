//! Covariance kernels, expansion data for the double-crossing fields and derived quantities.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exponent::Exponent;
use crate::linalg::{
    cholesky_psd, factor_block_psd, matrices_serde, matrix_serde, matrix_table_serde, BlockMatrix, JitterPolicy,
    SymMatrix,
};
use crate::qpp::{generalized_variance, solve_qpp, QppProblem, QppSolution};

/// `|t|^alpha (V if t >= 0 else V^T)`.
pub fn s_matrix(alpha: f64, v: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("alpha = {alpha} outside (0, 2]")));
    }
    let p = t.abs().powf(alpha);
    Ok(if t >= 0.0 { v * p } else { v.transpose() * p })
}

/// `S(t) + S(-s) - S(t - s)`: the matrix covariance of a multivariate fBm.
pub fn r_fbm_matrix(alpha: f64, v: &DMatrix<f64>, t: f64, s: f64) -> Result<DMatrix<f64>> {
    Ok(s_matrix(alpha, v, t)? + s_matrix(alpha, v, -s)? - s_matrix(alpha, v, t - s)?)
}

/// Scalar fBm covariance `(|t|^{2H} + |s|^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_cov(hurst: f64, t: f64, s: f64) -> f64 {
    let e = 2.0 * hurst;
    0.5 * (t.abs().powf(e) + s.abs().powf(e) - (t - s).abs().powf(e))
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Correlation function of a stationary process, with its local behaviour
/// `rho(t) = 1 - theta t^alpha + o(t^alpha)` at zero.
#[derive(Clone)]
pub enum Correlation {
    /// `exp(-theta |t|^alpha)`.
    PowExp { theta: f64, alpha: Exponent },
    /// `1 - theta |t|^alpha`.
    Polynomial { theta: f64, alpha: Exponent },
    Custom { rho: ScalarFn, derivative: Option<ScalarFn>, theta: f64, alpha: Exponent, label: String },
}

impl fmt::Debug for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::PowExp { theta, alpha } => write!(f, "PowExp(theta={theta}, alpha={alpha})"),
            Correlation::Polynomial { theta, alpha } => write!(f, "Polynomial(theta={theta}, alpha={alpha})"),
            Correlation::Custom { label, theta, alpha, .. } => write!(f, "Custom({label}, theta={theta}, alpha={alpha})"),
        }
    }
}

impl Correlation {
    pub fn pow_exp(theta: f64, alpha: f64) -> Self {
        Correlation::PowExp { theta, alpha: Exponent::from_f64(alpha) }
    }

    pub fn polynomial(theta: f64, alpha: f64) -> Self {
        Correlation::Polynomial { theta, alpha: Exponent::from_f64(alpha) }
    }

    pub fn rho(&self, t: f64) -> f64 {
        let t = t.abs();
        match self {
            Correlation::PowExp { theta, alpha } => (-theta * t.powf(alpha.value())).exp(),
            Correlation::Polynomial { theta, alpha } => 1.0 - theta * t.powf(alpha.value()),
            Correlation::Custom { rho, .. } => rho(t),
        }
    }

    /// `rho'(t)` for `t > 0`; central difference with step `1e-6 t` when no analytic form exists.
    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Correlation::PowExp { theta, alpha } => {
                let a = alpha.value();
                -theta * a * t.powf(a - 1.0) * (-theta * t.powf(a)).exp()
            }
            Correlation::Polynomial { theta, alpha } => {
                let a = alpha.value();
                -theta * a * t.powf(a - 1.0)
            }
            Correlation::Custom { rho, derivative, .. } => match derivative {
                Some(d) => d(t),
                None => {
                    let h = 1e-6 * t;
                    (rho(t + h) - rho(t - h)) / (2.0 * h)
                }
            },
        }
    }

    pub fn theta(&self) -> f64 {
        match self {
            Correlation::PowExp { theta, .. } | Correlation::Polynomial { theta, .. } | Correlation::Custom { theta, .. } => {
                *theta
            }
        }
    }

    pub fn alpha(&self) -> Exponent {
        match self {
            Correlation::PowExp { alpha, .. } | Correlation::Polynomial { alpha, .. } | Correlation::Custom { alpha, .. } => {
                *alpha
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum CorrelationRepr {
    PowExp { theta: f64, alpha: Exponent },
    Polynomial { theta: f64, alpha: Exponent },
}

impl Serialize for Correlation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Correlation::PowExp { theta, alpha } => CorrelationRepr::PowExp { theta: *theta, alpha: *alpha }.serialize(s),
            Correlation::Polynomial { theta, alpha } => {
                CorrelationRepr::Polynomial { theta: *theta, alpha: *alpha }.serialize(s)
            }
            Correlation::Custom { .. } => Err(serde::ser::Error::custom("custom correlations are not serializable")),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match CorrelationRepr::deserialize(d)? {
            CorrelationRepr::PowExp { theta, alpha } => Correlation::PowExp { theta, alpha },
            CorrelationRepr::Polynomial { theta, alpha } => Correlation::Polynomial { theta, alpha },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Stationary { correlation: Correlation },
    Fbm { hurst: f64 },
}

/// A scalar Gaussian process on `[0, T]` together with the thresholds `a`, `b`
/// of the double-crossing event `{X(t) > a u, X(s) < -b u}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovModel {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub horizon: f64,
    pub a: f64,
    pub b: f64,
}

impl CovModel {
    pub fn stationary(correlation: Correlation, horizon: f64, a: f64, b: f64) -> Result<Self> {
        let m = CovModel { kind: ModelKind::Stationary { correlation }, horizon, a, b };
        m.validate()?;
        Ok(m)
    }

    pub fn fbm(hurst: f64, horizon: f64, a: f64, b: f64) -> Result<Self> {
        let m = CovModel { kind: ModelKind::Fbm { hurst }, horizon, a, b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::Domain(format!("thresholds a = {}, b = {} must be positive", self.a, self.b)));
        }
        match &self.kind {
            ModelKind::Fbm { hurst } => {
                if !(*hurst > 0.0 && *hurst < 1.0) {
                    return Err(Error::Domain(format!("Hurst index {hurst} outside (0, 1)")));
                }
            }
            ModelKind::Stationary { correlation } => {
                let th = correlation.theta();
                let al = correlation.alpha().value();
                if !(th > 0.0) {
                    return Err(Error::Domain(format!("theta = {th} must be positive")));
                }
                if !(al > 0.0 && al <= 2.0) {
                    return Err(Error::Domain(format!("alpha = {al} outside (0, 2]")));
                }
                if (correlation.rho(0.0) - 1.0).abs() > 1e-12 {
                    return Err(Error::Model("rho(0) must equal 1".into()));
                }
                let n = 1024;
                let mut prev = 1.0;
                for k in 1..=n {
                    let r = correlation.rho(self.horizon * k as f64 / n as f64);
                    if !(r > 0.0) || !(r < prev) {
                        return Err(Error::Model("rho must be positive and strictly decreasing on (0, T]".into()));
                    }
                    prev = r;
                }
            }
        }
        Ok(())
    }

    /// Scalar covariance `E X(t) X(s)`.
    pub fn kernel(&self, t: f64, s: f64) -> f64 {
        match &self.kind {
            ModelKind::Stationary { correlation } => correlation.rho(t - s),
            ModelKind::Fbm { hurst } => fbm_cov(*hurst, t, s),
        }
    }

    pub fn hurst(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Fbm { hurst } => Some(*hurst),
            _ => None,
        }
    }

    pub fn correlation(&self) -> Option<&Correlation> {
        match &self.kind {
            ModelKind::Stationary { correlation } => Some(correlation),
            _ => None,
        }
    }

    /// Covariance of the double-crossing field `(X(p_1(t_1)), -X(p_2(t_2)))` with
    /// `p_i(x) = t_star_i + dir_i x`.
    pub fn corner_cov(&self, t_star: &[f64], dirs: &[f64], tau: &[f64], sig: &[f64]) -> DMatrix<f64> {
        let sign = [1.0, -1.0];
        DMatrix::from_fn(2, 2, |i, j| {
            sign[i] * sign[j] * self.kernel(t_star[i] + dirs[i] * tau[i], t_star[j] + dirs[j] * sig[j])
        })
    }
}

/// The local expansion package of a vector field at its most likely exceedance point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionData {
    pub n: usize,
    pub d: usize,
    pub alpha: Vec<Exponent>,
    pub beta: Vec<Exponent>,
    pub beta_prime: Vec<Exponent>,
    #[serde(with = "matrices_serde")]
    pub a1: Vec<DMatrix<f64>>,
    #[serde(with = "matrices_serde")]
    pub a2: Vec<DMatrix<f64>>,
    #[serde(with = "matrices_serde")]
    pub a5: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_table_serde")]
    pub a6: Vec<Vec<DMatrix<f64>>>,
    pub sigma: SymMatrix,
    pub b: Vec<f64>,
    /// Expansion point in model time.
    pub t_star: Vec<f64>,
    /// Orientation of each local coordinate in model time (`+1` or `-1`).
    pub directions: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ExpansionData {
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n, self.d);
        let lens = [self.alpha.len(), self.beta.len(), self.beta_prime.len(), self.a1.len(), self.a2.len(), self.a5.len()];
        if lens.iter().any(|&l| l != n) || self.a6.len() != n || self.a6.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("expansion data lengths disagree with n".into()));
        }
        if self.sigma.dim() != d || self.b.len() != d || self.t_star.len() != n || self.directions.len() != n {
            return Err(Error::DimensionMismatch("sigma, b, t_star or directions have the wrong size".into()));
        }
        let all = self.a1.iter().chain(&self.a2).chain(&self.a5).chain(self.a6.iter().flatten());
        if all.into_iter().any(|m| m.nrows() != d || m.ncols() != d) {
            return Err(Error::DimensionMismatch(format!("expansion matrices must be {d}x{d}")));
        }
        for i in 0..n {
            let a = self.alpha[i].value();
            if !(a > 0.0 && a <= 2.0) {
                return Err(Error::Domain(format!("alpha[{i}] = {a} outside (0, 2]")));
            }
            if self.beta[i].value() <= 0.0 {
                return Err(Error::Domain(format!("beta[{i}] must be positive")));
            }
            if self.a1[i].amax() > 0.0 {
                let bp = self.beta_prime[i];
                let b = self.beta[i];
                if bp.compare(&b) != Ordering::Less || b.compare(&bp.scale(2, 1)) == Ordering::Greater {
                    return Err(Error::Domain(format!("need beta'[{i}] < beta[{i}] <= 2 beta'[{i}]")));
                }
            }
            for j in 0..n {
                let diff = (&self.a6[i][j] - self.a6[j][i].transpose()).amax();
                if diff > 1e-12 * (1.0 + self.a6[i][j].amax()) {
                    return Err(Error::Domain(format!("A6[{i}][{j}] is not the transpose of A6[{j}][{i}]")));
                }
            }
        }
        Ok(())
    }

    /// Leading terms of `Sigma - R(t, s)`.
    pub fn expansion(&self, t: &[f64], s: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.d);
        for i in 0..self.n {
            let (bp, b, a) = (self.beta_prime[i].value(), self.beta[i].value(), self.alpha[i].value());
            out += &self.a1[i] * t[i].powf(bp) + &self.a2[i] * t[i].powf(b);
            out += self.a1[i].transpose() * s[i].powf(bp) + self.a2[i].transpose() * s[i].powf(b);
            out += s_matrix(a, &self.a5[i], t[i] - s[i]).expect("alpha validated");
            for j in 0..self.n {
                out += &self.a6[i][j] * (t[i].powf(bp) * s[j].powf(self.beta_prime[j].value()));
            }
        }
        out
    }

    /// Coordinates with `2 beta' = beta`.
    pub fn f_set(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.beta_prime[i].scale(2, 1) == self.beta[i]).collect()
    }
}

/// Partition of the time coordinates.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct IndexSets {
    /// `alpha < beta`.
    pub pickands: Vec<usize>,
    /// `alpha = beta`.
    pub boundary: Vec<usize>,
    /// `alpha > beta`.
    pub drift: Vec<usize>,
    /// `2 beta' = beta`.
    pub coupled: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Quantities computed from [`ExpansionData`] that enter the asymptotic formula.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedData {
    pub n: usize,
    pub d: usize,
    pub qpp: QppSolution,
    pub w: Vec<f64>,
    pub xi: Vec<f64>,
    pub varkappa: Vec<f64>,
    /// `D_{i,j} = A6_{i,j} + A1_i Sigma^{-1} A1_j^T` over the coupled set.
    pub d_blocks: BlockMatrix,
    #[serde(with = "matrix_serde")]
    pub xi_matrix: DMatrix<f64>,
    pub alpha: Vec<Exponent>,
    pub beta: Vec<Exponent>,
    pub nu: Vec<Exponent>,
    pub zeta: f64,
    pub sets: IndexSets,
    /// `diag(w) A5_i diag(w)`; zero matrices outside the Pickands and boundary sets.
    #[serde(with = "matrices_serde")]
    pub v_w: Vec<DMatrix<f64>>,
    /// `diag(w) A2_i diag(w)`; zero matrices outside the boundary and drift sets.
    #[serde(with = "matrices_serde")]
    pub w_w: Vec<DMatrix<f64>>,
    /// Labels of `(J u K) n F` and the blocks `diag(w) C_{i,k}` over them.
    pub z_labels: Vec<usize>,
    #[serde(with = "matrix_table_serde")]
    pub z_blocks: Vec<Vec<DMatrix<f64>>>,
    pub checks: Vec<AssumptionCheck>,
}

impl DerivedData {
    /// Builds limit-field data directly, e.g. for one-dimensional reductions.
    pub fn from_field(
        nu: Vec<Exponent>,
        sets: IndexSets,
        v_w: Vec<DMatrix<f64>>,
        w_w: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = nu.len();
        let d = v_w.first().map_or(1, |m| m.nrows());
        if v_w.len() != n || w_w.len() != n {
            return Err(Error::DimensionMismatch("one V and one W matrix per coordinate".into()));
        }
        Ok(DerivedData {
            n,
            d,
            qpp: QppSolution {
                b_tilde: vec![1.0; d],
                active_set: (0..d).collect(),
                inactive_set: vec![],
                w: vec![1.0; d],
                value: d as f64,
                ambiguous: false,
            },
            w: vec![1.0; d],
            xi: vec![0.0; n],
            varkappa: vec![0.0; n],
            d_blocks: BlockMatrix::from_fn(vec![], d, |_, _| DMatrix::zeros(d, d))?,
            xi_matrix: DMatrix::zeros(n, n),
            alpha: nu.clone(),
            beta: nu.clone(),
            zeta: 0.0,
            nu,
            sets,
            v_w,
            w_w,
            z_labels: vec![],
            z_blocks: vec![],
            checks: vec![],
        })
    }

    /// Sub-matrix `Xi_{I,I}` and `beta_I` over the Pickands set.
    pub fn pickands_block(&self) -> (Vec<f64>, DMatrix<f64>) {
        let idx = &self.sets.pickands;
        let beta = idx.iter().map(|&i| self.beta[i].value()).collect();
        let xi = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.xi_matrix[(idx[a], idx[b])]);
        (beta, xi)
    }
}

fn quad_form(w: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (w.transpose() * m * w)[(0, 0)]
}

fn classify(alpha: &[Exponent], beta: &[Exponent], f: Vec<usize>) -> IndexSets {
    let mut s = IndexSets { coupled: f, ..Default::default() };
    for i in 0..alpha.len() {
        match alpha[i].compare(&beta[i]) {
            Ordering::Less => s.pickands.push(i),
            Ordering::Equal => s.boundary.push(i),
            Ordering::Greater => s.drift.push(i),
        }
    }
    s
}

/// Runs every assumption check without stopping at the first failure.
pub fn assumption_checks(e: &ExpansionData) -> Result<Vec<AssumptionCheck>> {
    Ok(derive_with_checks(e)?.1)
}

/// Derived quantities together with every assumption check, without failing on a violated one.
pub fn derive_with_checks(e: &ExpansionData) -> Result<(DerivedData, Vec<AssumptionCheck>)> {
    e.validate()?;
    let (n, d) = (e.n, e.d);
    let qpp = solve_qpp(&QppProblem::new(e.sigma.clone(), e.b.clone())?)?;
    let w = DVector::from_column_slice(&qpp.w);
    let sigma_inv = cholesky_psd(e.sigma.matrix(), JitterPolicy::none())?.inverse();
    let xi: Vec<f64> = e.a2.iter().map(|m| quad_form(&w, m)).collect();
    let varkappa: Vec<f64> = e.a5.iter().map(|m| quad_form(&w, m)).collect();
    let f = e.f_set();
    let sets = classify(&e.alpha, &e.beta, f.clone());
    let d_blocks = BlockMatrix::from_fn(f.clone(), d, |i, j| &e.a6[i][j] + &e.a1[i] * &sigma_inv * e.a1[j].transpose())?;

    let mut xi_matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut m = DMatrix::zeros(d, d);
            if i == j {
                m += &e.a2[i] * 2.0;
            }
            if let Some(b) = d_blocks.block(i, j) {
                m += b;
            }
            xi_matrix[(i, j)] = quad_form(&w, &m);
        }
    }
    let nu: Vec<Exponent> = (0..n).map(|i| e.alpha[i].min(e.beta[i])).collect();
    let zeta: f64 = sets.pickands.iter().map(|&i| 2.0 / e.alpha[i].value() - 2.0 / e.beta[i].value()).sum();

    let dw = DMatrix::from_diagonal(&w);
    let v_w = (0..n)
        .map(|i| {
            if sets.drift.contains(&i) {
                DMatrix::zeros(d, d)
            } else {
                &dw * &e.a5[i] * &dw
            }
        })
        .collect();
    let w_w = (0..n)
        .map(|i| {
            if sets.pickands.contains(&i) {
                DMatrix::zeros(d, d)
            } else {
                &dw * &e.a2[i] * &dw
            }
        })
        .collect();

    let mut checks = Vec::new();
    // On coordinates with 2 beta' = beta the t^beta coefficient of the generalized variance
    // also picks up the D block, so positivity is required of the diagonal of Xi instead.
    for i in 0..n {
        if f.contains(&i) {
            checks.push(AssumptionCheck {
                name: format!("Xi[{i},{i}] > 0"),
                passed: xi_matrix[(i, i)] > 0.0,
                detail: format!("Xi[{i},{i}] = {}, xi[{i}] = {}", xi_matrix[(i, i)], xi[i]),
            });
        } else {
            checks.push(AssumptionCheck {
                name: format!("xi[{i}] > 0"),
                passed: xi[i] > 0.0,
                detail: format!("xi[{i}] = {}", xi[i]),
            });
        }
    }
    for &i in &sets.pickands {
        checks.push(AssumptionCheck {
            name: format!("varkappa[{i}] > 0"),
            passed: varkappa[i] > 0.0,
            detail: format!("varkappa[{i}] = {}", varkappa[i]),
        });
    }
    for i in 0..n {
        let r = (&e.a1[i] * &w).amax();
        let tol = 1e-8 * (1.0 + e.a1[i].amax() * w.amax());
        checks.push(AssumptionCheck {
            name: format!("A1[{i}] w = 0"),
            passed: r <= tol,
            detail: format!("max |A1[{i}] w| = {r:e}"),
        });
    }
    let z_labels: Vec<usize> = f.iter().copied().filter(|i| !sets.pickands.contains(i)).collect();
    let factor = factor_block_psd(&d_blocks);
    checks.push(AssumptionCheck {
        name: "D positive semidefinite".into(),
        passed: factor.is_ok(),
        detail: match &factor {
            Ok(_) => "block factorization succeeded".into(),
            Err(err) => err.to_string(),
        },
    });
    let mut z_blocks = Vec::new();
    if factor.is_ok() && !z_labels.is_empty() {
        let sub = factor_block_psd(&d_blocks.restrict(&z_labels))?;
        for &i in &z_labels {
            z_blocks.push(z_labels.iter().map(|&k| &dw * sub.block(i, k).unwrap()).collect());
        }
    }
    let dd = DerivedData {
        n,
        d,
        w: qpp.w.clone(),
        qpp,
        xi,
        varkappa,
        d_blocks,
        xi_matrix,
        alpha: e.alpha.clone(),
        beta: e.beta.clone(),
        nu,
        zeta,
        sets,
        v_w,
        w_w,
        z_labels,
        z_blocks,
        checks: checks.clone(),
    };
    Ok((dd, checks))
}

/// Derives `w`, `xi`, `varkappa`, `D`, `Xi`, `nu`, `zeta` and the index sets; fails with the
/// first violated assumption.
pub fn derive(e: &ExpansionData) -> Result<DerivedData> {
    let (dd, checks) = derive_with_checks(e)?;
    if let Some(c) = checks.iter().find(|c| !c.passed) {
        return Err(Error::AssumptionViolation(format!("{}: {}", c.name, c.detail)));
    }
    Ok(dd)
}

fn zeros(d: usize) -> DMatrix<f64> {
    DMatrix::zeros(d, d)
}

/// Expansion data of the field `(X(t_1), -X(T - t_2))` at the corner `(0, T)`.
pub fn build_stationary_dc_model(m: &CovModel) -> Result<ExpansionData> {
    m.validate()?;
    let corr = m.correlation().ok_or_else(|| Error::Model("expected a stationary model".into()))?;
    let t = m.horizon;
    let r = corr.rho(t);
    let dr = corr.derivative(t);
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Model(format!("rho(T) = {r} outside (0, 1)")));
    }
    if !(dr < 0.0) {
        return Err(Error::Model(format!("rho'(T) = {dr} must be negative")));
    }
    let theta = corr.theta();
    let alpha = corr.alpha();
    let a21 = DMatrix::from_row_slice(2, 2, &[0.0, -dr, 0.0, 0.0]);
    let one = Exponent::rational(1, 1)?;
    let bp = Exponent::rational(3, 4)?;
    let e = ExpansionData {
        n: 2,
        d: 2,
        alpha: vec![alpha, alpha],
        beta: vec![one, one],
        beta_prime: vec![bp, bp],
        a1: vec![zeros(2), zeros(2)],
        a2: vec![a21.clone(), a21.transpose()],
        a5: vec![
            DMatrix::from_row_slice(2, 2, &[theta, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, theta]),
        ],
        a6: vec![vec![zeros(2), zeros(2)], vec![zeros(2), zeros(2)]],
        sigma: SymMatrix::from_rows(&[vec![1.0, -r], vec![-r, 1.0]])?,
        b: vec![m.a, m.b],
        t_star: vec![0.0, t],
        directions: vec![1.0, -1.0],
        gamma: vec![alpha.value(), alpha.value()],
    };
    e.validate()?;
    Ok(e)
}

/// Expansion data of the field `(B_H(T - t_1), -B_H(t_* + t_2))` at the corner `(T, t_*)`;
/// requires `a >= b`.
pub fn build_fbm_dc_model(m: &CovModel) -> Result<ExpansionData> {
    m.validate()?;
    let h = m.hurst().ok_or_else(|| Error::Model("expected an fBm model".into()))?;
    if m.a < m.b {
        return Err(Error::Model("the fBm builder needs a >= b; swap the thresholds".into()));
    }
    let t = m.horizon;
    let mn = crate::asymptotics::fbm_minimizer(h, m.b / m.a, t, m.a)?;
    let ts = mn.t_star;
    let e1 = 2.0 * h - 1.0;
    let e2 = 2.0 * h - 2.0;
    let rem = t - ts;
    let a21 = DMatrix::from_row_slice(2, 2, &[h * t.powf(e1), -h * (t.powf(e1) - rem.powf(e1)), 0.0, 0.0]);
    let a12 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, h * (ts.powf(e1) + rem.powf(e1)), -h * ts.powf(e1)]);
    let c = h * (h - 0.5);
    let a22 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, c * (ts.powf(e2) - rem.powf(e2)), -c * ts.powf(e2)]);
    let r = fbm_cov(h, t, ts);
    let two_h = Exponent::from_f64(2.0 * h);
    let g = (2.0 * h).min(1.0);
    let e = ExpansionData {
        n: 2,
        d: 2,
        alpha: vec![two_h, two_h],
        beta: vec![Exponent::rational(1, 1)?, Exponent::rational(2, 1)?],
        beta_prime: vec![Exponent::rational(3, 4)?, Exponent::rational(1, 1)?],
        a1: vec![zeros(2), a12.clone()],
        a2: vec![a21, a22],
        a5: vec![
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]),
        ],
        a6: vec![vec![zeros(2), zeros(2)], vec![zeros(2), zeros(2)]],
        sigma: SymMatrix::from_rows(&[vec![t.powf(2.0 * h), -r], vec![-r, ts.powf(2.0 * h)]])?,
        b: vec![m.a, m.b],
        t_star: vec![t, ts],
        directions: vec![-1.0, 1.0],
        gamma: vec![g, g],
    };
    e.validate()?;
    let sol = solve_qpp(&QppProblem::new(e.sigma.clone(), e.b.clone())?)?;
    let w = DVector::from_column_slice(&sol.w);
    let res = (&a12 * &w).amax();
    if res > 1e-8 * (1.0 + a12.amax() * w.amax()) {
        return Err(Error::Model(format!("A1[1] w = {res:e} is not zero; t_* is inaccurate")));
    }
    Ok(e)
}

/// Generalized variance of the double-crossing field at local offset `tau`.
pub fn local_generalized_variance(m: &CovModel, e: &ExpansionData, tau: &[f64]) -> Result<f64> {
    let s = SymMatrix::new(m.corner_cov(&e.t_star, &e.directions, tau, tau))?;
    Ok(generalized_variance(&s, &e.b)?.0)
}

/// `Xi` extracted from `sigma_b^{-2}(tau) - sigma_b^{-2}(0)` with one-sided probes of size `radius`.
pub fn xi_finite_difference(m: &CovModel, e: &ExpansionData, radius: f64) -> Result<DMatrix<f64>> {
    let n = e.n;
    let base = local_generalized_variance(m, e, &vec![0.0; n])?;
    let mut xi = DMatrix::zeros(n, n);
    let pw: Vec<f64> = (0..n).map(|i| radius.powf(e.beta[i].value())).collect();
    for i in 0..n {
        let mut tau = vec![0.0; n];
        tau[i] = radius;
        xi[(i, i)] = (local_generalized_variance(m, e, &tau)? - base) / pw[i];
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut tau = vec![0.0; n];
            tau[i] = radius;
            tau[j] = radius;
            let v = local_generalized_variance(m, e, &tau)? - base - xi[(i, i)] * pw[i] - xi[(j, j)] * pw[j];
            let c = v / (2.0 * (pw[i] * pw[j]).sqrt());
            xi[(i, j)] = c;
            xi[(j, i)] = c;
        }
    }
    Ok(xi)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionProbe {
    pub radii: Vec<f64>,
    pub directions: usize,
    pub seed: u64,
}

impl Default for ExpansionProbe {
    fn default() -> Self {
        ExpansionProbe { radii: vec![1e-1, 1e-2, 1e-3], directions: 16, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub radii: Vec<f64>,
    /// Largest residual ratio over the probe directions at each radius.
    pub ratios: Vec<f64>,
    pub pass: bool,
    pub rule: String,
}

/// Residual ratio of one probe pair.
pub fn expansion_residual(m: &CovModel, e: &ExpansionData, t: &[f64], s: &[f64]) -> Result<f64> {
    let r = m.corner_cov(&e.t_star, &e.directions, t, s);
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Evaluation("kernel is not finite at the probe points".into()));
    }
    let resid = (e.sigma.matrix() - r - e.expansion(t, s)).norm();
    let scale: f64 = (0..e.n)
        .map(|i| {
            let b = e.beta[i].value();
            t[i].powf(b) + s[i].powf(b) + (t[i] - s[i]).abs().powf(e.alpha[i].value())
        })
        .sum();
    Ok(if scale == 0.0 { resid } else { resid / scale })
}

/// Probes the expansion at shrinking radii. Passes when the residual ratio falls by at
/// least a factor 2 from the largest to the smallest radius, or is below `1e-10` at the
/// smallest radius (kernels reproduced exactly).
pub fn verify_expansion(m: &CovModel, e: &ExpansionData, probe: &ExpansionProbe) -> Result<ExpansionReport> {
    if probe.radii.is_empty() || probe.directions == 0 {
        return Err(Error::Domain("probe needs radii and at least one direction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let dirs: Vec<(Vec<f64>, Vec<f64>)> = (0..probe.directions)
        .map(|_| {
            let t = (0..e.n).map(|_| rng.random::<f64>()).collect();
            let s = (0..e.n).map(|_| rng.random::<f64>()).collect();
            (t, s)
        })
        .collect();
    let mut ratios = Vec::new();
    for &r in &probe.radii {
        let mut worst = 0.0f64;
        for (t, s) in &dirs {
            let t: Vec<f64> = t.iter().map(|x| x * r).collect();
            let s: Vec<f64> = s.iter().map(|x| x * r).collect();
            worst = worst.max(expansion_residual(m, e, &t, &s)?);
        }
        ratios.push(worst);
    }
    let (imax, imin) = {
        let mut idx: Vec<usize> = (0..probe.radii.len()).collect();
        idx.sort_by(|&a, &b| probe.radii[a].partial_cmp(&probe.radii[b]).unwrap());
        (idx[idx.len() - 1], idx[0])
    };
    let exact = ratios[imin] < 1e-10;
    let decay = ratios[imax] >= 2.0 * ratios[imin];
    Ok(ExpansionReport {
        radii: probe.radii.clone(),
        ratios,
        pass: exact || decay,
        rule: if exact { "exact at smallest radius".into() } else { "ratio decays by factor >= 2".into() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, v)
    }

    #[test]
    fn s_and_r_definitions() {
        let v = mat(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s_matrix(1.0, &v, 0.0).unwrap(), zeros(2));
        assert_abs_diff_eq!(s_matrix(1.0, &v, -2.0).unwrap(), mat(&[2.0, 6.0, 4.0, 8.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(s_matrix(2.0, &DMatrix::identity(2, 2), 3.0).unwrap(), DMatrix::identity(2, 2) * 9.0);
        assert!(matches!(s_matrix(2.5, &v, 1.0), Err(Error::Domain(_))));
        assert_eq!(r_fbm_matrix(1.3, &v, 0.0, 0.0).unwrap(), zeros(2));
        let s1 = DMatrix::from_element(1, 1, 0.7);
        for &(t, s) in &[(0.3, 1.1), (2.0, 0.5)] {
            let r = r_fbm_matrix(1.0, &s1, t, s).unwrap()[(0, 0)];
            assert!((r - 2.0 * 0.7 * f64::min(t, s)).abs() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn r_identities_random(
            v in proptest::collection::vec(-1.0f64..1.0, 4),
            a in 0.1f64..2.0,
            t in -3.0f64..3.0,
            s in -3.0f64..3.0,
        ) {
            let v = DMatrix::from_row_slice(2, 2, &v);
            let rts = r_fbm_matrix(a, &v, t, s).unwrap();
            let rst = r_fbm_matrix(a, &v, s, t).unwrap();
            proptest::prop_assert!((&rts - rst.transpose()).amax() < 1e-12);
            let rtt = r_fbm_matrix(a, &v, t, t).unwrap();
            // S(t) + S(-t) = |t|^a (V + V^T)
            proptest::prop_assert!((&rtt - (&v + v.transpose()) * t.abs().powf(a)).amax() < 1e-12);
            // R(t, t) = 2 S(t) once V is symmetric
            let sym = (&v + v.transpose()) * 0.5;
            let rtt = r_fbm_matrix(a, &sym, t, t).unwrap();
            proptest::prop_assert!((rtt - s_matrix(a, &sym, t).unwrap() * 2.0).amax() < 1e-12);
        }
    }

    #[test]
    fn stationary_exponential_example() {
        let m = CovModel::stationary(Correlation::pow_exp(1.0, 1.0), 1.0, 1.0, 1.0).unwrap();
        let e = build_stationary_dc_model(&m).unwrap();
        let em1 = (-1.0f64).exp();
        assert!((e.a2[0][(0, 1)] - em1).abs() < 1e-15);
        assert!((e.sigma.get(0, 1) + em1).abs() < 1e-15);
        assert_eq!(e.a5[0], mat(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(e.a2[1], e.a2[0].transpose());
    }

    #[test]
    fn stationary_swap_symmetry() {
        let m = CovModel::stationary(Correlation::pow_exp(0.7, 1.5), 1.3, 1.2, 0.8).unwrap();
        let sw = CovModel { a: m.b, b: m.a, ..m.clone() };
        let e = build_stationary_dc_model(&m).unwrap();
        let f = build_stationary_dc_model(&sw).unwrap();
        let p = mat(&[0.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(&p * &e.a2[0] * &p, f.a2[1].clone(), epsilon = 1e-15);
        assert_abs_diff_eq!(&p * &e.a5[0] * &p, f.a5[1].clone(), epsilon = 1e-15);
        assert_eq!(e.b, vec![f.b[1], f.b[0]]);
    }

    #[test]
    fn stationary_model_rejections() {
        assert!(CovModel::stationary(Correlation::pow_exp(1.0, 2.5), 1.0, 1.0, 1.0).is_err());
        let m = CovModel::stationary(Correlation::polynomial(1.0, 1.0), 1.0, 1.0, 1.0);
        assert!(m.is_err(), "rho(T) = 0 is not positive");
        let flat = Correlation::Custom {
            rho: Arc::new(|t: f64| if t < 0.5 { 1.0 - t } else { 0.5 }),
            derivative: None,
            theta: 1.0,
            alpha: Exponent::from_f64(1.0),
            label: "flat tail".into(),
        };
        assert!(CovModel::stationary(flat, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn derive_stationary_closed_forms() {
        // rho(T) = 0.5, rho'(T) = -0.5 with theta = 1: rho(t) = exp(-t ln 2) at T = 1 has
        // rho'(1) = -ln2/2, so use a custom kernel with the stated derivative instead.
        let corr = Correlation::Custom {
            rho: Arc::new(|t: f64| (-std::f64::consts::LN_2 * t).exp()),
            derivative: Some(Arc::new(|_t: f64| -0.5)),
            theta: 1.0,
            alpha: Exponent::from_f64(1.0),
            label: "rho(T)=0.5".into(),
        };
        let m = CovModel::stationary(corr, 1.0, 1.0, 1.0).unwrap();
        let dd = derive(&build_stationary_dc_model(&m).unwrap()).unwrap();
        assert!((dd.w[0] - 2.0).abs() < 1e-14 && (dd.w[1] - 2.0).abs() < 1e-14);
        assert!((dd.xi[0] - 2.0).abs() < 1e-14 && (dd.xi[1] - 2.0).abs() < 1e-14);
        assert!((dd.varkappa[0] - 4.0).abs() < 1e-14 && (dd.varkappa[1] - 4.0).abs() < 1e-14);
        assert_eq!(dd.sets.boundary, vec![0, 1]);
        assert!(dd.sets.coupled.is_empty());
        assert_eq!(dd.zeta, 0.0);
        assert!(dd.checks.iter().all(|c| c.passed));
    }

    #[test]
    fn derive_fbm_exponents() {
        let lo = derive(&build_fbm_dc_model(&CovModel::fbm(0.25, 1.0, 1.0, 1.0).unwrap()).unwrap()).unwrap();
        assert_eq!(lo.sets.pickands, vec![0, 1]);
        assert!((lo.zeta - 5.0).abs() < 1e-12);
        assert!((lo.zeta - (2.0 / 0.25 - 3.0)).abs() < 1e-12);
        let hi = derive(&build_fbm_dc_model(&CovModel::fbm(0.75, 1.0, 1.0, 1.0).unwrap()).unwrap()).unwrap();
        assert_eq!(hi.sets.pickands, vec![1]);
        assert_eq!(hi.sets.drift, vec![0]);
        assert!((hi.zeta - 1.0 / 3.0).abs() < 1e-12);
        assert!((hi.zeta - (1.0 / 0.75 - 1.0)).abs() < 1e-12);
        let mid = derive(&build_fbm_dc_model(&CovModel::fbm(0.5, 1.0, 1.0, 1.0).unwrap()).unwrap()).unwrap();
        assert_eq!(mid.sets.boundary, vec![0]);
        assert_eq!(mid.sets.pickands, vec![1]);
        assert_eq!(mid.sets.coupled, vec![1]);
        assert!((mid.zeta - 1.0).abs() < 1e-12);
        for dd in [&lo, &mid, &hi] {
            assert!(dd.checks.iter().all(|c| c.passed), "{:?}", dd.checks);
        }
    }

    #[test]
    fn fbm_half_builder_values() {
        let e = build_fbm_dc_model(&CovModel::fbm(0.5, 1.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((e.t_star[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.a5[0], mat(&[0.5, 0.0, 0.0, 0.0]));
        assert_eq!(e.a2[1], zeros(2));
        let dd = derive(&e).unwrap();
        assert!((dd.w[0] - 3.0).abs() < 1e-9 && (dd.w[1] - 6.0).abs() < 1e-9);
        assert!((dd.xi[0] - 4.5).abs() < 1e-9);
        // Xi_22 = w^T A12 Sigma^{-1} A12^T w = 40.5
        assert!((dd.xi_matrix[(1, 1)] - 40.5).abs() < 1e-8);
        assert!(build_fbm_dc_model(&CovModel::fbm(0.5, 1.0, 0.5, 1.0).unwrap()).is_err());
    }

    #[test]
    fn fbm_a12_annihilates_w() {
        for &h in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            for &(a, b) in &[(1.0, 1.0), (2.0, 1.0), (1.0, 0.3)] {
                let m = CovModel::fbm(h, 1.7, a, b).unwrap();
                let e = build_fbm_dc_model(&m).unwrap();
                let dd = derive(&e).unwrap();
                let w = DVector::from_column_slice(&dd.w);
                assert!((&e.a1[1] * w).amax() < 1e-8 * (1.0 + dd.w[1]), "H={h} a={a} b={b}");
            }
        }
    }

    #[test]
    fn expansion_probes() {
        let exact = CovModel::stationary(Correlation::polynomial(1.0, 1.0), 0.5, 1.0, 1.0).unwrap();
        let e = build_stationary_dc_model(&exact).unwrap();
        let rep = verify_expansion(&exact, &e, &ExpansionProbe::default()).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.ratios[2] < 1e-10);
        assert_eq!(expansion_residual(&exact, &e, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);

        let bm = CovModel::fbm(0.5, 1.0, 1.0, 1.0).unwrap();
        let e = build_fbm_dc_model(&bm).unwrap();
        let rep = verify_expansion(&bm, &e, &ExpansionProbe::default()).unwrap();
        assert!(rep.pass, "{rep:?}");

        for &h in &[0.3, 0.7] {
            let m = CovModel::fbm(h, 1.0, 1.0, 0.8).unwrap();
            let e = build_fbm_dc_model(&m).unwrap();
            let rep = verify_expansion(&m, &e, &ExpansionProbe::default()).unwrap();
            assert!(rep.pass, "H={h}: {rep:?}");
            assert!(rep.ratios[0] > rep.ratios[1] && rep.ratios[1] > rep.ratios[2], "H={h}: {rep:?}");
        }
        let ou = CovModel::stationary(Correlation::pow_exp(1.0, 1.0), 1.0, 1.0, 1.0).unwrap();
        let e = build_stationary_dc_model(&ou).unwrap();
        assert!(verify_expansion(&ou, &e, &ExpansionProbe::default()).unwrap().pass);
    }

    #[test]
    fn xi_finite_difference_stationary() {
        let m = CovModel::stationary(Correlation::pow_exp(1.0, 1.5), 1.0, 1.0, 1.0).unwrap();
        let e = build_stationary_dc_model(&m).unwrap();
        let dd = derive(&e).unwrap();
        let fd = xi_finite_difference(&m, &e, 1e-3).unwrap();
        for i in 0..2 {
            assert!((fd[(i, i)] / dd.xi_matrix[(i, i)] - 1.0).abs() < 0.05);
            assert!((dd.xi_matrix[(i, i)] - 2.0 * dd.xi[i]).abs() < 1e-12);
        }
        assert!(fd[(0, 1)].abs() < 0.05 * dd.xi_matrix[(0, 0)]);
    }

    #[test]
    fn serde_round_trip() {
        let e = build_fbm_dc_model(&CovModel::fbm(0.5, 1.0, 1.0, 1.0).unwrap()).unwrap();
        let js = serde_json::to_string(&e).unwrap();
        assert!(js.contains("\"1/2\"") || js.contains("\"1\""));
        let back: ExpansionData = serde_json::from_str(&js).unwrap();
        assert_eq!(back.a1[1], e.a1[1]);
        let dd = derive(&back).unwrap();
        let js = serde_json::to_string(&dd).unwrap();
        let dd2: DerivedData = serde_json::from_str(&js).unwrap();
        assert_eq!(dd2.xi_matrix, dd.xi_matrix);
        let m = CovModel::stationary(Correlation::pow_exp(1.0, 1.5), 1.0, 1.0, 1.0).unwrap();
        let js = serde_json::to_string(&m).unwrap();
        let back: CovModel = serde_json::from_str(&js).unwrap();
        assert_eq!(back.kernel(0.0, 0.3), m.kernel(0.0, 0.3));
    }
}
