//! The quadratic programming problem `min x^T Sigma^{-1} x` subject to `x >= b`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, is_positive_definite, JitterPolicy, SymMatrix};

/// Largest dimension accepted by the enumeration solver.
pub const MAX_DIM: usize = 20;
/// Above this dimension the solver logs a combinatorial-cost warning and stops scanning
/// for competing active sets.
pub const SCAN_DIM: usize = 12;
/// Slack on `b_tilde_J >= b_J`.
pub const FEASIBILITY_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QppProblem {
    pub sigma: SymMatrix,
    pub b: Vec<f64>,
}

impl QppProblem {
    pub fn new(sigma: SymMatrix, b: Vec<f64>) -> Result<Self> {
        if sigma.dim() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "sigma is {0}x{0} but b has length {1}",
                sigma.dim(),
                b.len()
            )));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("b has non-finite entries".into()));
        }
        if !b.iter().any(|&x| x > 0.0) {
            return Err(Error::InfeasibleInput("b lies in the nonpositive orthant".into()));
        }
        if !is_positive_definite(sigma.matrix()) {
            return Err(Error::SingularMatrix("sigma is not positive definite".into()));
        }
        Ok(QppProblem { sigma, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QppSolution {
    pub b_tilde: Vec<f64>,
    /// Active coordinates `I` (0-based, increasing).
    pub active_set: Vec<usize>,
    /// Complement `J`.
    pub inactive_set: Vec<usize>,
    pub w: Vec<f64>,
    pub value: f64,
    /// More than one candidate set passed the certificate.
    pub ambiguous: bool,
}

/// Candidate check: returns `(w, b_tilde, value)` when `set` passes the KKT certificate.
fn certify(sigma: &DMatrix<f64>, b: &[f64], set: &[usize]) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let d = b.len();
    let sii = DMatrix::from_fn(set.len(), set.len(), |i, j| sigma[(set[i], set[j])]);
    let fac = cholesky_psd(&sii, JitterPolicy::none()).ok()?;
    let bi = DVector::from_iterator(set.len(), set.iter().map(|&i| b[i]));
    let wi = fac.solve(&bi);
    if wi.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    let mut w = vec![0.0; d];
    for (k, &i) in set.iter().enumerate() {
        w[i] = wi[k];
    }
    let mut bt = vec![0.0; d];
    for j in 0..d {
        if set.contains(&j) {
            bt[j] = b[j];
        } else {
            let v: f64 = set.iter().enumerate().map(|(k, &i)| sigma[(j, i)] * wi[k]).sum();
            if v < b[j] - FEASIBILITY_SLACK {
                return None;
            }
            bt[j] = v;
        }
    }
    let value = bi.dot(&wi);
    Some((w, bt, value))
}

/// Subsets of `0..d` of size `k` in lexicographic order.
fn combinations(d: usize, k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            if d - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, d, k, cur, out);
            cur.pop();
        }
    }
    rec(0, d, k, &mut Vec::new(), out);
}

/// Enumerates active sets by increasing cardinality, then lexicographically, and returns
/// the first one passing the KKT certificate.
pub fn solve_qpp(p: &QppProblem) -> Result<QppSolution> {
    let d = p.dim();
    if d > MAX_DIM {
        return Err(Error::DimensionUnsupported(format!("dimension {d} exceeds the cap {MAX_DIM}")));
    }
    if d > SCAN_DIM {
        log::warn!("qpp: dimension {d} > {SCAN_DIM}, enumeration cost grows as 2^d");
    }
    if !p.b.iter().any(|&x| x > 0.0) {
        return Err(Error::InfeasibleInput("b lies in the nonpositive orthant".into()));
    }
    let sigma = p.sigma.matrix();
    let scan_all = d <= SCAN_DIM;
    let mut found: Option<(Vec<usize>, Vec<f64>, Vec<f64>, f64)> = None;
    let mut passes = 0usize;
    for k in 1..=d {
        let mut sets = Vec::new();
        combinations(d, k, &mut sets);
        for set in sets {
            if let Some((w, bt, value)) = certify(sigma, &p.b, &set) {
                passes += 1;
                if found.is_none() {
                    found = Some((set, w, bt, value));
                }
                if !scan_all {
                    break;
                }
            }
        }
        if found.is_some() && !scan_all {
            break;
        }
    }
    let (active, w, b_tilde, value) =
        found.ok_or_else(|| Error::NumericalFailure("no active set passed the KKT certificate".into()))?;
    let inactive = (0..d).filter(|i| !active.contains(i)).collect();
    Ok(QppSolution { b_tilde, active_set: active, inactive_set: inactive, w, value, ambiguous: passes > 1 })
}

/// Generalized variance `sigma_b^{-2}(t) = min_{x >= b} x^T Sigma(t)^{-1} x`.
pub fn generalized_variance(sigma_t: &SymMatrix, b: &[f64]) -> Result<(f64, QppSolution)> {
    if sigma_t.dim() != b.len() {
        return Err(Error::DimensionMismatch("sigma and b sizes differ".into()));
    }
    if !is_positive_definite(sigma_t.matrix()) {
        return Err(Error::SingularMatrix("covariance is not positive definite".into()));
    }
    let sol = solve_qpp(&QppProblem::new(sigma_t.clone(), b.to_vec())?)?;
    Ok((sol.value, sol))
}

/// `(w^T b)^2 / (w^T Sigma w)`.
pub fn max_quotient(sigma: &SymMatrix, b: &[f64], w: &[f64]) -> f64 {
    let wv = DVector::from_column_slice(w);
    let wb: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
    wb * wb / (wv.transpose() * sigma.matrix() * &wv)[(0, 0)]
}

/// Re-checks the KKT certificate on a returned solution.
pub fn check_certificate(p: &QppProblem, s: &QppSolution) -> std::result::Result<(), String> {
    let d = p.dim();
    let sigma = p.sigma.matrix();
    for &i in &s.active_set {
        if !(s.w[i] > 0.0) {
            return Err(format!("w[{i}] = {} is not positive", s.w[i]));
        }
        if s.b_tilde[i] != p.b[i] {
            return Err(format!("b_tilde[{i}] differs from b[{i}]"));
        }
    }
    for &j in &s.inactive_set {
        if s.w[j] != 0.0 {
            return Err(format!("w[{j}] is not exactly zero"));
        }
        if s.b_tilde[j] < p.b[j] - FEASIBILITY_SLACK {
            return Err(format!("b_tilde[{j}] = {} below b[{j}] = {}", s.b_tilde[j], p.b[j]));
        }
    }
    // b_tilde = Sigma w
    for r in 0..d {
        let v: f64 = (0..d).map(|c| sigma[(r, c)] * s.w[c]).sum();
        if (v - s.b_tilde[r]).abs() > 1e-9 * (1.0 + v.abs()) {
            return Err(format!("b_tilde[{r}] != (Sigma w)[{r}]"));
        }
    }
    let idx = &s.active_set;
    let sii = p.sigma.principal(idx);
    let fac = cholesky_psd(sii.matrix(), JitterPolicy::none()).map_err(|e| e.to_string())?;
    let bi = DVector::from_iterator(idx.len(), idx.iter().map(|&i| p.b[i]));
    let direct = bi.dot(&fac.solve(&bi));
    if (direct - s.value).abs() > 1e-10 * direct.abs() {
        return Err(format!("value {} differs from b_I^T Sigma_II^-1 b_I = {direct}", s.value));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_instance() {
        let p = QppProblem::new(SymMatrix::identity(2), vec![1.0, 1.0]).unwrap();
        let s = solve_qpp(&p).unwrap();
        assert_eq!(s.active_set, vec![0, 1]);
        assert_eq!(s.w, vec![1.0, 1.0]);
        assert!((s.value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn negative_correlation_instance() {
        let p = QppProblem::new(sym(&[&[1.0, -0.5], &[-0.5, 1.0]]), vec![1.0, 1.0]).unwrap();
        let s = solve_qpp(&p).unwrap();
        assert_eq!(s.active_set, vec![0, 1]);
        assert!((s.w[0] - 2.0).abs() < 1e-14 && (s.w[1] - 2.0).abs() < 1e-14);
        assert!((s.value - 4.0).abs() < 1e-14);
    }

    #[test]
    fn dimension_reduction_instance() {
        let p = QppProblem::new(sym(&[&[1.0, 0.9], &[0.9, 1.0]]), vec![1.0, 0.0]).unwrap();
        let s = solve_qpp(&p).unwrap();
        assert_eq!(s.active_set, vec![0]);
        assert_eq!(s.inactive_set, vec![1]);
        assert_eq!(s.w, vec![1.0, 0.0]);
        assert!((s.b_tilde[1] - 0.9).abs() < 1e-15);
        assert!((s.value - 1.0).abs() < 1e-15);
        assert!(!s.ambiguous);
    }

    #[test]
    fn infeasible_and_singular() {
        assert!(matches!(QppProblem::new(SymMatrix::identity(2), vec![-1.0, 0.0]), Err(Error::InfeasibleInput(_))));
        let r = generalized_variance(&sym(&[&[1.0, 1.0], &[1.0, 1.0]]), &[1.0, 1.0]);
        assert!(matches!(r, Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn generalized_variance_examples() {
        let (v, _) = generalized_variance(&SymMatrix::identity(2), &[1.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        // (a^2 + 2ab rho + b^2)/(1 - rho^2) with rho = 0.5 and sign-flipped second component
        let (v, _) = generalized_variance(&sym(&[&[1.0, -0.5], &[-0.5, 1.0]]), &[1.0, 1.0]).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
        let s = sym(&[&[2.0, 0.3], &[0.3, 0.7]]);
        let (v1, _) = generalized_variance(&s, &[0.4, 1.0]).unwrap();
        let (v3, _) = generalized_variance(&s.scaled(3.0), &[0.4, 1.0]).unwrap();
        assert!((v3 - v1 / 3.0).abs() < 1e-14);
    }

    fn random_pd(d: usize, e: &[f64]) -> SymMatrix {
        let g = DMatrix::from_fn(d, d, |i, j| e[i * d + j]);
        SymMatrix::new(&g * g.transpose() + DMatrix::identity(d, d) * 0.3).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn certificate_uniqueness_and_quotient(d in 2usize..=4, e in prop::collection::vec(-1.0f64..1.0, 16),
                                               b in prop::collection::vec(-1.0f64..2.0, 4), pos in 0usize..4) {
            let sigma = random_pd(d, &e);
            let mut b: Vec<f64> = b[..d].to_vec();
            b[pos % d] = b[pos % d].abs() + 0.1;
            let p = QppProblem::new(sigma.clone(), b.clone()).unwrap();
            let s = solve_qpp(&p).unwrap();
            prop_assert!(check_certificate(&p, &s).is_ok());
            prop_assert!(!s.ambiguous);
            let q = max_quotient(&sigma, &b, &s.w);
            prop_assert!((q - s.value).abs() <= 1e-8 * (1.0 + s.value));
        }
    }
}
