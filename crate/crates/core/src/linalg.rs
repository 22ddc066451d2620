//! Dense symmetric matrices, guarded Cholesky and block factorizations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense symmetric matrix. Storage is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Accepts a square matrix whose asymmetry is within `1e-12` relative to its
    /// largest entry and stores the symmetrized average.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty matrix".into()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Domain(format!("matrix is not symmetric (max asymmetry {asym:e})")));
        }
        let m = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix { m })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("rows of unequal length or non-square".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix { m: DMatrix::identity(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        SymMatrix { m: &self.m * c }
    }

    /// Principal submatrix on the given indices.
    pub fn principal(&self, idx: &[usize]) -> Self {
        SymMatrix { m: DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.m[(idx[i], idx[j])]) }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        row_major(&self.m)
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub(crate) fn from_row_major(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        SymMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Row-major serde helpers for plain `DMatrix<f64>` fields.
pub mod matrix_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        row_major(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_row_major(&rows).map_err(serde::de::Error::custom)
    }
}

/// Row-major serde helpers for `Vec<DMatrix<f64>>`.
pub mod matrices_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
        m.iter().map(row_major).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<DMatrix<f64>>, D::Error> {
        let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        raw.iter().map(|r| from_row_major(r).map_err(serde::de::Error::custom)).collect()
    }
}

/// Row-major serde helpers for `Vec<Vec<DMatrix<f64>>>`.
pub mod matrix_table_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[Vec<DMatrix<f64>>], s: S) -> std::result::Result<S::Ok, S::Error> {
        m.iter().map(|row| row.iter().map(row_major).collect::<Vec<_>>()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<DMatrix<f64>>>, D::Error> {
        let raw = Vec::<Vec<Vec<Vec<f64>>>>::deserialize(d)?;
        raw.iter()
            .map(|row| row.iter().map(|r| from_row_major(r).map_err(serde::de::Error::custom)).collect())
            .collect()
    }
}

/// Jitter escalation: try `0`, then `base_jitter * 10^k` for `k < max_attempts`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub max_attempts: u32,
    pub base_jitter: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { max_attempts: 6, base_jitter: 1e-12 }
    }
}

impl JitterPolicy {
    pub fn none() -> Self {
        JitterPolicy { max_attempts: 0, base_jitter: 0.0 }
    }
}

/// Lower-triangular factor with the diagonal shift that made it succeed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero diagonal");
        self.l.transpose().solve_upper_triangular(&y).expect("nonzero diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        (&inv + inv.transpose()) * 0.5
    }
}

fn plain_cholesky(m: &DMatrix<f64>, shift: f64) -> std::result::Result<DMatrix<f64>, usize> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factorization with escalating diagonal jitter.
pub fn cholesky_psd(m: &DMatrix<f64>, policy: JitterPolicy) -> Result<CholeskyFactor> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::DimensionMismatch("empty matrix".into()));
    }
    let mut last = (0, 0.0);
    for attempt in 0..=policy.max_attempts {
        let jitter = if attempt == 0 { 0.0 } else { policy.base_jitter * 10f64.powi(attempt as i32 - 1) };
        match plain_cholesky(m, jitter) {
            Ok(l) => return Ok(CholeskyFactor { l, jitter }),
            Err(p) => last = (p, jitter),
        }
    }
    Err(Error::NotPsd { pivot: last.0, jitter: last.1 })
}

/// Cholesky of a positive semidefinite matrix allowing zero pivots: columns whose
/// pivot falls below `tol * max_diag` are set to zero.
pub fn cholesky_semidefinite(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch("cholesky needs a square matrix".into()));
    }
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let cut = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -cut || d.is_nan() {
            return Err(Error::NotPsd { pivot: j, jitter: 0.0 });
        }
        if d <= cut {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Positive definiteness check at zero jitter.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && plain_cholesky(m, 0.0).is_ok()
}

/// Symmetric block matrix `(D_{i,j})` with `d x d` blocks indexed by labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    labels: Vec<usize>,
    d: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockMatrix {
    /// Builds the block matrix from `f(i, j)` evaluated on label pairs.
    pub fn from_fn<F: FnMut(usize, usize) -> DMatrix<f64>>(labels: Vec<usize>, d: usize, mut f: F) -> Result<Self> {
        let k = labels.len();
        let mut blocks = Vec::with_capacity(k * k);
        for &li in &labels {
            for &lj in &labels {
                let b = f(li, lj);
                if b.nrows() != d || b.ncols() != d {
                    return Err(Error::DimensionMismatch(format!("block ({li},{lj}) is not {d}x{d}")));
                }
                blocks.push(b);
            }
        }
        let out = BlockMatrix { labels, d, blocks };
        for a in 0..k {
            for b in 0..k {
                let diff = (out.blocks[a * k + b].clone() - out.blocks[b * k + a].transpose()).amax();
                let scale = out.blocks[a * k + b].amax().max(1.0);
                if diff > 1e-12 * scale {
                    return Err(Error::Domain(format!(
                        "block ({},{}) is not the transpose of block ({},{})",
                        out.labels[a], out.labels[b], out.labels[b], out.labels[a]
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pos(&self, label: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Block at labels `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        let (a, b) = (self.pos(i)?, self.pos(j)?);
        Some(&self.blocks[a * self.labels.len() + b])
    }

    /// The full `(k d) x (k d)` matrix.
    pub fn flatten(&self) -> DMatrix<f64> {
        let k = self.labels.len();
        let d = self.d;
        let mut m = DMatrix::zeros(k * d, k * d);
        for a in 0..k {
            for b in 0..k {
                m.view_mut((a * d, b * d), (d, d)).copy_from(&self.blocks[a * k + b]);
            }
        }
        m
    }

    /// Restriction to a subset of labels (order follows `self`).
    pub fn restrict(&self, keep: &[usize]) -> BlockMatrix {
        let labels: Vec<usize> = self.labels.iter().copied().filter(|l| keep.contains(l)).collect();
        let k = self.labels.len();
        let mut blocks = Vec::new();
        for &li in &labels {
            for &lj in &labels {
                blocks.push(self.blocks[self.pos(li).unwrap() * k + self.pos(lj).unwrap()].clone());
            }
        }
        BlockMatrix { labels, d: self.d, blocks }
    }
}

#[derive(Serialize, Deserialize)]
struct BlockMatrixRepr {
    labels: Vec<usize>,
    d: usize,
    #[serde(with = "matrices_serde")]
    blocks: Vec<DMatrix<f64>>,
}

impl Serialize for BlockMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BlockMatrixRepr { labels: self.labels.clone(), d: self.d, blocks: self.blocks.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BlockMatrixRepr::deserialize(d)?;
        let k = r.labels.len();
        if r.blocks.len() != k * k {
            return Err(serde::de::Error::custom("block count does not match labels"));
        }
        let labels = r.labels.clone();
        BlockMatrix::from_fn(r.labels, r.d, |i, j| {
            let a = labels.iter().position(|&l| l == i).unwrap();
            let b = labels.iter().position(|&l| l == j).unwrap();
            r.blocks[a * k + b].clone()
        })
        .map_err(serde::de::Error::custom)
    }
}

/// Family `(C_{i,k})` with `D_{i,j} = sum_k C_{i,k} C_{j,k}^T`.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    pub labels: Vec<usize>,
    pub d: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockFactor {
    pub fn block(&self, i: usize, k: usize) -> Option<&DMatrix<f64>> {
        let a = self.labels.iter().position(|&l| l == i)?;
        let b = self.labels.iter().position(|&l| l == k)?;
        Some(&self.blocks[a * self.labels.len() + b])
    }

    /// `sum_k C_{i,k} C_{j,k}^T`.
    pub fn product(&self, i: usize, j: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.d);
        for &k in &self.labels {
            out += self.block(i, k).unwrap() * self.block(j, k).unwrap().transpose();
        }
        out
    }
}

/// Factorizes a positive semidefinite block matrix into the family `(C_{i,k})`.
pub fn factor_block_psd(dm: &BlockMatrix) -> Result<BlockFactor> {
    let k = dm.labels.len();
    let d = dm.d;
    if k == 0 {
        return Ok(BlockFactor { labels: vec![], d, blocks: vec![] });
    }
    let flat = dm.flatten();
    let l = cholesky_semidefinite(&flat, 1e-12)?;
    let recon = (&l * l.transpose() - &flat).norm();
    if recon > 1e-10 * (1.0 + flat.norm()) {
        return Err(Error::NotPsd { pivot: 0, jitter: 0.0 });
    }
    let mut blocks = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            blocks.push(l.view((a * d, b * d), (d, d)).into_owned());
        }
    }
    Ok(BlockFactor { labels: dm.labels.clone(), d, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_factor() {
        let f = cholesky_psd(&DMatrix::identity(2, 2), JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_abs_diff_eq!(f.l, DMatrix::identity(2, 2), epsilon = 0.0);
    }

    #[test]
    fn hand_factor() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let f = cholesky_psd(&m, JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_abs_diff_eq!(f.l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(f.reconstruct(), m, epsilon = 1e-14);
    }

    #[test]
    fn rank_one_needs_jitter() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let p = JitterPolicy::default();
        let f = cholesky_psd(&m, p).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= p.base_jitter * 10.0);
        assert!((f.reconstruct() - &m).amax() <= f.jitter + 1e-15);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_psd(&m, JitterPolicy::default()), Err(Error::NotPsd { .. })));
        let r = cholesky_psd(&DMatrix::zeros(2, 3), JitterPolicy::default());
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn sym_matrix_validation() {
        assert!(SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        let s = SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(s.get(0, 1), s.get(1, 0));
        let js = serde_json::to_string(&s).unwrap();
        assert_eq!(js, "[[1.0,0.5],[0.5,1.0]]");
        let back: SymMatrix = serde_json::from_str(&js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn block_identity() {
        let bm = BlockMatrix::from_fn(vec![1], 2, |_, _| DMatrix::identity(2, 2)).unwrap();
        let f = factor_block_psd(&bm).unwrap();
        assert_abs_diff_eq!(f.block(1, 1).unwrap().clone(), DMatrix::identity(2, 2), epsilon = 1e-15);
    }

    #[test]
    fn block_from_quadratic_form() {
        // A Sigma^{-1} A^T with Sigma = I: the single-label case
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.7, 0.4]);
        let dm = &a * a.transpose();
        let bm = BlockMatrix::from_fn(vec![2], 2, |_, _| dm.clone()).unwrap();
        let f = factor_block_psd(&bm).unwrap();
        let c = f.block(2, 2).unwrap();
        assert!((c * c.transpose() - &dm).amax() < 1e-10);
    }

    #[test]
    fn block_rank_deficient() {
        // rank-one block, as produced by a rank-one A_{1,i}
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -0.5]);
        let dm = &a * a.transpose();
        let bm = BlockMatrix::from_fn(vec![0], 2, |_, _| dm.clone()).unwrap();
        let f = factor_block_psd(&bm).unwrap();
        assert!((f.product(0, 0) - &dm).norm() < 1e-10);
    }

    #[test]
    fn block_rejects_asymmetric_and_indefinite() {
        let r = BlockMatrix::from_fn(vec![0, 1], 1, |i, j| DMatrix::from_element(1, 1, (i * 2 + j) as f64));
        assert!(r.is_err());
        let bm = BlockMatrix::from_fn(vec![0, 1], 1, |i, j| DMatrix::from_element(1, 1, if i == j { 1.0 } else { 2.0 }))
            .unwrap();
        assert!(matches!(factor_block_psd(&bm), Err(Error::NotPsd { .. })));
    }

    fn psd_from(entries: &[f64], n: usize, rank: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, rank, |i, j| entries[i * rank + j]);
        &g * g.transpose()
    }

    proptest! {
        #[test]
        fn cholesky_round_trip(n in 1usize..=8, rank_off in 0usize..3, entries in prop::collection::vec(-2.0f64..2.0, 64)) {
            let rank = n.saturating_sub(rank_off).max(1);
            let m = psd_from(&entries, n, rank);
            let f = cholesky_psd(&m, JitterPolicy { max_attempts: 12, base_jitter: 1e-12 }).unwrap();
            let tol = f.jitter + 1e-12 * (1.0 + m.amax());
            prop_assert!((f.reconstruct() - &m).amax() <= tol * 1.0001 + 1e-12);
        }

        #[test]
        fn block_round_trip(k in 1usize..=3, d in 1usize..=3, entries in prop::collection::vec(-2.0f64..2.0, 81)) {
            let n = k * d;
            let c = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
            let flat = &c * c.transpose();
            let bm = BlockMatrix::from_fn((0..k).collect(), d, |i, j| flat.view((i * d, j * d), (d, d)).into_owned()).unwrap();
            let f = factor_block_psd(&bm).unwrap();
            let mut err = 0.0;
            for i in 0..k {
                for j in 0..k {
                    err += (f.product(i, j) - bm.block(i, j).unwrap()).norm_squared();
                }
            }
            prop_assert!(err.sqrt() <= 1e-10 * (1.0 + flat.norm()));
        }
    }
}
