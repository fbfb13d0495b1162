//! Dense symmetric linear algebra and subspace geometry.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Two newtypes carry the
//! invariants the estimators rely on:
//!
//! * [`SymmetricMatrix`] is exactly symmetric (entries mirrored at construction).
//! * [`OrthonormalBasis`] has `QᵀQ = I` to within [`ORTHONORMAL_TOL`].
//!
//! Eigenvectors follow a fixed sign convention: the entry with the largest
//! absolute value is positive, ties going to the lowest row index. This makes
//! every decomposition reproducible bit for bit on a given platform.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Maximum entry of `|QᵀQ - I|` accepted for an orthonormal basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Relative eigengap below which a leading block is flagged as degenerate.
pub const DEGENERACY_REL_GAP: f64 = 1e-12;

const SYMMETRY_REL_TOL: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 100_000;

/// Normalisation used by [`sample_covariance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceScale {
    /// `XᵀX / T`
    #[default]
    PerTime,
    /// `XᵀX / (N T)`
    PerTimeAndDim,
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// A square matrix stored with exact symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    inner: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Accepts a square finite matrix that is symmetric up to rounding and
    /// stores its symmetric part.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        ensure_finite(&m, "symmetric matrix")?;
        let scale = max_abs(&m).max(1.0);
        let asym = (&m - m.transpose()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if asym > SYMMETRY_REL_TOL * scale {
            return Err(Error::Numeric(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetric part `(A + Aᵀ)/2`; the caller guarantees a square matrix.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        debug_assert_eq!(n, m.ncols());
        let inner = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        Self { inner }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        let n = d.len();
        let m = DMatrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 });
        ensure_finite(&m, "diagonal")?;
        Ok(Self { inner: m })
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.inner)
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    /// Quadratic form `vᵀ A v` for column `v`.
    pub fn quadratic_form(&self, v: &DMatrix<f64>) -> f64 {
        debug_assert_eq!(v.ncols(), 1);
        (v.transpose() * &self.inner * v)[(0, 0)]
    }

    /// `A + δ I`.
    pub fn add_ridge(&self, delta: f64) -> Self {
        let mut inner = self.inner.clone();
        for i in 0..inner.nrows() {
            inner[(i, i)] += delta;
        }
        Self { inner }
    }
}

/// Column-orthonormal `N × m` matrix representing a linear subspace of `ℝᴺ`.
///
/// A rank-zero basis (`N × 0`) is allowed and represents the trivial subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    /// Validates orthonormality to [`ORTHONORMAL_TOL`].
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        ensure_finite(&columns, "orthonormal basis")?;
        if columns.ncols() > columns.nrows() {
            return Err(Error::dim(format!(
                "basis has {} columns in ambient dimension {}",
                columns.ncols(),
                columns.nrows()
            )));
        }
        let err = orthonormality_error(&columns);
        if err > ORTHONORMAL_TOL {
            return Err(Error::Numeric(format!(
                "columns are not orthonormal (max |QᵀQ - I| = {err:e})"
            )));
        }
        Ok(Self { columns })
    }

    /// Orthonormalises the columns of `m` with a Householder QR, fixing the
    /// signs so that `R` has a positive diagonal. Fails when `m` is
    /// numerically rank deficient.
    pub fn from_qr(m: DMatrix<f64>) -> Result<Self> {
        ensure_finite(&m, "matrix to orthonormalise")?;
        let (n, k) = m.shape();
        if k > n {
            return Err(Error::dim(format!("cannot orthonormalise {k} columns in ℝ^{n}")));
        }
        if k == 0 {
            return Ok(Self::empty(n));
        }
        let col_scale = m
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0_f64, f64::max);
        let qr = m.qr();
        let r = qr.r();
        let mut q = qr.q();
        for j in 0..k {
            let rjj = r[(j, j)];
            if rjj.abs() <= 1e-12 * col_scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Numeric("matrix is rank deficient".into()));
            }
            if rjj < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Ok(Self { columns: q })
    }

    /// The trivial subspace of `ℝⁿ`.
    pub fn empty(n: usize) -> Self {
        Self {
            columns: DMatrix::zeros(n, 0),
        }
    }

    /// The first `m` standard basis vectors.
    pub fn standard(n: usize, m: usize) -> Result<Self> {
        if m > n {
            return Err(Error::dim(format!("{m} standard vectors in ℝ^{n}")));
        }
        Ok(Self {
            columns: DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 }),
        })
    }

    pub(crate) fn from_trusted(columns: DMatrix<f64>) -> Self {
        debug_assert!(orthonormality_error(&columns) <= 1e-8);
        Self { columns }
    }

    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.columns
    }

    /// `max |QᵀQ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.columns)
    }

    /// Basis formed by the listed columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rank()) {
            return Err(Error::dim(format!("column {bad} out of range for rank {}", self.rank())));
        }
        let mut seen = vec![false; self.rank()];
        for &i in idx {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::dim(format!("column {i} selected twice")));
            }
        }
        let n = self.ambient_dim();
        Ok(Self {
            columns: DMatrix::from_fn(n, idx.len(), |r, c| self.columns[(r, idx[c])]),
        })
    }

    /// Column-wise concatenation `[self, other]`; the result must still be
    /// orthonormal.
    pub fn concat(&self, other: &OrthonormalBasis) -> Result<Self> {
        if self.ambient_dim() != other.ambient_dim() {
            return Err(Error::dim("cannot concatenate bases of different ambient dimension"));
        }
        let n = self.ambient_dim();
        let (a, b) = (self.rank(), other.rank());
        let m = DMatrix::from_fn(n, a + b, |r, c| {
            if c < a {
                self.columns[(r, c)]
            } else {
                other.columns[(r, c - a)]
            }
        });
        Self::new(m)
    }

    /// Projects `m` onto the orthogonal complement of this subspace:
    /// `(I - QQᵀ) m`.
    pub fn project_out(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.rank() == 0 {
            return m.clone();
        }
        m - &self.columns * (self.columns.transpose() * m)
    }

    /// Applies the eigenvector sign convention column by column.
    pub fn with_sign_convention(mut self) -> Self {
        normalize_signs(&mut self.columns);
        self
    }
}

fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.tr_mul(q);
    let k = g.nrows();
    let mut worst = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Flips each column so that its largest-magnitude entry is positive; among
/// magnitudes equal to within a relative `1e-10` the lowest row index decides.
pub fn normalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let top = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if top == 0.0 {
            continue;
        }
        let cutoff = top * (1.0 - 1e-10);
        let pivot = col.iter().position(|v| v.abs() >= cutoff).unwrap_or(0);
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenvalues in non-increasing order with matching orthonormal vectors.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: OrthonormalBasis,
}

/// Leading eigenvectors together with the degeneracy diagnostic.
#[derive(Debug, Clone)]
pub struct LeadingEigenvectors {
    pub basis: OrthonormalBasis,
    pub values: Vec<f64>,
    /// Set when `λ_m - λ_{m+1} ≤ 1e-12 · λ₁`: the returned span is then not
    /// unique.
    pub degenerate: bool,
}

impl EigenPairs {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Columns `start..end` of the eigenvector matrix.
    pub fn block(&self, start: usize, end: usize) -> Result<OrthonormalBasis> {
        if start > end || end > self.dim() {
            return Err(Error::dim(format!(
                "eigenvector block {start}..{end} out of range for dimension {}",
                self.dim()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.vectors.select_columns(&idx)
    }

    /// The leading `m` eigenvectors.
    pub fn leading(&self, m: usize) -> Result<LeadingEigenvectors> {
        if m == 0 || m > self.dim() {
            return Err(Error::dim(format!(
                "requested {m} leading eigenvectors of a {}-dimensional matrix",
                self.dim()
            )));
        }
        let basis = self.block(0, m)?;
        let degenerate = is_degenerate(&self.values, m);
        if degenerate {
            log::warn!("eigenvalues {m} and {} coincide; leading subspace is not unique", m + 1);
        }
        Ok(LeadingEigenvectors {
            basis,
            values: self.values[..m].to_vec(),
            degenerate,
        })
    }
}

fn is_degenerate(values: &[f64], m: usize) -> bool {
    if m >= values.len() {
        return false;
    }
    let top = values[0].abs();
    values[m - 1] - values[m] <= DEGENERACY_REL_GAP * top
}

/// `XᵀX / T` or `XᵀX / (N T)` for a `T × N` panel.
pub fn sample_covariance(x: &DMatrix<f64>, scale: CovarianceScale) -> Result<SymmetricMatrix> {
    let (t, n) = x.shape();
    if t == 0 || n == 0 {
        return Err(Error::dim(format!("sample covariance of an empty {t}x{n} matrix")));
    }
    ensure_finite(x, "data matrix")?;
    let denom = match scale {
        CovarianceScale::PerTime => t as f64,
        CovarianceScale::PerTimeAndDim => (t * n) as f64,
    };
    Ok(SymmetricMatrix::symmetrize(x.tr_mul(x) / denom))
}

/// Full eigendecomposition with values sorted descending and the sign
/// convention applied.
pub fn symmetric_eig(s: &SymmetricMatrix) -> Result<EigenPairs> {
    ensure_finite(s.as_matrix(), "symmetric matrix")?;
    let n = s.dim();
    if n == 0 {
        return Ok(EigenPairs {
            values: Vec::new(),
            vectors: OrthonormalBasis::empty(0),
        });
    }
    let eig = SymmetricEigen::try_new(s.as_matrix().clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    normalize_signs(&mut vectors);
    Ok(EigenPairs {
        values,
        vectors: OrthonormalBasis::from_trusted(vectors),
    })
}

/// The leading `m` eigenvectors of `s`.
pub fn leading_eigenvectors(s: &SymmetricMatrix, m: usize) -> Result<LeadingEigenvectors> {
    if m == 0 || m > s.dim() {
        return Err(Error::dim(format!(
            "requested {m} leading eigenvectors of a {}-dimensional matrix",
            s.dim()
        )));
    }
    symmetric_eig(s)?.leading(m)
}

/// Leading `m` eigenvectors of `BBᵀ` computed from the small Gram matrix
/// `BᵀB`. Used when `B` has far fewer columns than rows; falls back to the
/// full decomposition when the Gram route cannot resolve `m` directions.
pub fn leading_eigenvectors_of_outer(b: &DMatrix<f64>, m: usize) -> Result<LeadingEigenvectors> {
    let (n, k) = b.shape();
    if m == 0 || m > n {
        return Err(Error::dim(format!("requested {m} leading eigenvectors in ℝ^{n}")));
    }
    ensure_finite(b, "outer-product factor")?;
    if m > k || k >= n {
        return leading_eigenvectors(&SymmetricMatrix::symmetrize(b * b.transpose()), m);
    }
    let gram = symmetric_eig(&SymmetricMatrix::symmetrize(b.tr_mul(b)))?;
    let top = gram.values[0].max(0.0);
    if gram.values[m - 1] <= 1e-10 * top || top == 0.0 {
        return leading_eigenvectors(&SymmetricMatrix::symmetrize(b * b.transpose()), m);
    }
    let v = gram.block(0, m)?;
    let mut u = b * v.matrix();
    for (j, mut col) in u.column_iter_mut().enumerate() {
        col /= gram.values[j].sqrt();
    }
    let basis = OrthonormalBasis::from_qr(u)?.with_sign_convention();
    let mut padded = gram.values.clone();
    padded.resize(n.max(k), 0.0);
    let degenerate = is_degenerate(&padded, m);
    Ok(LeadingEigenvectors {
        basis,
        values: gram.values[..m].to_vec(),
        degenerate,
    })
}

/// Orthogonal projector `QQᵀ`.
pub fn projection(q: &OrthonormalBasis) -> SymmetricMatrix {
    let m = q.matrix();
    SymmetricMatrix::symmetrize(m * m.transpose())
}

/// `tr(P₁P₂) = ‖Q₁ᵀQ₂‖²_F`.
pub fn trace_overlap(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<f64> {
    if q1.ambient_dim() != q2.ambient_dim() {
        return Err(Error::dim(format!(
            "trace overlap of bases in ℝ^{} and ℝ^{}",
            q1.ambient_dim(),
            q2.ambient_dim()
        )));
    }
    Ok(q1.matrix().tr_mul(q2.matrix()).norm_squared())
}

/// Distance between subspaces, `sqrt(1 - tr(P₁P₂)/min(p₁, p₂))`, in `[0, 1]`.
///
/// Zero when one span contains the other, one when they are orthogonal.
pub fn subspace_distance(o1: &OrthonormalBasis, o2: &OrthonormalBasis) -> Result<f64> {
    let overlap = trace_overlap(o1, o2)?;
    let p = o1.rank().min(o2.rank());
    if p == 0 {
        return Err(Error::dim("subspace distance to the trivial subspace is undefined"));
    }
    Ok((1.0 - overlap / p as f64).clamp(0.0, 1.0).sqrt())
}
