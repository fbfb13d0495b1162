//! Single-panel PCA, Eigenvalue-Ratio factor counting and the target-only
//! factor-strength estimator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_finite, sample_covariance, symmetric_eig, CovarianceScale, EigenPairs,
    OrthonormalBasis, SymmetricMatrix,
};

/// Upper end of the plausible strength range; estimates above it are flagged.
pub const STRENGTH_UPPER: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelRole {
    Target,
    Source,
}

/// A `T × N` panel: rows are time periods, columns are cross-sectional units.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    data: DMatrix<f64>,
    id: String,
    role: PanelRole,
    time_labels: Option<Vec<String>>,
}

impl PanelDataset {
    pub fn new(id: impl Into<String>, role: PanelRole, data: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        let (t, n) = data.shape();
        if t < 2 || n < 2 {
            return Err(Error::dim(format!(
                "panel '{id}' must have at least 2 periods and 2 units, got {t}x{n}"
            )));
        }
        ensure_finite(&data, &format!("panel '{id}'"))?;
        Ok(Self {
            data,
            id,
            role,
            time_labels: None,
        })
    }

    pub fn with_time_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.periods() {
            return Err(Error::dim(format!(
                "panel '{}' has {} rows but {} time labels",
                self.id,
                self.periods(),
                labels.len()
            )));
        }
        self.time_labels = Some(labels);
        Ok(self)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> PanelRole {
        self.role
    }

    pub fn time_labels(&self) -> Option<&[String]> {
        self.time_labels.as_deref()
    }

    /// `T_k`
    pub fn periods(&self) -> usize {
        self.data.nrows()
    }

    /// `N`
    pub fn units(&self) -> usize {
        self.data.ncols()
    }

    /// Sub-panel made of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.periods()) {
            return Err(Error::dim(format!("row {bad} out of range for panel '{}'", self.id)));
        }
        let n = self.units();
        let data = DMatrix::from_fn(rows.len(), n, |i, j| self.data[(rows[i], j)]);
        let mut sub = Self::new(self.id.clone(), self.role, data)?;
        if let Some(labels) = &self.time_labels {
            sub.time_labels = Some(rows.iter().map(|&r| labels[r].clone()).collect());
        }
        Ok(sub)
    }

    /// Contiguous rows `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(&rows)
    }

    /// `XᵀX / T`.
    pub fn covariance(&self) -> SymmetricMatrix {
        sample_covariance(&self.data, CovarianceScale::PerTime)
            .expect("panel invariants guarantee a non-empty finite matrix")
    }
}

/// Estimated factor strengths `α̂ᵢ = log(dᵢ)/log N`, sorted non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorStrengths {
    pub alphas: Vec<f64>,
    /// The diagonal entries `dᵢ` the strengths derive from (`N^α̂ᵢ`).
    pub d_values: Vec<f64>,
    /// `order[i]` is the basis column that `alphas[i]` belongs to.
    pub order: Vec<usize>,
}

impl FactorStrengths {
    /// Builds strengths from positive diagonal entries given in basis-column
    /// order; the result is sorted by decreasing strength.
    pub fn from_diagonal(d: &[f64], n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::dim("factor strengths need N ≥ 2"));
        }
        if let Some((i, v)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "diagonal entry {i} is {v}; cannot take its logarithm"
            )));
        }
        let log_n = (n as f64).ln();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap().then(a.cmp(&b)));
        Ok(Self {
            alphas: order.iter().map(|&i| d[i].ln() / log_n).collect(),
            d_values: order.iter().map(|&i| d[i]).collect(),
            order,
        })
    }

    /// Known strengths, e.g. the true values in a simulation; `d = N^α`.
    pub fn from_alphas(alphas: &[f64], n: usize) -> Result<Self> {
        let d: Vec<f64> = alphas.iter().map(|a| (n as f64).powf(*a)).collect();
        Self::from_diagonal(&d, n)
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Indices whose estimate falls outside `(0, 1.2]`.
    pub fn out_of_range(&self) -> Vec<usize> {
        self.alphas
            .iter()
            .enumerate()
            .filter(|(_, a)| !(**a > 0.0 && **a <= STRENGTH_UPPER))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of strengths strictly below `threshold`. This is a labelling
    /// convention for callers, not part of the estimator.
    pub fn weak_count(&self, threshold: f64) -> usize {
        self.alphas.iter().filter(|a| **a < threshold).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    /// Strong-factor normalisation `Λ̂ = √N Q̂`.
    Auxiliary,
    /// `Λ̂ = Q̂ M̂^{1/2}` with `M̂ = Q̂ᵀ Σ̂ Q̂`.
    Target,
}

/// PCA estimate of a single panel.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    pub basis: OrthonormalBasis,
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub num_factors: usize,
    /// Column scales: `loadings = basis · diag(scale)^{1/2}`.
    pub scale: Vec<f64>,
    pub strengths: Option<FactorStrengths>,
}

/// Fitted low-rank part `F̂Λ̂ᵀ` of a panel.
pub trait CommonComponents {
    fn common_components(&self) -> Result<DMatrix<f64>>;
}

impl CommonComponents for FactorEstimate {
    fn common_components(&self) -> Result<DMatrix<f64>> {
        if self.factors.ncols() != self.loadings.ncols() {
            return Err(Error::dim("factors and loadings disagree on the number of factors"));
        }
        Ok(&self.factors * self.loadings.transpose())
    }
}

fn check_rank(r: usize, panel: &PanelDataset) -> Result<()> {
    let cap = panel.units().min(panel.periods());
    if r == 0 || r > cap {
        return Err(Error::dim(format!(
            "number of factors {r} outside 1..={cap} for panel '{}'",
            panel.id()
        )));
    }
    Ok(())
}

/// `dᵢ = qᵢᵀ S qᵢ` for every column of `q`.
pub(crate) fn diagonal_of_compression(s: &SymmetricMatrix, q: &OrthonormalBasis) -> Vec<f64> {
    let sq = s.as_matrix() * q.matrix();
    (0..q.rank())
        .map(|j| q.matrix().column(j).dot(&sq.column(j)))
        .collect()
}

/// Principal-component estimate with `r` factors.
///
/// Loadings are `Q̂ diag(scale)^{1/2}` and factors come from regressing the
/// panel on the loadings, `F̂ = X Λ̂ diag(scale)⁻¹`.
pub fn pca_estimate(panel: &PanelDataset, r: usize, mode: PcaMode) -> Result<FactorEstimate> {
    check_rank(r, panel)?;
    let cov = panel.covariance();
    let eig = symmetric_eig(&cov)?;
    pca_from_eigen(panel, &cov, &eig, r, mode)
}

pub(crate) fn pca_from_eigen(
    panel: &PanelDataset,
    cov: &SymmetricMatrix,
    eig: &EigenPairs,
    r: usize,
    mode: PcaMode,
) -> Result<FactorEstimate> {
    check_rank(r, panel)?;
    let basis = eig.leading(r)?.basis;
    let n = panel.units();
    let (scale, strengths) = match mode {
        PcaMode::Auxiliary => (vec![n as f64; r], None),
        PcaMode::Target => {
            let d = diagonal_of_compression(cov, &basis);
            let strengths = FactorStrengths::from_diagonal(&d, n)?;
            (d, Some(strengths))
        }
    };
    let loadings = scale_columns(basis.matrix(), |j| scale[j].sqrt());
    let factors = scale_columns(&(panel.data() * &loadings), |j| 1.0 / scale[j]);
    Ok(FactorEstimate {
        basis,
        loadings,
        factors,
        num_factors: r,
        scale,
        strengths,
    })
}

pub(crate) fn scale_columns(m: &DMatrix<f64>, f: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= f(j);
    }
    out
}

/// Default cap for the factor-number search: `min(⌊min(N, T)/2⌋, 15)`, at
/// least 1.
pub fn default_r_max(n: usize, t: usize) -> usize {
    (n.min(t) / 2).clamp(1, 15)
}

/// Eigenvalue-Ratio selector: the smallest maximiser of `λ_r / λ_{r+1}` over
/// `1 ≤ r ≤ r_max`.
pub fn er_num_factors(s: &SymmetricMatrix, r_max: usize) -> Result<usize> {
    let eig = symmetric_eig(s)?;
    er_from_eigenvalues(&eig.values, r_max)
}

/// [`er_num_factors`] on an already sorted (non-increasing) spectrum.
/// Denominators are floored at `1e-12 · λ₁`.
pub fn er_from_eigenvalues(values: &[f64], r_max: usize) -> Result<usize> {
    if r_max == 0 || r_max + 1 > values.len() {
        return Err(Error::dim(format!(
            "r_max = {r_max} must lie in 1..={}",
            values.len().saturating_sub(1)
        )));
    }
    let top = values[0];
    if !(top > 0.0) {
        return Err(Error::Degenerate("all eigenvalues are non-positive".into()));
    }
    let floor = 1e-12 * top;
    let mut best = 1;
    let mut best_ratio = f64::NEG_INFINITY;
    for r in 1..=r_max {
        let ratio = values[r - 1] / values[r].max(floor);
        if ratio > best_ratio {
            best_ratio = ratio;
            best = r;
        }
    }
    Ok(best)
}

/// Target-only factor strengths `α̂*ᵢ = log(M̂ᵢᵢ)/log N` with
/// `M̂ = Q̂ᵀ(XᵀX/T)Q̂` over the leading `r` eigenvectors.
pub fn factor_strengths_target(panel: &PanelDataset, r: usize) -> Result<FactorStrengths> {
    check_rank(r, panel)?;
    let cov = panel.covariance();
    let basis = symmetric_eig(&cov)?.leading(r)?.basis;
    FactorStrengths::from_diagonal(&diagonal_of_compression(&cov, &basis), panel.units())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::subspace_distance;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// `X = F Λᵀ` with orthonormal columns of `F/√T` and `Λ = Q diag(d)^{1/2}`.
    fn noiseless_panel(t: usize, n: usize, d: &[f64], seed: u64) -> (PanelDataset, OrthonormalBasis) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = d.len();
        let g = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
        let q = OrthonormalBasis::from_qr(g).unwrap();
        let h = DMatrix::from_fn(t, r, |_, _| StandardNormal.sample(&mut rng));
        let f = OrthonormalBasis::from_qr(h).unwrap().into_inner() * (t as f64).sqrt();
        let lambda = scale_columns(q.matrix(), |j| d[j].sqrt());
        let x = &f * lambda.transpose();
        (PanelDataset::new("noiseless", PanelRole::Target, x).unwrap(), q)
    }

    #[test]
    fn panel_validation() {
        assert!(PanelDataset::new("a", PanelRole::Target, DMatrix::zeros(1, 3)).is_err());
        assert!(PanelDataset::new("a", PanelRole::Target, DMatrix::zeros(3, 1)).is_err());
        let mut m = DMatrix::zeros(3, 3);
        m[(1, 1)] = f64::INFINITY;
        assert!(matches!(
            PanelDataset::new("a", PanelRole::Target, m),
            Err(Error::NonFinite(_))
        ));
        let p = PanelDataset::new("a", PanelRole::Source, DMatrix::zeros(3, 2)).unwrap();
        assert!(p.clone().with_time_labels(vec!["x".into()]).is_err());
        assert_eq!(p.window(1, 3).unwrap().periods(), 2);
    }

    #[test]
    fn noiseless_recovery_auxiliary_scaling() {
        let n = 30;
        let (panel, q) = noiseless_panel(40, n, &[n as f64; 3], 1);
        let est = pca_estimate(&panel, 3, PcaMode::Auxiliary).unwrap();
        assert!(subspace_distance(&est.basis, &q).unwrap() <= 1e-8);
        assert_eq!(est.scale, vec![30.0; 3]);
        let c = est.common_components().unwrap();
        assert!((panel.data() - &c).norm() / panel.data().norm() <= 1e-8);
        // regression identity
        let refit = scale_columns(&(panel.data() * &est.loadings), |j| 1.0 / est.scale[j]);
        assert!((refit - &est.factors).amax() <= 1e-10);
    }

    #[test]
    fn noiseless_strengths_are_exact() {
        let n = 64usize;
        let alphas = [1.0, 0.7, 0.55];
        let d: Vec<f64> = alphas.iter().map(|a| (n as f64).powf(*a)).collect();
        let (panel, _) = noiseless_panel(50, n, &d, 2);
        let fs = factor_strengths_target(&panel, 3).unwrap();
        for (est, truth) in fs.alphas.iter().zip(alphas) {
            assert!((est - truth).abs() < 1e-10, "{est} vs {truth}");
        }
        assert_eq!(fs.order, vec![0, 1, 2]);
        let est = pca_estimate(&panel, 3, PcaMode::Target).unwrap();
        for (s, dv) in est.scale.iter().zip(&d) {
            assert!((s - dv).abs() < 1e-8 * dv);
        }
        let c = est.common_components().unwrap();
        assert!((panel.data() - &c).norm() / panel.data().norm() <= 1e-8);
    }

    #[test]
    fn single_factor_compression_converges() {
        // λ = 2q, unit-variance i.i.d. factor, T = 1e5: M̂₁₁ → λᵀλ = 4.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = [0.5, 0.5, -0.5, 0.5];
        let t = 100_000;
        let x = DMatrix::from_fn(t, 4, |_, _| 0.0);
        let mut x = x;
        for i in 0..t {
            let f: f64 = StandardNormal.sample(&mut rng);
            for j in 0..4 {
                x[(i, j)] = f * 2.0 * q[j];
            }
        }
        let panel = PanelDataset::new("mc", PanelRole::Target, x).unwrap();
        let est = pca_estimate(&panel, 1, PcaMode::Target).unwrap();
        assert!((est.scale[0] - 4.0).abs() < 0.2, "{}", est.scale[0]);
    }

    #[test]
    fn rank_out_of_range() {
        let (panel, _) = noiseless_panel(5, 8, &[8.0], 4);
        assert!(pca_estimate(&panel, 0, PcaMode::Auxiliary).is_err());
        assert!(pca_estimate(&panel, 6, PcaMode::Auxiliary).is_err());
    }

    #[test]
    fn er_examples() {
        assert_eq!(er_from_eigenvalues(&[10.0, 2.0, 1.0, 0.9, 0.8], 4).unwrap(), 1);
        assert_eq!(er_from_eigenvalues(&[9.0, 3.0, 1.0, 0.5], 3).unwrap(), 1);
        assert!(matches!(
            er_from_eigenvalues(&[0.0, -1.0, -2.0], 2),
            Err(Error::Degenerate(_))
        ));
        assert!(er_from_eigenvalues(&[3.0, 2.0], 2).is_err());
        // zero tail is floored rather than dividing by zero
        assert_eq!(er_from_eigenvalues(&[5.0, 4.0, 0.0], 2).unwrap(), 2);
    }

    #[test]
    fn er_on_matrix_is_scale_invariant() {
        let s = SymmetricMatrix::from_diagonal(&[0.8, 10.0, 1.0, 2.0, 0.9]).unwrap();
        assert_eq!(er_num_factors(&s, 4).unwrap(), 1);
        let scaled = SymmetricMatrix::new(s.as_matrix() * 37.5).unwrap();
        assert_eq!(er_num_factors(&scaled, 4).unwrap(), 1);
    }

    #[test]
    fn strengths_flagging() {
        let fs = FactorStrengths::from_diagonal(&[2.0, 200.0, 0.5], 10).unwrap();
        assert_eq!(fs.order, vec![1, 0, 2]);
        assert!(fs.alphas.windows(2).all(|w| w[0] >= w[1]));
        // log10(200) > 1.2 and log10(0.5) < 0
        assert_eq!(fs.out_of_range(), vec![0, 2]);
        assert_eq!(fs.weak_count(0.9), 2);
        assert!(FactorStrengths::from_diagonal(&[1.0, 0.0], 10).is_err());
    }

    #[test]
    fn default_cap() {
        assert_eq!(default_r_max(126, 54), 15);
        assert_eq!(default_r_max(10, 8), 4);
        assert_eq!(default_r_max(2, 2), 1);
    }
}
