//! Transfer PCA: pooling loading-space information from auxiliary panels
//! through a weighted average of projection matrices.
//!
//! The weak part of the target loading space is read off the leading
//! eigenvectors of
//!
//! ```text
//! P̂ʷ = (1/T) Σ_k T_k Q̂⁽ᵏ⁾Q̂⁽ᵏ⁾ᵀ,   T = Σ_k T_k,
//! ```
//!
//! taken over the target and the informative sources. The strong part is then
//! estimated by PCA on the target covariance with the weak space projected out.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{
    diagonal_of_compression, scale_columns, CommonComponents, FactorStrengths, PanelDataset,
};
use crate::linalg::{symmetric_eig, EigenPairs, OrthonormalBasis, SymmetricMatrix};

/// Relative floor under which eigenvalues of the projected covariance count
/// as zero.
pub const PROJECTED_EIGEN_FLOOR: f64 = 1e-12;

/// Estimated loading space of one panel together with its sample length.
#[derive(Debug, Clone)]
pub struct PanelBasis {
    pub id: String,
    pub basis: OrthonormalBasis,
    pub periods: usize,
}

/// Leading `r` eigenvectors of the panel's sample covariance.
pub fn panel_basis(panel: &PanelDataset, r: usize) -> Result<PanelBasis> {
    if r == 0 || r > panel.units().min(panel.periods()) {
        return Err(Error::dim(format!(
            "number of factors {r} out of range for panel '{}'",
            panel.id()
        )));
    }
    let basis = symmetric_eig(&panel.covariance())?.leading(r)?.basis;
    Ok(PanelBasis {
        id: panel.id().to_string(),
        basis,
        periods: panel.periods(),
    })
}

/// Per-source loading spaces, computed in parallel and returned in input order.
pub fn source_bases(sources: &[PanelDataset], r_k: &[usize]) -> Result<Vec<PanelBasis>> {
    if sources.len() != r_k.len() {
        return Err(Error::dim(format!(
            "{} sources but {} factor numbers",
            sources.len(),
            r_k.len()
        )));
    }
    sources
        .par_iter()
        .zip(r_k.par_iter())
        .map(|(p, &r)| panel_basis(p, r))
        .collect()
}

/// Sample covariance of the target and its eigendecomposition.
#[derive(Debug, Clone)]
pub struct TargetFit {
    pub covariance: SymmetricMatrix,
    pub eigen: EigenPairs,
}

impl TargetFit {
    pub fn new(panel: &PanelDataset) -> Result<Self> {
        let covariance = panel.covariance();
        let eigen = symmetric_eig(&covariance)?;
        Ok(Self { covariance, eigen })
    }

    /// Leading `r0` eigenvectors, `Q̂⁽⁰⁾`.
    pub fn basis(&self, r0: usize) -> Result<OrthonormalBasis> {
        Ok(self.eigen.leading(r0)?.basis)
    }

    /// Eigenvectors `r0 - s + 1, …, r0`: the block a target-only fit
    /// attributes to the weak factors.
    pub fn weak_block(&self, r0: usize, s: usize) -> Result<OrthonormalBasis> {
        if s == 0 || s > r0 {
            return Err(Error::dim(format!("weak block of size {s} within {r0} factors")));
        }
        self.eigen.block(r0 - s, r0)
    }
}

/// `P̂ʷ` with its cached spectrum.
#[derive(Debug, Clone)]
pub struct WeightedProjection {
    pub matrix: SymmetricMatrix,
    /// `T_k / T` per contributing panel, in input order.
    pub weights: Vec<f64>,
    pub contributing_ids: Vec<String>,
    pub eigen: EigenPairs,
}

/// Stacks `√(T_k/T) Q̂⁽ᵏ⁾` side by side, so that `P̂ʷ = B Bᵀ`.
pub(crate) fn weighted_factor<'a>(
    bases: impl IntoIterator<Item = &'a PanelBasis>,
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<String>)> {
    let bases: Vec<&PanelBasis> = bases.into_iter().collect();
    let first = bases
        .first()
        .ok_or_else(|| Error::dim("weighted projection of an empty list"))?;
    let n = first.basis.ambient_dim();
    if let Some(bad) = bases.iter().find(|b| b.basis.ambient_dim() != n) {
        return Err(Error::dim(format!(
            "panel '{}' lives in ℝ^{} but the first panel in ℝ^{n}",
            bad.id,
            bad.basis.ambient_dim()
        )));
    }
    if let Some(bad) = bases.iter().find(|b| b.periods == 0) {
        return Err(Error::dim(format!("panel '{}' has no periods", bad.id)));
    }
    let total: f64 = bases.iter().map(|b| b.periods as f64).sum();
    let weights: Vec<f64> = bases.iter().map(|b| b.periods as f64 / total).collect();
    let cols: usize = bases.iter().map(|b| b.basis.rank()).sum();
    let mut factor = DMatrix::zeros(n, cols);
    let mut at = 0;
    for (b, w) in bases.iter().zip(&weights) {
        let r = b.basis.rank();
        factor
            .columns_mut(at, r)
            .copy_from(&(b.basis.matrix() * w.sqrt()));
        at += r;
    }
    let ids = bases.iter().map(|b| b.id.clone()).collect();
    Ok((factor, weights, ids))
}

/// `P̂ʷ = (1/T) Σ_k T_k Q̂⁽ᵏ⁾Q̂⁽ᵏ⁾ᵀ` over the given panels, summed in input order.
pub fn weighted_projection<'a>(
    bases: impl IntoIterator<Item = &'a PanelBasis>,
) -> Result<WeightedProjection> {
    let (factor, weights, contributing_ids) = weighted_factor(bases)?;
    let matrix = SymmetricMatrix::symmetrize(&factor * factor.transpose());
    let eigen = symmetric_eig(&matrix)?;
    Ok(WeightedProjection {
        matrix,
        weights,
        contributing_ids,
        eigen,
    })
}

/// TransED: the smallest maximiser of `λ_j(P̂ʷ) - λ_{j+1}(P̂ʷ)` over
/// `1 ≤ j ≤ s_max`.
pub fn trans_ed(p: &WeightedProjection, s_max: usize) -> Result<usize> {
    ed_from_eigenvalues(&p.eigen.values, s_max)
}

/// [`trans_ed`] on a non-increasing spectrum.
pub fn ed_from_eigenvalues(values: &[f64], s_max: usize) -> Result<usize> {
    if s_max == 0 || s_max + 1 > values.len() {
        return Err(Error::dim(format!(
            "s_max = {s_max} must lie in 1..={}",
            values.len().saturating_sub(1)
        )));
    }
    let mut best = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for j in 1..=s_max {
        let gap = values[j - 1] - values[j];
        if gap > best_gap {
            best_gap = gap;
            best = j;
        }
    }
    Ok(best)
}

/// Transfer-based strengths `α̂ᵢ = log((M̂_w)ᵢᵢ)/log N` with
/// `M̂_w = Q̂_wᵀ Σ̂⁽⁰⁾ Q̂_w`, sorted non-increasing.
pub fn factor_strengths_trans(
    target: &PanelDataset,
    weak_basis: &OrthonormalBasis,
) -> Result<FactorStrengths> {
    strengths_with_cov(&target.covariance(), weak_basis, target.units())
}

fn strengths_with_cov(
    cov: &SymmetricMatrix,
    weak_basis: &OrthonormalBasis,
    n: usize,
) -> Result<FactorStrengths> {
    if weak_basis.ambient_dim() != n {
        return Err(Error::dim(format!(
            "weak basis lives in ℝ^{} but the target has {n} units",
            weak_basis.ambient_dim()
        )));
    }
    if weak_basis.rank() == 0 {
        return Err(Error::dim("weak basis must have at least one column"));
    }
    FactorStrengths::from_diagonal(&diagonal_of_compression(cov, weak_basis), n)
}

/// Leading `m` eigenvectors of `(I - Q_wQ_wᵀ) Σ̂ (I - Q_wQ_wᵀ)`.
///
/// Directions whose eigenvalue sits under the relative floor are replaced by
/// a deterministic completion in the complement of `[Q_w, chosen]`. Returns
/// the basis and whether the floor was hit.
pub fn strong_space(
    cov: &SymmetricMatrix,
    weak: &OrthonormalBasis,
    m: usize,
) -> Result<(OrthonormalBasis, bool)> {
    let n = cov.dim();
    if weak.ambient_dim() != n {
        return Err(Error::dim("weak basis and covariance disagree on N"));
    }
    if m + weak.rank() > n {
        return Err(Error::dim(format!(
            "cannot fit {m} strong directions next to {} weak ones in ℝ^{n}",
            weak.rank()
        )));
    }
    if m == 0 {
        return Ok((OrthonormalBasis::empty(n), false));
    }
    let left = weak.project_out(cov.as_matrix());
    let projected = SymmetricMatrix::symmetrize(weak.project_out(&left.transpose()));
    let eig = symmetric_eig(&projected)?;
    let floor = PROJECTED_EIGEN_FLOOR * eig.values[0].max(0.0);
    let usable = eig.values[..m]
        .iter()
        .take_while(|v| **v > floor && eig.values[0] > 0.0)
        .count();
    let mut chosen = if usable > 0 {
        let block = eig.block(0, usable)?;
        OrthonormalBasis::from_qr(weak.project_out(block.matrix()))?
    } else {
        OrthonormalBasis::empty(n)
    };
    let floor_hit = usable < m;
    if floor_hit {
        log::warn!(
            "projected covariance has only {usable} eigenvalues above the floor; completing {} strong directions",
            m - usable
        );
        chosen = complete_basis(&weak.concat(&chosen)?, &chosen, m)?;
    }
    Ok((chosen.with_sign_convention(), floor_hit))
}

/// Extends `partial` to `m` columns using standard basis vectors projected
/// off `avoid` (which contains `partial`), in index order.
fn complete_basis(
    avoid: &OrthonormalBasis,
    partial: &OrthonormalBasis,
    m: usize,
) -> Result<OrthonormalBasis> {
    let n = avoid.ambient_dim();
    let mut cols: Vec<nalgebra::DVector<f64>> =
        partial.matrix().column_iter().map(|c| c.into_owned()).collect();
    let mut fence = avoid.matrix().clone();
    for i in 0..n {
        if cols.len() == m {
            break;
        }
        let mut e = DMatrix::zeros(n, 1);
        e[(i, 0)] = 1.0;
        for _ in 0..2 {
            e = &e - &fence * (fence.transpose() * &e);
        }
        let norm = e.norm();
        if norm > 1e-6 {
            let v = e.column(0) / norm;
            let last = fence.ncols();
            fence = fence.insert_column(last, 0.0);
            fence.column_mut(last).copy_from(&v);
            cols.push(v);
        }
    }
    if cols.len() < m {
        return Err(Error::Numeric("could not complete the strong basis".into()));
    }
    OrthonormalBasis::new(DMatrix::from_columns(&cols))
}

/// Output of the transfer procedure for the target panel.
#[derive(Debug, Clone)]
pub struct TransferEstimate {
    /// `Q̂_w`, `N × s`, columns aligned with `weak_strengths`.
    pub weak_basis: OrthonormalBasis,
    /// `Q̂_s`, `N × (r0 - s)`.
    pub strong_basis: OrthonormalBasis,
    pub weak_loadings: DMatrix<f64>,
    pub strong_loadings: DMatrix<f64>,
    pub weak_factors: DMatrix<f64>,
    pub strong_factors: DMatrix<f64>,
    pub weak_strengths: FactorStrengths,
    pub s: usize,
    pub r0: usize,
    /// `None` when no sources were supplied.
    pub weighted: Option<WeightedProjection>,
    /// True when the weak space fell back to the target-only weak block.
    pub target_only_fallback: bool,
}

impl TransferEstimate {
    /// `[Q̂_w, Q̂_s]`, the estimated full loading space.
    pub fn loading_space(&self) -> Result<OrthonormalBasis> {
        self.weak_basis.concat(&self.strong_basis)
    }

    /// `[Λ̂_w, Λ̂_s]`, `N × r0`.
    pub fn loadings(&self) -> DMatrix<f64> {
        hcat(&self.weak_loadings, &self.strong_loadings)
    }

    /// `[F̂_w, F̂_s]`, `T₀ × r0`.
    pub fn factors(&self) -> DMatrix<f64> {
        hcat(&self.weak_factors, &self.strong_factors)
    }
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

impl CommonComponents for TransferEstimate {
    fn common_components(&self) -> Result<DMatrix<f64>> {
        if self.weak_factors.ncols() != self.weak_loadings.ncols()
            || self.strong_factors.ncols() != self.strong_loadings.ncols()
            || self.weak_factors.nrows() != self.strong_factors.nrows()
        {
            return Err(Error::dim("inconsistent factor and loading shapes"));
        }
        Ok(&self.weak_factors * self.weak_loadings.transpose()
            + &self.strong_factors * self.strong_loadings.transpose())
    }
}

fn check_counts(target: &PanelDataset, r0: usize, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::config("the number of weak factors must be at least 1"));
    }
    if s > r0 {
        return Err(Error::config(format!("s = {s} exceeds r0 = {r0}")));
    }
    if r0 > target.units().min(target.periods()) {
        return Err(Error::dim(format!(
            "r0 = {r0} exceeds min(N, T0) = {}",
            target.units().min(target.periods())
        )));
    }
    Ok(())
}

/// Oracle transfer PCA on the target and a set of sources assumed
/// informative.
///
/// With `strengths = None` the weak scales come from
/// [`factor_strengths_trans`]; supplied strengths must have length `s`.
/// An empty source list degrades to the target-only weak block with a warning.
pub fn oracle_transpca(
    target: &PanelDataset,
    sources: &[PanelDataset],
    r0: usize,
    s: usize,
    r_k: &[usize],
    strengths: Option<&FactorStrengths>,
) -> Result<TransferEstimate> {
    check_counts(target, r0, s)?;
    if let Some(bad) = sources.iter().find(|p| p.units() != target.units()) {
        return Err(Error::dim(format!(
            "source '{}' has {} units, target has {}",
            bad.id(),
            bad.units(),
            target.units()
        )));
    }
    if let Some(&min_rk) = r_k.iter().min() {
        if s > min_rk {
            return Err(Error::config(format!("s = {s} exceeds min r_k = {min_rk}")));
        }
    }
    let fit = TargetFit::new(target)?;
    let bases = source_bases(sources, r_k)?;
    let refs: Vec<&PanelBasis> = bases.iter().collect();
    transpca_with_bases(target, &fit, &refs, r0, s, strengths)
}

/// Weak and strong loading spaces only (steps that do not need strengths).
#[derive(Debug, Clone)]
pub struct TransferSpaces {
    pub weak: OrthonormalBasis,
    pub strong: OrthonormalBasis,
    pub weighted: Option<WeightedProjection>,
    pub target_only_fallback: bool,
}

pub(crate) fn weak_space(
    target: &PanelDataset,
    fit: &TargetFit,
    sources: &[&PanelBasis],
    r0: usize,
    s: usize,
) -> Result<(OrthonormalBasis, Option<WeightedProjection>, bool)> {
    if sources.is_empty() {
        log::warn!("no source panels: using the target-only weak block");
        return Ok((fit.weak_block(r0, s)?, None, true));
    }
    let target_basis = PanelBasis {
        id: target.id().to_string(),
        basis: fit.basis(r0)?,
        periods: target.periods(),
    };
    let all = std::iter::once(&target_basis).chain(sources.iter().copied());
    let weighted = weighted_projection(all)?;
    let weak = weighted.eigen.leading(s)?.basis;
    Ok((weak, Some(weighted), false))
}

/// Weak space from `P̂ʷ` followed by the strong space from the projected
/// covariance.
pub fn transfer_spaces(
    target: &PanelDataset,
    fit: &TargetFit,
    sources: &[&PanelBasis],
    r0: usize,
    s: usize,
) -> Result<TransferSpaces> {
    check_counts(target, r0, s)?;
    let (weak, weighted, fallback) = weak_space(target, fit, sources, r0, s)?;
    let (strong, _) = strong_space(&fit.covariance, &weak, r0 - s)?;
    Ok(TransferSpaces {
        weak,
        strong,
        weighted,
        target_only_fallback: fallback,
    })
}

/// Transfer PCA given precomputed source loading spaces.
pub fn transpca_with_bases(
    target: &PanelDataset,
    fit: &TargetFit,
    sources: &[&PanelBasis],
    r0: usize,
    s: usize,
    strengths: Option<&FactorStrengths>,
) -> Result<TransferEstimate> {
    check_counts(target, r0, s)?;
    let (weak, weighted, fallback) = weak_space(target, fit, sources, r0, s)?;
    finish_estimate(target, fit, weak, weighted, fallback, r0, s, strengths)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_estimate(
    target: &PanelDataset,
    fit: &TargetFit,
    weak: OrthonormalBasis,
    weighted: Option<WeightedProjection>,
    fallback: bool,
    r0: usize,
    s: usize,
    strengths: Option<&FactorStrengths>,
) -> Result<TransferEstimate> {
    let n = target.units();
    let (weak, weak_strengths) = match strengths {
        Some(given) => {
            if given.len() != s {
                return Err(Error::config(format!(
                    "{} strengths supplied for {s} weak factors",
                    given.len()
                )));
            }
            let mut given = given.clone();
            given.order = (0..s).collect();
            (weak, given)
        }
        None => {
            let est = strengths_with_cov(&fit.covariance, &weak, n)?;
            let weak = weak.select_columns(&est.order)?;
            let aligned = FactorStrengths {
                order: (0..s).collect(),
                ..est
            };
            (weak, aligned)
        }
    };
    let d = &weak_strengths.d_values;
    let weak_loadings = scale_columns(weak.matrix(), |j| d[j].sqrt());
    let weak_factors = scale_columns(&(target.data() * &weak_loadings), |j| 1.0 / d[j]);

    let (strong, _) = strong_space(&fit.covariance, &weak, r0 - s)?;
    let sqrt_n = (n as f64).sqrt();
    let strong_loadings = strong.matrix() * sqrt_n;
    let residual = target.data() - &weak_factors * weak_loadings.transpose();
    let strong_factors = residual * &strong_loadings / n as f64;

    Ok(TransferEstimate {
        weak_basis: weak,
        strong_basis: strong,
        weak_loadings,
        strong_loadings,
        weak_factors,
        strong_factors,
        weak_strengths,
        s,
        r0,
        weighted,
        target_only_fallback: fallback,
    })
}
