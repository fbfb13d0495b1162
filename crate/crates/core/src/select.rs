//! Choosing which auxiliary panels to pool.
//!
//! Selection maximises the rectified objective
//!
//! ```text
//! (1/T̃) [ T₀ tr(P₀ P_Q) + Σ_k T_k max{tr(P_k P_Q), τ} ]
//! ```
//!
//! by coordinate ascent: given `Q` the best set is `{k : tr(P_k P_Q) ≥ τ}`,
//! and given the set the best `Q` spans the top-`s` eigenvectors of
//! `T₀P₀ + Σ_{k∈Â} T_k P_k`. The threshold `τ` is chosen by cross-validation
//! over contiguous time blocks of the target.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::PanelDataset;
use crate::linalg::{leading_eigenvectors_of_outer, trace_overlap, OrthonormalBasis};
use crate::transfer::{
    source_bases, strong_space, transpca_with_bases, weighted_factor, PanelBasis, TargetFit,
    TransferEstimate,
};

pub const DEFAULT_MAX_ITER: usize = 50;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_GRID_POINTS: usize = 21;

/// Relative slack allowed when checking that the objective never decreases.
const ASCENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub tau: f64,
    pub s: usize,
    pub max_iter: usize,
    /// Starting weak basis; `None` uses eigenvectors `r0 - s + 1, …, r0` of the
    /// target covariance.
    pub init_basis: Option<OrthonormalBasis>,
}

impl SelectionConfig {
    pub fn new(tau: f64, s: usize) -> Self {
        Self {
            tau,
            s,
            max_iter: DEFAULT_MAX_ITER,
            init_basis: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::config("s must be at least 1"));
        }
        if !(0.0..=self.s as f64).contains(&self.tau) {
            return Err(Error::config(format!("tau = {} outside [0, {}]", self.tau, self.s)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        if let Some(b) = &self.init_basis {
            if b.rank() != self.s {
                return Err(Error::config(format!(
                    "initial basis has {} columns, expected {}",
                    b.rank(),
                    self.s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Ids of the selected sources, in input order.
    pub selected: Vec<String>,
    pub selected_indices: Vec<usize>,
    pub weak_basis: OrthonormalBasis,
    pub iterations: usize,
    pub converged: bool,
    /// `tr(P_k P_{Q̂_w})` for every source against the final weak basis.
    pub overlap_scores: Vec<f64>,
    /// Rectified objective at the initial basis and after each update.
    pub objective_trace: Vec<f64>,
    pub tau: f64,
    /// True when an empty selection forced the target-only weak basis.
    pub empty_fallback: bool,
}

/// Rectified selection objective at `q`; `T̃ = T₀ + Σ_k T_k`.
pub fn rectified_objective(
    q: &OrthonormalBasis,
    target_basis: &PanelBasis,
    sources: &[PanelBasis],
    tau: f64,
) -> Result<f64> {
    let overlaps = sources
        .iter()
        .map(|b| trace_overlap(&b.basis, q))
        .collect::<Result<Vec<_>>>()?;
    objective_from_overlaps(trace_overlap(&target_basis.basis, q)?, target_basis, sources, &overlaps, tau)
}

fn objective_from_overlaps(
    target_overlap: f64,
    target_basis: &PanelBasis,
    sources: &[PanelBasis],
    overlaps: &[f64],
    tau: f64,
) -> Result<f64> {
    let t0 = target_basis.periods as f64;
    let total = t0 + sources.iter().map(|b| b.periods as f64).sum::<f64>();
    if total <= 0.0 {
        return Err(Error::dim("objective needs at least one period"));
    }
    let pooled: f64 = sources
        .iter()
        .zip(overlaps)
        .map(|(b, o)| b.periods as f64 * o.max(tau))
        .sum();
    Ok((t0 * target_overlap + pooled) / total)
}

/// Coordinate ascent on precomputed loading spaces.
///
/// `target_basis` holds the leading `r0` eigenvectors of the target;
/// `fallback` is the target-only weak block, used as the start when
/// `cfg.init_basis` is `None` and returned if the selection ever empties.
pub fn select_with_bases(
    target_basis: &PanelBasis,
    sources: &[PanelBasis],
    fallback: &OrthonormalBasis,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let n = target_basis.basis.ambient_dim();
    if let Some(bad) = sources.iter().find(|b| b.basis.ambient_dim() != n) {
        return Err(Error::dim(format!("source '{}' does not share N = {n}", bad.id)));
    }
    if fallback.rank() != cfg.s || fallback.ambient_dim() != n {
        return Err(Error::dim("fallback basis must be N × s"));
    }
    let mut q = cfg.init_basis.clone().unwrap_or_else(|| fallback.clone());
    if q.ambient_dim() != n {
        return Err(Error::dim("initial basis does not share N"));
    }

    let overlaps_at = |q: &OrthonormalBasis| -> Result<Vec<f64>> {
        sources.iter().map(|b| trace_overlap(&b.basis, q)).collect()
    };
    let objective_at = |q: &OrthonormalBasis, overlaps: &[f64]| -> Result<f64> {
        objective_from_overlaps(trace_overlap(&target_basis.basis, q)?, target_basis, sources, overlaps, cfg.tau)
    };

    let mut overlaps = overlaps_at(&q)?;
    let mut trace = vec![objective_at(&q, &overlaps)?];
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut empty_fallback = false;

    for _ in 0..cfg.max_iter {
        let chosen: Vec<usize> = (0..sources.len())
            .filter(|&k| overlaps[k] >= cfg.tau)
            .collect();
        if previous.as_ref() == Some(&chosen) {
            converged = true;
            break;
        }
        if chosen.is_empty() {
            log::debug!("no source passes tau = {}; using the target-only weak basis", cfg.tau);
            q = fallback.clone();
            overlaps = overlaps_at(&q)?;
            empty_fallback = true;
            previous = Some(chosen);
            break;
        }
        let pool = std::iter::once(target_basis).chain(chosen.iter().map(|&k| &sources[k]));
        let (factor, _, _) = weighted_factor(pool)?;
        q = leading_eigenvectors_of_outer(&factor, cfg.s)?.basis;
        overlaps = overlaps_at(&q)?;
        let value = objective_at(&q, &overlaps)?;
        let last = *trace.last().expect("trace starts non-empty");
        if value < last - ASCENT_TOL * last.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "selection objective decreased from {last} to {value}"
            )));
        }
        trace.push(value);
        iterations += 1;
        previous = Some(chosen);
    }

    let selected_indices = if empty_fallback {
        Vec::new()
    } else {
        previous.unwrap_or_default()
    };
    Ok(SelectionResult {
        selected: selected_indices.iter().map(|&k| sources[k].id.clone()).collect(),
        selected_indices,
        weak_basis: q,
        iterations,
        converged: converged && !empty_fallback,
        overlap_scores: overlaps,
        objective_trace: trace,
        tau: cfg.tau,
        empty_fallback,
    })
}

fn check_shapes(target: &PanelDataset, sources: &[PanelDataset], r0: usize, s: usize, r_k: &[usize]) -> Result<()> {
    if s == 0 || s > r0 {
        return Err(Error::config(format!("need 1 ≤ s ≤ r0, got s = {s}, r0 = {r0}")));
    }
    if r0 > target.units().min(target.periods()) {
        return Err(Error::dim(format!("r0 = {r0} exceeds min(N, T0)")));
    }
    if let Some(bad) = sources.iter().find(|p| p.units() != target.units()) {
        return Err(Error::dim(format!("source '{}' does not share N = {}", bad.id(), target.units())));
    }
    if let Some(&m) = r_k.iter().min() {
        if s > m {
            return Err(Error::config(format!("s = {s} exceeds min r_k = {m}")));
        }
    }
    Ok(())
}

fn target_pieces(target: &PanelDataset, fit: &TargetFit, r0: usize, s: usize) -> Result<(PanelBasis, OrthonormalBasis)> {
    let basis = PanelBasis {
        id: target.id().to_string(),
        basis: fit.basis(r0)?,
        periods: target.periods(),
    };
    Ok((basis, fit.weak_block(r0, s)?))
}

/// Runs the selection on raw panels; `r0` fixes the target loading space.
pub fn select_informative(
    target: &PanelDataset,
    sources: &[PanelDataset],
    r0: usize,
    r_k: &[usize],
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    check_shapes(target, sources, r0, cfg.s, r_k)?;
    let bases = source_bases(sources, r_k)?;
    let fit = TargetFit::new(target)?;
    let (tb, fallback) = target_pieces(target, &fit, r0, cfg.s)?;
    let res = select_with_bases(&tb, &bases, &fallback, cfg)?;
    warn_if_empty(&res);
    Ok(res)
}

fn warn_if_empty(res: &SelectionResult) {
    if res.empty_fallback {
        log::warn!("no source passes tau = {}; using the target-only weak basis", res.tau);
    }
}

/// `points` equispaced values on `[0, s]`.
pub fn default_tau_grid(s: usize, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::config("a tau grid needs at least two points"));
    }
    let last = (points - 1) as f64;
    Ok((0..points).map(|i| i as f64 * s as f64 / last).collect())
}

/// Contiguous blocks `[start, end)` covering `0..t`, earlier blocks one row
/// longer when `t` is not a multiple of `folds`.
pub fn time_folds(t: usize, folds: usize) -> Result<Vec<(usize, usize)>> {
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least two folds"));
    }
    let base = t / folds;
    if base < 2 {
        return Err(Error::config(format!(
            "{t} periods split into {folds} folds leaves fewer than 2 rows per fold"
        )));
    }
    let extra = t % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push((start, start + len));
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CvOutcome {
    pub tau: f64,
    pub grid: Vec<f64>,
    /// Mean held-out score per grid point.
    pub scores: Vec<f64>,
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) + 1e-14
}

/// Grid point with the smallest score; among ties the largest `τ`.
pub fn pick_tau(grid: &[f64], scores: &[f64]) -> Result<f64> {
    if grid.is_empty() || grid.len() != scores.len() {
        return Err(Error::dim("grid and scores must be non-empty and of equal length"));
    }
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numeric("cross-validation scores are not finite".into()));
    }
    Ok(grid
        .iter()
        .zip(scores)
        .filter(|(_, s)| ties(**s, best))
        .map(|(t, _)| *t)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `‖X_hold − X_hold QQᵀ‖²_F / (N · |hold|)`: held-out reconstruction
/// error of projecting onto the estimated loading space.
pub fn holdout_score(hold: &DMatrix<f64>, space: &OrthonormalBasis) -> f64 {
    let q = space.matrix();
    let resid = hold - (hold * q) * q.transpose();
    resid.norm_squared() / (hold.nrows() * hold.ncols()) as f64
}

/// Cross-validated choice of `τ` with precomputed source spaces.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_tau_with_bases(
    target: &PanelDataset,
    sources: &[PanelBasis],
    r0: usize,
    s: usize,
    folds: usize,
    grid: &[f64],
    max_iter: usize,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::config("empty tau grid"));
    }
    if let Some(bad) = grid.iter().find(|t| !(0.0..=s as f64).contains(*t)) {
        return Err(Error::config(format!("tau grid value {bad} outside [0, {s}]")));
    }
    let blocks = time_folds(target.periods(), folds)?;
    let per_fold: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let train_rows: Vec<usize> = (0..target.periods()).filter(|t| *t < start || *t >= end).collect();
            let train = target.select_rows(&train_rows)?;
            if r0 > train.units().min(train.periods()) {
                return Err(Error::dim(format!("r0 = {r0} too large for a training fold")));
            }
            let hold = target.data().rows(start, end - start).into_owned();
            let fit = TargetFit::new(&train)?;
            let (tb, fallback) = target_pieces(&train, &fit, r0, s)?;
            let mut memo: HashMap<Vec<usize>, f64> = HashMap::new();
            grid.iter()
                .map(|&tau| {
                    let cfg = SelectionConfig {
                        max_iter,
                        ..SelectionConfig::new(tau, s)
                    };
                    let sel = select_with_bases(&tb, sources, &fallback, &cfg)?;
                    if let Some(v) = memo.get(&sel.selected_indices) {
                        return Ok(*v);
                    }
                    let (strong, _) = strong_space(&fit.covariance, &sel.weak_basis, r0 - s)?;
                    let score = holdout_score(&hold, &sel.weak_basis.concat(&strong)?);
                    memo.insert(sel.selected_indices, score);
                    Ok(score)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / per_fold.len() as f64)
        .collect();
    let tau = pick_tau(grid, &scores)?;
    Ok(CvOutcome {
        tau,
        grid: grid.to_vec(),
        scores,
    })
}

pub fn cross_validate_tau(
    target: &PanelDataset,
    sources: &[PanelDataset],
    r0: usize,
    s: usize,
    r_k: &[usize],
    folds: usize,
    grid: &[f64],
) -> Result<CvOutcome> {
    check_shapes(target, sources, r0, s, r_k)?;
    let bases = source_bases(sources, r_k)?;
    cross_validate_tau_with_bases(target, &bases, r0, s, folds, grid, DEFAULT_MAX_ITER)
}

/// Selection and transfer estimate with `τ` chosen by cross-validation.
#[derive(Debug, Clone)]
pub struct NonOracleFit {
    pub cv: CvOutcome,
    pub selection: SelectionResult,
    pub estimate: TransferEstimate,
}

pub fn non_oracle_with_bases(
    target: &PanelDataset,
    fit: &TargetFit,
    sources: &[PanelBasis],
    r0: usize,
    s: usize,
    folds: usize,
    grid: &[f64],
) -> Result<NonOracleFit> {
    let cv = cross_validate_tau_with_bases(target, sources, r0, s, folds, grid, DEFAULT_MAX_ITER)?;
    let (tb, fallback) = target_pieces(target, fit, r0, s)?;
    let selection = select_with_bases(&tb, sources, &fallback, &SelectionConfig::new(cv.tau, s))?;
    warn_if_empty(&selection);
    let chosen: Vec<&PanelBasis> = selection.selected_indices.iter().map(|&k| &sources[k]).collect();
    let estimate = transpca_with_bases(target, fit, &chosen, r0, s, None)?;
    Ok(NonOracleFit {
        cv,
        selection,
        estimate,
    })
}

/// Cross-validate `τ`, select sources on the full target, then run the
/// oracle procedure on the selected sources.
pub fn non_oracle_transpca(
    target: &PanelDataset,
    sources: &[PanelDataset],
    r0: usize,
    s: usize,
    r_k: &[usize],
    folds: usize,
    grid: &[f64],
) -> Result<NonOracleFit> {
    check_shapes(target, sources, r0, s, r_k)?;
    let bases = source_bases(sources, r_k)?;
    let fit = TargetFit::new(target)?;
    non_oracle_with_bases(target, &fit, &bases, r0, s, folds, grid)
}
