//! Window-by-window refitting of the target loading space.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::PanelDataset;
use crate::linalg::OrthonormalBasis;
use crate::select::{default_tau_grid, non_oracle_with_bases, DEFAULT_FOLDS, DEFAULT_GRID_POINTS};
use crate::transfer::{source_bases, transfer_spaces, PanelBasis, TargetFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// PCA on the target window alone.
    TargetOnly,
    /// Transfer from every supplied source.
    Blind,
    /// Transfer from the sources picked by cross-validated selection.
    NonOracle,
}

/// Everything needed to refit a window: the chosen sources are fixed up
/// front, only the target window changes.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub method: FitMethod,
    pub r0: usize,
    pub s: usize,
    pub sources: Vec<PanelBasis>,
    /// Indices (into the supplied sources) that the plan transfers from.
    pub chosen: Vec<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub folds: usize,
    pub grid_points: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

impl FitPlan {
    /// For the non-oracle method the selection runs once on the full target.
    pub fn new(
        target: &PanelDataset,
        sources: &[PanelDataset],
        r_k: &[usize],
        method: FitMethod,
        r0: usize,
        s: usize,
        options: &PlanOptions,
    ) -> Result<Self> {
        if r0 == 0 || s > r0 {
            return Err(Error::config(format!("need r0 ≥ 1 and s ≤ r0, got r0 = {r0}, s = {s}")));
        }
        if method != FitMethod::TargetOnly && s == 0 {
            return Err(Error::config("transfer methods need s ≥ 1"));
        }
        if let Some(bad) = sources.iter().find(|p| p.units() != target.units()) {
            return Err(Error::dim(format!("source '{}' does not share N = {}", bad.id(), target.units())));
        }
        if let Some(&m) = r_k.iter().min() {
            if method != FitMethod::TargetOnly && s > m {
                return Err(Error::config(format!("s = {s} exceeds min r_k = {m}")));
            }
        }
        let bases = if method == FitMethod::TargetOnly {
            Vec::new()
        } else {
            source_bases(sources, r_k)?
        };
        let (chosen, tau) = match method {
            FitMethod::TargetOnly => (Vec::new(), None),
            FitMethod::Blind => ((0..bases.len()).collect(), None),
            FitMethod::NonOracle => {
                if bases.is_empty() {
                    (Vec::new(), None)
                } else {
                    let fit = TargetFit::new(target)?;
                    let grid = default_tau_grid(s, options.grid_points)?;
                    let sel = non_oracle_with_bases(target, &fit, &bases, r0, s, options.folds, &grid)?;
                    (sel.selection.selected_indices, Some(sel.cv.tau))
                }
            }
        };
        Ok(Self {
            method,
            r0,
            s,
            sources: bases,
            chosen,
            tau,
        })
    }

    /// Estimated `r0`-dimensional loading space of a target window.
    pub fn loading_space(&self, window: &PanelDataset) -> Result<OrthonormalBasis> {
        if self.r0 > window.units().min(window.periods()) {
            return Err(Error::Data(format!(
                "window of {} rows cannot support {} factors",
                window.periods(),
                self.r0
            )));
        }
        let fit = TargetFit::new(window)?;
        if self.method == FitMethod::TargetOnly || self.s == 0 {
            return fit.basis(self.r0);
        }
        let chosen: Vec<&PanelBasis> = self.chosen.iter().map(|&k| &self.sources[k]).collect();
        let spaces = transfer_spaces(window, &fit, &chosen, self.r0, self.s)?;
        spaces.weak.concat(&spaces.strong)
    }
}

/// `F̂Λ̂ᵀ` for rows projected onto the loading space: `X Q Qᵀ`.
pub fn project_rows(x: &DMatrix<f64>, q: &OrthonormalBasis) -> DMatrix<f64> {
    let m = q.matrix();
    (x * m) * m.transpose()
}

#[derive(Debug, Clone, Serialize)]
pub struct RollingReport {
    pub bandwidth: usize,
    /// `‖X_t − Λ̂ f̂_t‖² / N` for each evaluated `t`.
    pub errors: Vec<f64>,
    pub mse: f64,
}

/// Rolling-window validation error: for each `t ≥ n` the loading space is
/// fitted on rows `t−n..t` and row `t` is reconstructed from it.
pub fn rolling_validation(target: &PanelDataset, plan: &FitPlan, bandwidth: usize) -> Result<RollingReport> {
    let t0 = target.periods();
    if bandwidth >= t0 {
        return Err(Error::Data(format!("bandwidth {bandwidth} leaves no rows to validate (T0 = {t0})")));
    }
    if bandwidth < plan.r0 + 2 {
        return Err(Error::config(format!(
            "bandwidth {bandwidth} is below r0 + 2 = {}",
            plan.r0 + 2
        )));
    }
    let n = target.units() as f64;
    let errors = (bandwidth..t0)
        .map(|t| {
            let window = target.window(t - bandwidth, t)?;
            let q = plan.loading_space(&window)?;
            let row = target.data().rows(t, 1).into_owned();
            Ok((&row - project_rows(&row, &q)).norm_squared() / n)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mse = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(RollingReport {
        bandwidth,
        errors,
        mse,
    })
}
