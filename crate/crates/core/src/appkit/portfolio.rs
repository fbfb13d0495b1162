//! Factor-based covariance assembly and the minimum-variance backtest.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::appkit::rolling::{project_rows, FitPlan};
use crate::error::{Error, Result};
use crate::estimate::PanelDataset;
use crate::linalg::{symmetric_eig, SymmetricMatrix};

pub const DEFAULT_THRESHOLD_C: f64 = 2.0;
/// Added on top of `|λ_min|` when a ridge is needed.
pub const RIDGE_MARGIN: f64 = 1e-8;

/// Zeroes off-diagonal entries with `|σ_ij| < level`; the diagonal is kept.
pub fn hard_threshold(s: &SymmetricMatrix, level: f64) -> SymmetricMatrix {
    let mut m = s.as_matrix().clone();
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)].abs() < level {
                m[(i, j)] = 0.0;
            }
        }
    }
    SymmetricMatrix::symmetrize(m)
}

#[derive(Debug, Clone)]
pub struct ThresholdedCovariance {
    pub matrix: SymmetricMatrix,
    /// Ridge added to restore positive definiteness, if any.
    pub ridge: Option<f64>,
    /// Smallest and largest eigenvalue after any ridge.
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl ThresholdedCovariance {
    pub fn condition_number(&self) -> f64 {
        self.max_eigenvalue / self.min_eigenvalue
    }
}

/// `ĈᵀĈ/n + HardThresh(ÊᵀÊ/n)` at level `C·√(ln N / n)`, followed by a
/// minimal ridge `(|λ_min| + 1e-8)·I` when the sum is not positive definite.
pub fn covariance_hard_threshold(common: &DMatrix<f64>, resid: &DMatrix<f64>, c: f64) -> Result<ThresholdedCovariance> {
    if common.shape() != resid.shape() {
        return Err(Error::dim(format!(
            "common component is {:?} but residuals are {:?}",
            common.shape(),
            resid.shape()
        )));
    }
    if !(c >= 0.0) {
        return Err(Error::config(format!("threshold constant {c} must be non-negative")));
    }
    let (n_rows, n) = common.shape();
    if n_rows == 0 || n == 0 {
        return Err(Error::dim("empty window"));
    }
    let rows = n_rows as f64;
    let level = c * ((n as f64).ln() / rows).sqrt();
    let common_cov = common.tr_mul(common) / rows;
    let resid_cov = SymmetricMatrix::symmetrize(resid.tr_mul(resid) / rows);
    let mut total = SymmetricMatrix::symmetrize(common_cov + hard_threshold(&resid_cov, level).into_inner());
    let eig = symmetric_eig(&total)?;
    let mut lo = *eig.values.last().expect("non-empty spectrum");
    let mut hi = eig.values[0];
    let mut ridge = None;
    if lo <= 0.0 {
        let delta = lo.abs() + RIDGE_MARGIN;
        log::info!("covariance not positive definite (λ_min = {lo}); adding ridge {delta}");
        total = total.add_ridge(delta);
        lo += delta;
        hi += delta;
        ridge = Some(delta);
    }
    Ok(ThresholdedCovariance {
        matrix: total,
        ridge,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
    })
}

/// `Σ⁻¹1 / (1ᵀΣ⁻¹1)` via a Cholesky solve.
pub fn min_variance_weights(sigma: &SymmetricMatrix) -> Result<DVector<f64>> {
    let n = sigma.dim();
    let chol = sigma
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let x = chol.solve(&DVector::from_element(n, 1.0));
    let total = x.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numeric("covariance is numerically singular".into()));
    }
    Ok(x / total)
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestPeriod {
    /// Row index in the target panel.
    pub t: usize,
    pub label: Option<String>,
    pub weights: Vec<f64>,
    pub portfolio_return: f64,
    pub value: f64,
    pub ridge: Option<f64>,
    pub condition_number: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestReport {
    pub window: usize,
    pub threshold_c: f64,
    pub periods: Vec<BacktestPeriod>,
    /// Starts at 1; one entry per period after that.
    pub value_curve: Vec<f64>,
}

impl BacktestReport {
    pub fn terminal_value(&self) -> f64 {
        *self.value_curve.last().expect("value curve starts at 1")
    }

    /// One row per period: `t,label,return,value,ridge,condition,w_1..w_N`,
    /// preceded by a `start` row holding the initial value.
    pub fn to_csv_string(&self) -> Result<String> {
        let n = self.periods.first().map_or(0, |p| p.weights.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["t", "label", "portfolio_return", "value", "ridge", "condition_number"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=n).map(|j| format!("w_{j}")));
        w.write_record(&header)?;
        let mut start = vec![String::new(), "start".into(), String::new(), "1".into(), String::new(), String::new()];
        start.extend(std::iter::repeat_n(String::new(), n));
        w.write_record(&start)?;
        for p in &self.periods {
            let mut rec = vec![
                p.t.to_string(),
                p.label.clone().unwrap_or_default(),
                format!("{}", p.portfolio_return),
                format!("{}", p.value),
                p.ridge.map(|r| format!("{r}")).unwrap_or_default(),
                format!("{}", p.condition_number),
            ];
            rec.extend(p.weights.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// For each `t ≥ window`: fit on the trailing `window` rows, assemble the
/// covariance, hold the minimum-variance portfolio over row `t`, and
/// compound `value ← value · (1 + wᵀX_t)`.
pub fn backtest(target: &PanelDataset, plan: &FitPlan, window: usize, c: f64) -> Result<BacktestReport> {
    let t0 = target.periods();
    if window >= t0 {
        return Err(Error::Data(format!("window {window} leaves no periods to trade (T0 = {t0})")));
    }
    if window < 2 {
        return Err(Error::config("window must be at least 2"));
    }
    let mut value = 1.0;
    let mut value_curve = vec![value];
    let mut periods = Vec::with_capacity(t0 - window);
    for t in window..t0 {
        let win = target.window(t - window, t)?;
        let q = plan.loading_space(&win)?;
        let common = project_rows(win.data(), &q);
        let resid = win.data() - &common;
        let cov = covariance_hard_threshold(&common, &resid, c)?;
        let w = min_variance_weights(&cov.matrix)?;
        let ret = w.dot(&target.data().row(t).transpose());
        value *= 1.0 + ret;
        value_curve.push(value);
        periods.push(BacktestPeriod {
            t,
            label: target.time_labels().map(|l| l[t].clone()),
            weights: w.iter().copied().collect(),
            portfolio_return: ret,
            value,
            ridge: cov.ridge,
            condition_number: cov.condition_number(),
        });
    }
    Ok(BacktestReport {
        window,
        threshold_c: c,
        periods,
        value_curve,
    })
}
