//! Monte Carlo harness: synthetic target/source panels with weak factors,
//! per-replication evaluation of the estimators, and summary tables.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{pca_from_eigen, CommonComponents, PanelDataset, PanelRole, PcaMode};
use crate::linalg::{subspace_distance, trace_overlap, OrthonormalBasis};
use crate::select::{default_tau_grid, non_oracle_with_bases};
use crate::transfer::{source_bases, trans_ed, transpca_with_bases, PanelBasis, TargetFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    NonOracle,
    TargetOnly,
    Blind,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Oracle, Method::NonOracle, Method::TargetOnly, Method::Blind];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::NonOracle => "non_oracle",
            Method::TargetOnly => "target_only",
            Method::Blind => "blind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Every source shares the target's weak space up to a perturbation.
    #[default]
    AllInformative,
    /// Sources `1..=K/2` are informative, the rest are not.
    HalfInformative,
}

fn d_k() -> usize {
    4
}
fn d_r0() -> usize {
    3
}
fn d_s() -> usize {
    2
}
fn d_rk() -> Vec<usize> {
    vec![4]
}
fn d_alphas() -> Vec<f64> {
    vec![0.7, 0.6]
}
fn d_eps() -> f64 {
    0.1
}
fn d_ar() -> f64 {
    0.2
}
fn d_reps() -> usize {
    100
}
fn d_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn d_folds() -> usize {
    crate::select::DEFAULT_FOLDS
}
fn d_grid() -> usize {
    crate::select::DEFAULT_GRID_POINTS
}
fn d_tk() -> Vec<usize> {
    vec![200]
}

fn d_one() -> f64 {
    1.0
}

/// One grid cell of the simulation design.
///
/// `tk` and `rk` hold either one value shared by all `k` sources or one value
/// per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(alias = "N")]
    pub n: usize,
    #[serde(alias = "T0")]
    pub t0: usize,
    #[serde(alias = "K", default = "d_k")]
    pub k: usize,
    #[serde(alias = "Tk", default = "d_tk")]
    pub tk: Vec<usize>,
    #[serde(default = "d_r0")]
    pub r0: usize,
    #[serde(default = "d_s")]
    pub s: usize,
    #[serde(default = "d_rk")]
    pub rk: Vec<usize>,
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    /// AR coefficient of the idiosyncratic errors.
    #[serde(default = "d_ar")]
    pub phi: f64,
    /// AR coefficient of the factors.
    #[serde(default = "d_ar")]
    pub varphi: f64,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default = "d_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_grid")]
    pub grid_points: usize,
    /// Upper limit for the weak-count search; defaults to `min(r0, min r_k)`.
    #[serde(default)]
    pub s_max: Option<usize>,
    /// Multiplier on the idiosyncratic errors; 0 gives noiseless panels.
    #[serde(default = "d_one")]
    pub noise_scale: f64,
}

impl ScenarioConfig {
    /// Default design at the given cell.
    pub fn new(k: usize, n: usize, t0: usize, tk: usize) -> Self {
        Self {
            n,
            t0,
            k,
            tk: vec![tk],
            r0: d_r0(),
            s: d_s(),
            rk: d_rk(),
            alphas: d_alphas(),
            epsilon: d_eps(),
            phi: d_ar(),
            varphi: d_ar(),
            scenario: Scenario::AllInformative,
            reps: d_reps(),
            seed: 0,
            methods: d_methods(),
            folds: d_folds(),
            grid_points: d_grid(),
            s_max: None,
            noise_scale: 1.0,
        }
    }

    pub fn tk_of(&self, k: usize) -> usize {
        if self.tk.len() == 1 { self.tk[0] } else { self.tk[k] }
    }

    pub fn rk_of(&self, k: usize) -> usize {
        if self.rk.len() == 1 { self.rk[0] } else { self.rk[k] }
    }

    pub fn rk_list(&self) -> Vec<usize> {
        (0..self.k).map(|k| self.rk_of(k)).collect()
    }

    pub fn informative_count(&self) -> usize {
        match self.scenario {
            Scenario::AllInformative => self.k,
            Scenario::HalfInformative => self.k / 2,
        }
    }

    pub fn effective_s_max(&self) -> usize {
        self.s_max.unwrap_or_else(|| {
            (0..self.k).map(|k| self.rk_of(k)).fold(self.r0, usize::min)
        })
    }

    fn tk_label(&self) -> String {
        let all: Vec<usize> = (0..self.k).map(|k| self.tk_of(k)).collect();
        match all.first() {
            Some(first) if all.iter().all(|t| t == first) => first.to_string(),
            None => String::new(),
            _ => all.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n < 2 || self.t0 < 2 {
            return bad(format!("need N ≥ 2 and T0 ≥ 2, got N = {}, T0 = {}", self.n, self.t0));
        }
        if self.s == 0 || self.s > self.r0 {
            return bad(format!("need 1 ≤ s ≤ r0, got s = {}, r0 = {}", self.s, self.r0));
        }
        if self.r0 > self.n.min(self.t0) {
            return bad(format!("r0 = {} exceeds min(N, T0)", self.r0));
        }
        if 2 * self.s > self.n {
            return bad("N must leave room for a weak space and its complement".into());
        }
        for (name, list) in [("tk", &self.tk), ("rk", &self.rk)] {
            if !(list.len() == 1 || list.len() == self.k) {
                return bad(format!("{name} must have length 1 or K = {}", self.k));
            }
        }
        for k in 0..self.k {
            let (t, r) = (self.tk_of(k), self.rk_of(k));
            if r < self.s || r > self.n || t < 2 || r > t {
                return bad(format!("source {k}: need s ≤ r_k ≤ min(N, T_k), got r_k = {r}, T_k = {t}"));
            }
        }
        if self.alphas.len() != self.s {
            return bad(format!("{} strengths for s = {}", self.alphas.len(), self.s));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("strengths must lie in (0, 1)".into());
        }
        if self.alphas.windows(2).any(|w| w[0] < w[1]) {
            return bad("strengths must be non-increasing".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon must be finite and non-negative".into());
        }
        if !(self.phi.abs() < 1.0 && self.varphi.abs() < 1.0) {
            return bad("AR coefficients must lie in (-1, 1)".into());
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("noise_scale must be finite and non-negative".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        let needs_sources = self.methods.iter().any(|m| *m != Method::TargetOnly);
        if needs_sources && self.k == 0 {
            return bad("transfer methods need at least one source".into());
        }
        if self.scenario == Scenario::HalfInformative && self.k < 2 {
            return bad("the half-informative scenario needs K ≥ 2".into());
        }
        if self.methods.contains(&Method::Oracle) && self.informative_count() == 0 {
            return bad("oracle method needs an informative source".into());
        }
        if self.methods.contains(&Method::NonOracle) {
            if self.folds < 2 || self.grid_points < 2 {
                return bad("cross-validation needs folds ≥ 2 and grid_points ≥ 2".into());
            }
            if self.t0 / self.folds < 2 {
                return bad(format!("T0 = {} is too short for {} folds", self.t0, self.folds));
            }
        }
        let s_max = self.effective_s_max();
        if self.k > 0 && (s_max == 0 || s_max + 1 > self.n) {
            return bad(format!("s_max = {s_max} must lie in 1..N"));
        }
        Ok(())
    }
}

/// `N × m` orthonormal basis from the QR factorisation of a Gaussian draw.
pub fn gen_orthonormal<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<OrthonormalBasis> {
    if m > n {
        return Err(Error::dim(format!("cannot draw {m} orthonormal columns in ℝ^{n}")));
    }
    if m == 0 {
        return Ok(OrthonormalBasis::empty(n));
    }
    OrthonormalBasis::from_qr(gaussian(n, m, 1.0, rng))
}

/// `m` orthonormal columns orthogonal to `q`.
pub fn gen_complement_basis<R: Rng + ?Sized>(
    q: &OrthonormalBasis,
    m: usize,
    rng: &mut R,
) -> Result<OrthonormalBasis> {
    let n = q.ambient_dim();
    if m + q.rank() > n {
        return Err(Error::dim(format!(
            "complement of a rank-{} space in ℝ^{n} has no room for {m} columns",
            q.rank()
        )));
    }
    if m == 0 {
        return Ok(OrthonormalBasis::empty(n));
    }
    let draw = gaussian(n, m, 1.0, rng);
    // the second pass removes what round-off leaves of the first
    let once = q.project_out(&draw);
    OrthonormalBasis::from_qr(q.project_out(&once))
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

/// `x_t = c x_{t-1} + √(1-c²) u_t` started from the stationary `N(0, I)` law.
pub fn gen_ar_series<R: Rng + ?Sized>(t: usize, dim: usize, coeff: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(coeff.abs() < 1.0) {
        return Err(Error::config(format!("AR coefficient {coeff} must lie in (-1, 1)")));
    }
    let mut x = gaussian(t, dim, 1.0, rng);
    let innov = (1.0 - coeff * coeff).sqrt();
    for i in 1..t {
        for j in 0..dim {
            x[(i, j)] = coeff * x[(i - 1, j)] + innov * x[(i, j)];
        }
    }
    Ok(x)
}

/// Loadings of one source together with the seed of its weak part.
#[derive(Debug, Clone)]
pub struct SourceLoadings {
    /// `√N (Q_T, Q_Tᶜ)`.
    pub loadings: DMatrix<f64>,
    /// `Q_T = U Q_seed`.
    pub transferred: OrthonormalBasis,
    /// `‖P_{Q_T} − P_{Q_w}‖_F` against the target weak space.
    pub similarity: f64,
}

/// Random orthogonal `U` close to the identity: QR of `I + E` with
/// `E_ij ~ N(0, ε²/N)`.
fn near_identity<R: Rng + ?Sized>(n: usize, epsilon: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if epsilon == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let e = gaussian(n, n, epsilon / (n as f64).sqrt(), rng);
    Ok(OrthonormalBasis::from_qr(DMatrix::identity(n, n) + e)?.into_inner())
}

fn projector_distance(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    // ‖P_a − P_b‖²_F = rank a + rank b − 2 tr(P_a P_b)
    let sq = (a.rank() + b.rank()) as f64 - 2.0 * trace_overlap(a, b)?;
    Ok(sq.max(0.0).sqrt())
}

/// Source loadings `√N (U Q_seed, complement)`; `similarity` is measured
/// against `qw`.
pub fn gen_loadings_from_seed<R: Rng + ?Sized>(
    rk: usize,
    epsilon: f64,
    seed_basis: &OrthonormalBasis,
    qw: &OrthonormalBasis,
    rng: &mut R,
) -> Result<SourceLoadings> {
    let n = qw.ambient_dim();
    let s = seed_basis.rank();
    if s > rk || rk > n {
        return Err(Error::dim(format!("need s ≤ r_k ≤ N, got s = {s}, r_k = {rk}, N = {n}")));
    }
    let u = near_identity(n, epsilon, rng)?;
    let transferred = OrthonormalBasis::new(u * seed_basis.matrix())?;
    let rest = gen_complement_basis(&transferred, rk - s, rng)?;
    let loadings = transferred.concat(&rest)?.into_inner() * (n as f64).sqrt();
    let similarity = projector_distance(&transferred, qw)?;
    Ok(SourceLoadings {
        loadings,
        transferred,
        similarity,
    })
}

/// Informative source: weak part `U Q_w` with `U` a small rotation.
pub fn gen_informative_loadings<R: Rng + ?Sized>(
    n: usize,
    rk: usize,
    s: usize,
    epsilon: f64,
    qw: &OrthonormalBasis,
    rng: &mut R,
) -> Result<SourceLoadings> {
    if qw.ambient_dim() != n || qw.rank() != s {
        return Err(Error::dim(format!("Q_w must be {n} × {s}")));
    }
    gen_loadings_from_seed(rk, epsilon, qw, qw, rng)
}

/// Non-informative source: weak part `U Q̃_w` with `Q̃_w` drawn from the
/// orthogonal complement of `Q_w`.
pub fn gen_noninformative_loadings<R: Rng + ?Sized>(
    n: usize,
    rk: usize,
    s: usize,
    epsilon: f64,
    qw: &OrthonormalBasis,
    rng: &mut R,
) -> Result<SourceLoadings> {
    if qw.ambient_dim() != n || qw.rank() != s {
        return Err(Error::dim(format!("Q_w must be {n} × {s}")));
    }
    let other = gen_complement_basis(qw, s, rng)?;
    gen_loadings_from_seed(rk, epsilon, &other, qw, rng)
}

/// Synthetic target and sources with their ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub true_qw: OrthonormalBasis,
    pub true_qs: OrthonormalBasis,
    /// `Λ⁽⁰⁾ = (Q_w D_w^{1/2}, √N Q_s)`.
    pub target_loadings: DMatrix<f64>,
    pub target_factors: DMatrix<f64>,
    pub target: PanelDataset,
    pub sources: Vec<PanelDataset>,
    pub source_loadings: Vec<DMatrix<f64>>,
    /// Realised `‖P_{Q_T} − P_{Q_w}‖_F` per source.
    pub similarities: Vec<f64>,
    /// Indices of the informative sources.
    pub informative: Vec<usize>,
}

impl GeneratedWorld {
    /// `F⁽⁰⁾ Λ⁽⁰⁾ᵀ`.
    pub fn true_common(&self) -> DMatrix<f64> {
        &self.target_factors * self.target_loadings.transpose()
    }

    pub fn true_loading_space(&self) -> Result<OrthonormalBasis> {
        self.true_qw.concat(&self.true_qs)
    }
}

fn panel<R: Rng + ?Sized>(
    id: String,
    role: PanelRole,
    t: usize,
    loadings: &DMatrix<f64>,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<(PanelDataset, DMatrix<f64>)> {
    let f = gen_ar_series(t, loadings.ncols(), cfg.varphi, rng)?;
    let e = gen_ar_series(t, loadings.nrows(), cfg.phi, rng)?;
    let x = &f * loadings.transpose() + e * cfg.noise_scale;
    Ok((PanelDataset::new(id, role, x)?, f))
}

pub fn generate_world<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<GeneratedWorld> {
    cfg.validate()?;
    let n = cfg.n;
    let nf = n as f64;
    let qw = gen_orthonormal(n, cfg.s, rng)?;
    let qs = gen_complement_basis(&qw, cfg.r0 - cfg.s, rng)?;
    let mut lambda0 = DMatrix::zeros(n, cfg.r0);
    for (j, a) in cfg.alphas.iter().enumerate() {
        lambda0.set_column(j, &(qw.matrix().column(j) * nf.powf(*a).sqrt()));
    }
    for j in 0..cfg.r0 - cfg.s {
        lambda0.set_column(cfg.s + j, &(qs.matrix().column(j) * nf.sqrt()));
    }
    let (target, f0) = panel("target".into(), PanelRole::Target, cfg.t0, &lambda0, cfg, rng)?;

    let informative: Vec<usize> = (0..cfg.informative_count()).collect();
    // one seed space shared by every non-informative source
    let q_tilde = if informative.len() < cfg.k {
        Some(gen_complement_basis(&qw, cfg.s, rng)?)
    } else {
        None
    };
    let mut sources = Vec::with_capacity(cfg.k);
    let mut source_loadings = Vec::with_capacity(cfg.k);
    let mut similarities = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let sl = if k < informative.len() {
            gen_informative_loadings(n, cfg.rk_of(k), cfg.s, cfg.epsilon, &qw, rng)?
        } else {
            let seed = q_tilde.as_ref().expect("drawn when some source is non-informative");
            gen_loadings_from_seed(cfg.rk_of(k), cfg.epsilon, seed, &qw, rng)?
        };
        let (p, _) = panel(format!("source{}", k + 1), PanelRole::Source, cfg.tk_of(k), &sl.loadings, cfg, rng)?;
        sources.push(p);
        similarities.push(sl.similarity);
        source_loadings.push(sl.loadings);
    }
    Ok(GeneratedWorld {
        true_qw: qw,
        true_qs: qs,
        target_loadings: lambda0,
        target_factors: f0,
        target,
        sources,
        source_loadings,
        similarities,
        informative,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_sets(selected: &[usize], truth: &[usize], k: usize) -> Self {
        let sel: BTreeSet<usize> = selected.iter().copied().collect();
        let tru: BTreeSet<usize> = truth.iter().copied().collect();
        let mut c = Confusion::default();
        for i in 0..k {
            match (sel.contains(&i), tru.contains(&i)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> Option<f64> {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn exact(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }
}

/// Per-method accuracy on one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    /// Subspace distance between estimated and true loading spaces.
    pub d: f64,
    /// `‖Ĉ − FΛᵀ‖²_F / (N T₀)`.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub scores: Vec<MethodScore>,
    /// Weak strengths from the target-only fit (the trailing `s` of `r0`).
    pub alpha_target: Option<Vec<f64>>,
    /// Weak strengths from the transfer fit.
    pub alpha_trans: Option<Vec<f64>>,
    pub s_hat: Option<usize>,
    pub confusion: Option<Confusion>,
    pub tau: Option<f64>,
    /// Mean realised similarity over informative sources.
    pub similarity: Option<f64>,
}

impl ReplicationResult {
    pub fn score(&self, m: Method) -> Option<&MethodScore> {
        self.scores.iter().find(|s| s.method == m)
    }

    /// Flattened metrics in a fixed order; `None` marks an undefined value.
    pub fn metrics(&self, s: usize) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        for m in Method::ALL {
            if let Some(sc) = self.score(m) {
                out.push((format!("d_{}", m.name()), Some(sc.d)));
            }
        }
        for m in Method::ALL {
            if let Some(sc) = self.score(m) {
                out.push((format!("mse_{}", m.name()), Some(sc.mse)));
            }
        }
        if let Some(a) = &self.alpha_trans {
            for j in 0..s {
                out.push((format!("alpha_trans_{}", j + 1), a.get(j).copied()));
            }
        }
        if let Some(a) = &self.alpha_target {
            for j in 0..s {
                out.push((format!("alpha_target_{}", j + 1), a.get(j).copied()));
            }
        }
        if let Some(sh) = self.s_hat {
            out.push(("s_hat".into(), Some(sh as f64)));
            out.push(("s_exact".into(), Some(f64::from(u8::from(sh == s)))));
            out.push(("s_under".into(), Some(f64::from(u8::from(sh < s)))));
        }
        if let Some(c) = &self.confusion {
            out.push(("tpr".into(), c.tpr()));
            out.push(("tnr".into(), c.tnr()));
            out.push(("precision".into(), c.precision()));
            out.push(("selection_exact".into(), Some(f64::from(u8::from(c.exact())))));
        }
        if let Some(t) = self.tau {
            out.push(("tau".into(), Some(t)));
        }
        if let Some(sim) = self.similarity {
            out.push(("similarity".into(), Some(sim)));
        }
        out
    }
}

fn mse(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm_squared() / (truth.nrows() * truth.ncols()) as f64
}

/// Runs every requested method on one world.
pub fn evaluate_replication(
    world: &GeneratedWorld,
    cfg: &ScenarioConfig,
) -> Result<ReplicationResult> {
    let (r0, s) = (cfg.r0, cfg.s);
    let truth_space = world.true_loading_space()?;
    let truth_common = world.true_common();
    let target = &world.target;
    let fit = TargetFit::new(target)?;
    let has = |m: Method| cfg.methods.contains(&m);

    let bases: Vec<PanelBasis> = if has(Method::Oracle) || has(Method::Blind) || has(Method::NonOracle) {
        source_bases(&world.sources, &cfg.rk_list())?
    } else {
        Vec::new()
    };

    let mut out = ReplicationResult {
        scores: Vec::new(),
        alpha_target: None,
        alpha_trans: None,
        s_hat: None,
        confusion: None,
        tau: None,
        similarity: None,
    };
    let mut push = |m: Method, space: OrthonormalBasis, common: DMatrix<f64>| -> Result<()> {
        out.scores.push(MethodScore {
            method: m,
            d: subspace_distance(&space, &truth_space)?,
            mse: mse(&common, &truth_common),
        });
        Ok(())
    };

    let mut alpha_trans = None;
    let mut s_hat = None;
    if has(Method::Oracle) {
        let chosen: Vec<&PanelBasis> = world.informative.iter().map(|&k| &bases[k]).collect();
        let est = transpca_with_bases(target, &fit, &chosen, r0, s, None)?;
        alpha_trans = Some(est.weak_strengths.alphas.clone());
        if let Some(wp) = &est.weighted {
            s_hat = Some(trans_ed(wp, cfg.effective_s_max())?);
        }
        push(Method::Oracle, est.loading_space()?, est.common_components()?)?;
    }
    let mut confusion = None;
    let mut tau = None;
    if has(Method::NonOracle) {
        let grid = default_tau_grid(s, cfg.grid_points)?;
        let fitted = non_oracle_with_bases(target, &fit, &bases, r0, s, cfg.folds, &grid)?;
        confusion = Some(Confusion::from_sets(
            &fitted.selection.selected_indices,
            &world.informative,
            cfg.k,
        ));
        tau = Some(fitted.cv.tau);
        push(Method::NonOracle, fitted.estimate.loading_space()?, fitted.estimate.common_components()?)?;
    }
    let mut alpha_target = None;
    if has(Method::TargetOnly) {
        let est = pca_from_eigen(target, &fit.covariance, &fit.eigen, r0, PcaMode::Target)?;
        let a = &est.strengths.as_ref().expect("target mode yields strengths").alphas;
        alpha_target = Some(a[r0 - s..].to_vec());
        push(Method::TargetOnly, est.basis.clone(), est.common_components()?)?;
    }
    if has(Method::Blind) {
        let all: Vec<&PanelBasis> = bases.iter().collect();
        let est = transpca_with_bases(target, &fit, &all, r0, s, None)?;
        push(Method::Blind, est.loading_space()?, est.common_components()?)?;
    }
    out.alpha_trans = alpha_trans;
    out.alpha_target = alpha_target;
    out.s_hat = s_hat;
    out.confusion = confusion;
    out.tau = tau;
    if !world.informative.is_empty() {
        let sum: f64 = world.informative.iter().map(|&k| world.similarities[k]).sum();
        out.similarity = Some(sum / world.informative.len() as f64);
    }
    Ok(out)
}

/// Private stream for replication `index`.
pub fn replication_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Independent replications, evaluated in parallel and returned in index order.
pub fn run_replications(cfg: &ScenarioConfig, reps: usize, seed: u64) -> Result<Vec<ReplicationResult>> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = replication_rng(seed, i);
            let world = generate_world(cfg, &mut rng)?;
            evaluate_replication(&world, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: Option<f64>,
    /// Sample standard deviation (`n − 1` denominator; 0 for one value).
    pub sd: Option<f64>,
    /// Replications where the metric was defined.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T0")]
    pub t0: usize,
    #[serde(rename = "Tk")]
    pub tk: String,
    pub reps: usize,
    pub metrics: Vec<MetricSummary>,
}

impl SummaryRow {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(|m| m.mean)
    }

    pub fn sd(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(|m| m.sd)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

fn summarize(name: String, values: &[f64]) -> MetricSummary {
    let count = values.len();
    if count == 0 {
        return MetricSummary { name, mean: None, sd: None, count };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let sd = if count == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    };
    MetricSummary { name, mean: Some(mean), sd: Some(sd), count }
}

impl SummaryRow {
    pub fn from_replications(cfg: &ScenarioConfig, results: &[ReplicationResult]) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for r in results {
            for (name, v) in r.metrics(cfg.s) {
                let idx = match names.iter().position(|n| *n == name) {
                    Some(i) => i,
                    None => {
                        names.push(name);
                        values.push(Vec::new());
                        names.len() - 1
                    }
                };
                if let Some(v) = v {
                    values[idx].push(v);
                }
            }
        }
        SummaryRow {
            k: cfg.k,
            n: cfg.n,
            t0: cfg.t0,
            tk: cfg.tk_label(),
            reps: results.len(),
            metrics: names.into_iter().zip(&values).map(|(n, v)| summarize(n, v)).collect(),
        }
    }
}

/// One summary row for `cfg` using `reps` replications derived from `seed`.
pub fn run_scenario(cfg: &ScenarioConfig, reps: usize, seed: u64) -> Result<SummaryTable> {
    let results = run_replications(cfg, reps, seed)?;
    Ok(SummaryTable {
        rows: vec![SummaryRow::from_replications(cfg, &results)],
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl SummaryTable {
    pub fn extend(&mut self, other: SummaryTable) {
        self.rows.extend(other.rows);
    }

    fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            for m in &row.metrics {
                if !names.contains(&m.name) {
                    names.push(m.name.clone());
                }
            }
        }
        names
    }

    /// Header `K,N,T0,Tk,reps` then `<metric>_mean,<metric>_sd` per metric.
    pub fn to_csv_string(&self) -> Result<String> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["K", "N", "T0", "Tk", "reps"].iter().map(|s| s.to_string()).collect();
        for n in &names {
            header.push(format!("{n}_mean"));
            header.push(format!("{n}_sd"));
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.k.to_string(),
                row.n.to_string(),
                row.t0.to_string(),
                row.tk.clone(),
                row.reps.to_string(),
            ];
            for n in &names {
                let m = row.metric(n);
                rec.push(fmt_opt(m.and_then(|m| m.mean)));
                rec.push(fmt_opt(m.and_then(|m| m.sd)));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes CSV or JSON depending on the extension of `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => self.to_json_string()?,
            Some(e) if e.eq_ignore_ascii_case("csv") => self.to_csv_string()?,
            _ => {
                return Err(Error::config(format!(
                    "output '{}' must end in .csv or .json",
                    path.display()
                )))
            }
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Parses either one scenario object or an array of them.
pub fn parse_configs(text: &str) -> Result<Vec<ScenarioConfig>> {
    let list: Vec<ScenarioConfig> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text)?
    } else {
        vec![serde_json::from_str(text)?]
    };
    if list.is_empty() {
        return Err(Error::config("no scenarios in configuration"));
    }
    for c in &list {
        c.validate()?;
    }
    Ok(list)
}
