//! Command-line front end: `simulate`, `estimate`, `select`, `backtest`.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a data error. Nothing is
//! written to the output path unless the command succeeds.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::appkit::io::{load_panel_csv, LoadOptions};
use crate::appkit::portfolio::{backtest, DEFAULT_THRESHOLD_C};
use crate::appkit::rolling::{FitMethod, FitPlan, PlanOptions};
use crate::error::{Error, Result};
use crate::estimate::{
    default_r_max, er_num_factors, factor_strengths_target, pca_estimate, CommonComponents, PanelDataset,
    PanelRole, PcaMode,
};
use crate::select::{default_tau_grid, non_oracle_transpca, CvOutcome, DEFAULT_FOLDS, DEFAULT_GRID_POINTS};
use crate::simgen::{parse_configs, run_scenario, SummaryTable};
use crate::transfer::{oracle_transpca, panel_basis, source_bases, trans_ed, weighted_projection};

/// `auto` or a fixed count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Count {
    Auto,
    Fixed(usize),
}

impl FromStr for Count {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Count::Auto);
        }
        s.parse::<usize>()
            .map(Count::Fixed)
            .map_err(|_| format!("expected `auto` or a non-negative integer, got '{s}'"))
    }
}

/// `auto`, one count shared by all sources, or a comma-separated list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceCounts {
    Auto,
    List(Vec<usize>),
}

impl FromStr for SourceCounts {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(SourceCounts::Auto);
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(SourceCounts::List)
            .map_err(|_| format!("expected `auto` or comma-separated integers, got '{s}'"))
    }
}

#[derive(Parser, Debug)]
#[command(name = "transpca", version, about = "Factor models with weak factors, estimated with help from auxiliary panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run Monte Carlo scenarios and write a summary table.
    Simulate(SimulateArgs),
    /// Estimate the target factor model.
    Estimate(EstimateArgs),
    /// Cross-validate the selection threshold and pick informative sources.
    Select(SelectArgs),
    /// Rolling minimum-variance portfolio backtest.
    Backtest(BacktestArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Centre and scale every column to unit sample variance.
    #[arg(long, global = true)]
    standardize: bool,
    /// Centre every column.
    #[arg(long, global = true)]
    demean: bool,
    /// Fill empty or NA cells with the column mean.
    #[arg(long, global = true)]
    impute_mean: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON file with one scenario or an array of scenarios.
    #[arg(long)]
    config: PathBuf,
    /// Override the replication count of every scenario.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the seed of every scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path ending in .csv or .json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Target panel CSV.
    #[arg(long)]
    target: PathBuf,
    /// Source panel CSVs.
    #[arg(long, num_args = 1..)]
    sources: Vec<PathBuf>,
    /// Number of target factors.
    #[arg(long, default_value = "auto")]
    r0: Count,
    /// Number of weak factors shared with the sources.
    #[arg(long, default_value = "auto")]
    s: Count,
    /// Factor numbers of the sources.
    #[arg(long, default_value = "auto")]
    rk: SourceCounts,
    /// Strength below which a target factor counts as weak when no sources
    /// are given.
    #[arg(long, default_value_t = 0.9)]
    weak_threshold: f64,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Number of equispaced threshold values on [0, s].
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    TargetOnly,
    Blind,
    NonOracle,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trailing rows used to fit each period.
    #[arg(long, default_value_t = 30)]
    window: usize,
    /// Hard-threshold constant C.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_C)]
    threshold_c: f64,
    #[arg(long, value_enum, default_value = "non-oracle")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    /// Output path ending in .csv or .json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Simulate(a) => &a.common,
        Command::Estimate(a) => &a.common,
        Command::Select(a) => &a.common,
        Command::Backtest(a) => &a.common,
    };
    let threads = common.threads;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Data(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Select(a) => select(a),
        Command::Backtest(a) => run_backtest(a),
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn output_format(path: &Path, allowed: &[Format]) -> CliResult<Format> {
    let fmt = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("csv") => Some(Format::Csv),
        Some("json") => Some(Format::Json),
        _ => None,
    };
    match fmt {
        Some(f) if allowed.contains(&f) => Ok(f),
        _ => {
            let names: Vec<&str> = allowed
                .iter()
                .map(|f| if *f == Format::Csv { ".csv" } else { ".json" })
                .collect();
            Err(usage(format!("output '{}' must end in {}", path.display(), names.join(" or "))))
        }
    }
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write '{}': {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let format = output_format(&a.out, &[Format::Csv, Format::Json])?;
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| Failure::Data(format!("cannot read '{}': {e}", a.config.display())))?;
    let configs = parse_configs(&text).map_err(|e| match e {
        Error::Json(j) => Failure::Usage(format!("invalid configuration: {j}")),
        other => other.into(),
    })?;
    let mut table = SummaryTable::default();
    for cfg in &configs {
        let reps = a.reps.unwrap_or(cfg.reps);
        let seed = a.seed.unwrap_or(cfg.seed);
        if reps == 0 {
            return Err(usage("--reps must be at least 1"));
        }
        table.extend(run_scenario(cfg, reps, seed)?);
    }
    let out = match format {
        Format::Csv => table.to_csv_string()?,
        Format::Json => {
            let mut s = table.to_json_string()?;
            s.push('\n');
            s
        }
    };
    write_output(&a.out, &out)
}

fn load_options(c: &CommonArgs) -> LoadOptions {
    LoadOptions {
        standardize: c.standardize,
        demean: c.demean,
        impute_mean: c.impute_mean,
    }
}

struct Panels {
    target: PanelDataset,
    sources: Vec<PanelDataset>,
}

fn load_panels(m: &ModelArgs, c: &CommonArgs) -> CliResult<Panels> {
    let opts = load_options(c);
    let target = load_panel_csv(&m.target, PanelRole::Target, opts)?;
    let sources = m
        .sources
        .iter()
        .map(|p| load_panel_csv(p, PanelRole::Source, opts))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = sources.iter().find(|s| s.units() != target.units()) {
        return Err(Failure::Data(format!(
            "source '{}' has {} columns but the target has {}",
            bad.id(),
            bad.units(),
            target.units()
        )));
    }
    Ok(Panels { target, sources })
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum Rule {
    Given,
    EigenvalueRatio,
    TransEd,
    StrengthThreshold,
}

#[derive(Debug, Clone, Serialize)]
struct SourceInfo {
    id: String,
    periods: usize,
    r_k: usize,
}

struct Resolved {
    r0: usize,
    r0_rule: Rule,
    s: usize,
    s_rule: Rule,
    r_k: Vec<usize>,
    r_k_rule: Rule,
}

fn resolve(m: &ModelArgs, p: &Panels) -> CliResult<Resolved> {
    let t = &p.target;
    let (r0, r0_rule) = match m.r0 {
        Count::Fixed(0) => return Err(usage("--r0 must be at least 1")),
        Count::Fixed(k) => (k, Rule::Given),
        Count::Auto => (
            er_num_factors(&t.covariance(), default_r_max(t.units(), t.periods()))?,
            Rule::EigenvalueRatio,
        ),
    };
    if r0 > t.units().min(t.periods()) {
        return Err(usage(format!("--r0 {r0} exceeds min(N, T0) = {}", t.units().min(t.periods()))));
    }
    let (r_k, r_k_rule) = match &m.rk {
        SourceCounts::Auto => (
            p.sources
                .iter()
                .map(|s| er_num_factors(&s.covariance(), default_r_max(s.units(), s.periods())))
                .collect::<Result<Vec<_>>>()?,
            Rule::EigenvalueRatio,
        ),
        SourceCounts::List(v) if v.len() == 1 => (vec![v[0]; p.sources.len()], Rule::Given),
        SourceCounts::List(v) if v.len() == p.sources.len() => (v.clone(), Rule::Given),
        SourceCounts::List(v) => {
            return Err(usage(format!("--rk has {} values for {} sources", v.len(), p.sources.len())))
        }
    };
    if let Some((i, _)) = r_k.iter().enumerate().find(|(i, r)| **r == 0 || **r > p.sources[*i].units().min(p.sources[*i].periods())) {
        return Err(usage(format!("--rk value for source '{}' is out of range", p.sources[i].id())));
    }
    if !(m.weak_threshold.is_finite()) {
        return Err(usage("--weak-threshold must be finite"));
    }
    let (s, s_rule) = match m.s {
        Count::Fixed(k) => (k, Rule::Given),
        Count::Auto if p.sources.is_empty() => {
            let fs = factor_strengths_target(t, r0)?;
            (fs.weak_count(m.weak_threshold).min(r0), Rule::StrengthThreshold)
        }
        Count::Auto => {
            let s_max = r_k.iter().copied().fold(r0, usize::min).min(t.units() - 1);
            let target_basis = panel_basis(t, r0)?;
            let bases = source_bases(&p.sources, &r_k)?;
            let wp = weighted_projection(std::iter::once(&target_basis).chain(bases.iter()))?;
            (trans_ed(&wp, s_max)?, Rule::TransEd)
        }
    };
    if s > r0 {
        return Err(usage(format!("--s {s} exceeds r0 = {r0}")));
    }
    if s > 0 {
        if let Some(&mn) = r_k.iter().min() {
            if s > mn {
                return Err(usage(format!("--s {s} exceeds the smallest source factor number {mn}")));
            }
        }
    }
    Ok(Resolved {
        r0,
        r0_rule,
        s,
        s_rule,
        r_k,
        r_k_rule,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn source_info(p: &Panels, r_k: &[usize]) -> Vec<SourceInfo> {
    p.sources
        .iter()
        .zip(r_k)
        .map(|(s, &r)| SourceInfo {
            id: s.id().to_string(),
            periods: s.periods(),
            r_k: r,
        })
        .collect()
}

#[derive(Serialize)]
struct EstimateOutput {
    target: String,
    units: usize,
    periods: usize,
    r0: usize,
    r0_rule: Rule,
    s: usize,
    s_rule: Rule,
    r_k_rule: Rule,
    sources: Vec<SourceInfo>,
    target_strengths: Vec<f64>,
    target_strengths_flagged: Vec<usize>,
    weak_strengths: Option<Vec<f64>>,
    weighted_eigenvalues: Option<Vec<f64>>,
    target_only_fallback: bool,
    /// `N × r0`, weak columns first.
    loadings: Vec<Vec<f64>>,
    /// `T0 × r0`.
    factors: Vec<Vec<f64>>,
    common_component_mse: f64,
}

fn estimate(a: EstimateArgs) -> CliResult<()> {
    output_format(&a.out, &[Format::Json])?;
    let panels = load_panels(&a.model, &a.common)?;
    let r = resolve(&a.model, &panels)?;
    let t = &panels.target;
    let strengths = factor_strengths_target(t, r.r0)?;
    let (loadings, factors, common, weak, eig, fallback) = if r.s == 0 {
        let est = pca_estimate(t, r.r0, PcaMode::Target)?;
        let c = est.common_components()?;
        (est.loadings, est.factors, c, None, None, false)
    } else {
        let est = oracle_transpca(t, &panels.sources, r.r0, r.s, &r.r_k, None)?;
        let c = est.common_components()?;
        (
            est.loadings(),
            est.factors(),
            c,
            Some(est.weak_strengths.alphas.clone()),
            est.weighted.as_ref().map(|w| w.eigen.values.clone()),
            est.target_only_fallback,
        )
    };
    let mse = (t.data() - common).norm_squared() / (t.units() * t.periods()) as f64;
    let out = EstimateOutput {
        target: t.id().to_string(),
        units: t.units(),
        periods: t.periods(),
        r0: r.r0,
        r0_rule: r.r0_rule,
        s: r.s,
        s_rule: r.s_rule,
        r_k_rule: r.r_k_rule,
        sources: source_info(&panels, &r.r_k),
        target_strengths_flagged: strengths.out_of_range(),
        target_strengths: strengths.alphas,
        weak_strengths: weak,
        weighted_eigenvalues: eig,
        target_only_fallback: fallback,
        loadings: rows_of(&loadings),
        factors: rows_of(&factors),
        common_component_mse: mse,
    };
    write_output(&a.out, &to_json(&out)?)
}

#[derive(Serialize)]
struct SelectOutput {
    target: String,
    r0: usize,
    s: usize,
    s_rule: Rule,
    sources: Vec<SourceInfo>,
    cross_validation: CvOutcome,
    selected: Vec<String>,
    selected_indices: Vec<usize>,
    overlap_scores: Vec<f64>,
    iterations: usize,
    converged: bool,
    empty_fallback: bool,
    objective_trace: Vec<f64>,
    weak_strengths: Vec<f64>,
}

fn select(a: SelectArgs) -> CliResult<()> {
    output_format(&a.out, &[Format::Json])?;
    if a.model.sources.is_empty() {
        return Err(usage("select needs at least one --sources panel"));
    }
    if a.folds < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    if a.grid < 2 {
        return Err(usage("--grid must be at least 2"));
    }
    let panels = load_panels(&a.model, &a.common)?;
    let r = resolve(&a.model, &panels)?;
    if r.s == 0 {
        return Err(Failure::Data("no shared weak factors (s = 0); nothing to select".into()));
    }
    let grid = default_tau_grid(r.s, a.grid)?;
    let fit = non_oracle_transpca(&panels.target, &panels.sources, r.r0, r.s, &r.r_k, a.folds, &grid)?;
    let sel = fit.selection;
    let out = SelectOutput {
        target: panels.target.id().to_string(),
        r0: r.r0,
        s: r.s,
        s_rule: r.s_rule,
        sources: source_info(&panels, &r.r_k),
        cross_validation: fit.cv,
        selected: sel.selected,
        selected_indices: sel.selected_indices,
        overlap_scores: sel.overlap_scores,
        iterations: sel.iterations,
        converged: sel.converged,
        empty_fallback: sel.empty_fallback,
        objective_trace: sel.objective_trace,
        weak_strengths: fit.estimate.weak_strengths.alphas,
    };
    write_output(&a.out, &to_json(&out)?)
}

fn run_backtest(a: BacktestArgs) -> CliResult<()> {
    let format = output_format(&a.out, &[Format::Csv, Format::Json])?;
    if !(a.threshold_c >= 0.0) {
        return Err(usage("--threshold-c must be non-negative"));
    }
    let panels = load_panels(&a.model, &a.common)?;
    let r = resolve(&a.model, &panels)?;
    if a.window < r.r0 + 2 {
        return Err(usage(format!("--window must be at least r0 + 2 = {}", r.r0 + 2)));
    }
    let mut method = match a.method {
        MethodArg::TargetOnly => FitMethod::TargetOnly,
        MethodArg::Blind => FitMethod::Blind,
        MethodArg::NonOracle => FitMethod::NonOracle,
    };
    if r.s == 0 || panels.sources.is_empty() {
        method = FitMethod::TargetOnly;
    }
    let options = PlanOptions {
        folds: a.folds,
        grid_points: a.grid,
    };
    let plan = FitPlan::new(&panels.target, &panels.sources, &r.r_k, method, r.r0, r.s, &options)?;
    let report = backtest(&panels.target, &plan, a.window, a.threshold_c)?;
    let text = match format {
        Format::Csv => report.to_csv_string()?,
        Format::Json => to_json(&report)?,
    };
    write_output(&a.out, &text)
}
