//! Command-line front end: run configurations, experiment runs and the
//! files they leave behind.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::engine::{anneal, AffineModel, AnnealOutcome, Schedule};
use crate::error::{Error, Result};
use crate::quadrature::interpolate_sorted;
use crate::side_channel::{
    best_linear_cost, run_at_lambda, snr_of, sweep_lambda, SideChannelGrids, SideChannelParams,
    SideChannelProblem, SweepPoint, LAMBDA_LADDER,
};
use crate::wce::{
    best_affine_cost, count_steps, count_steps_of_mapping, step_deviation, WceGrids, WceParams, WceProblem,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Jump threshold used when steps are counted from a mapping file alone.
const FILE_JUMP_TOL: f64 = 1.0;

/// Literature constants shipped with the crate.
pub const LITERATURE: &str = include_str!("../data/literature.csv");

#[derive(Debug, Parser)]
#[command(name = "detanneal", version, about = "Deterministic annealing for Witsenhausen-type control problems")]
pub struct Cli {
    /// Override the configured random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write per-iteration free energies (inner_trace.csv).
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Anneal the problem described by a configuration file.
    Run { config: PathBuf },
    /// Cost of a first-stage mapping given as `x0,f1` (or `x0,f1,g2`) CSV.
    EvalMapping {
        csv: PathBuf,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 1001)]
        x0_nodes: usize,
    },
    /// Side-channel run with λ searched for a target side power.
    Sweep {
        config: PathBuf,
        #[arg(long = "target-bsnr")]
        target_bsnr: f64,
        #[arg(long, default_value_t = 0.2)]
        tol: f64,
    },
    /// Cost comparison table of the runs below a directory.
    Table { dir: PathBuf },
    /// Gnuplot data files for a finished run.
    PlotData { dir: PathBuf },
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_NUMERIC
    }
}

/// Parse arguments, dispatch, print results and return the exit code.
pub fn main_with(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run { config } => {
            let mut cfg = RunConfig::load(config)?;
            if let Some(seed) = cli.seed {
                cfg.schedule.rng_seed = seed;
            }
            let summary = run(&cfg, cli.verbose)?;
            Ok(summary.render())
        }
        Command::Sweep { config, target_bsnr, tol } => {
            let mut cfg = RunConfig::load(config)?;
            if cfg.problem != ProblemKind::SideChannel {
                return Err(Error::Config {
                    field: "problem".into(),
                    reason: "sweep needs problem = side-channel".into(),
                });
            }
            if let Some(seed) = cli.seed {
                cfg.schedule.rng_seed = seed;
            }
            cfg.target_b_snr = Some(*target_bsnr);
            cfg.b_snr_tol = *tol;
            let summary = run(&cfg, cli.verbose)?;
            Ok(summary.render())
        }
        Command::EvalMapping { csv, k, sigma, x0_nodes } => {
            let report = eval_mapping(csv, *k, *sigma, *x0_nodes)?;
            Ok(report.render())
        }
        Command::Table { dir } => table(dir).map(|t| t.text),
        Command::PlotData { dir } => {
            let files = plot_data(dir)?;
            Ok(files.iter().map(|f| format!("{}\n", f.display())).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Wce,
    SideChannel,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Wce => "wce",
            ProblemKind::SideChannel => "side-channel",
        }
    }
}

/// A parsed configuration file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub k: f64,
    pub sigma_x0: f64,
    pub lambda: f64,
    pub target_b_snr: Option<f64>,
    pub b_snr_tol: f64,
    pub schedule: Schedule,
    pub wce_grids: WceGrids,
    pub slope_floor: f64,
    pub sc_grids: SideChannelGrids,
    pub output: PathBuf,
    /// Key-value pairs as written in the file.
    pub entries: Vec<(String, String)>,
}

/// Perturbation size used by the problem configurations unless overridden.
/// Phase transitions here are first order and need a sizeable nucleus.
pub const PROBLEM_PERTURB_EPS: f64 = 0.3;

const COMMON_KEYS: &[&str] = &[
    "problem",
    "k",
    "sigma",
    "output",
    "t_init",
    "alpha",
    "t_min",
    "perturb_eps",
    "merge_tol",
    "inner_tol",
    "max_inner_iters",
    "max_models",
    "prune_mass",
    "seed",
    "x0_nodes",
    "truncation",
    "noise_window",
    "table_step",
];
const WCE_KEYS: &[&str] = &["y_spacing", "slope_floor"];
const SC_KEYS: &[&str] = &["lambda", "target_b_snr", "b_snr_tol", "y1_nodes", "y3_nodes"];

impl RunConfig {
    /// Read a configuration file. A relative `output` is taken relative to
    /// the file's directory; without one, a directory named after the
    /// file's stem is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        Self::parse(&text, base, stem)
    }

    pub fn parse(text: &str, base: &Path, stem: &str) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let map: BTreeMap<&str, &str> = entries.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let problem = match map.get("problem").copied() {
            Some("wce") => ProblemKind::Wce,
            Some("side-channel") | Some("side_channel") => ProblemKind::SideChannel,
            Some(other) => {
                return Err(Error::Config {
                    field: "problem".into(),
                    reason: format!("expected `wce` or `side-channel`, got `{other}`"),
                })
            }
            None => {
                return Err(Error::Config {
                    field: "problem".into(),
                    reason: "missing".into(),
                })
            }
        };
        let own: &[&str] = match problem {
            ProblemKind::Wce => WCE_KEYS,
            ProblemKind::SideChannel => SC_KEYS,
        };
        for (key, _) in &entries {
            if !COMMON_KEYS.contains(&key.as_str()) && !own.contains(&key.as_str()) {
                let reason = if WCE_KEYS.contains(&key.as_str()) || SC_KEYS.contains(&key.as_str()) {
                    format!("not used by problem {}", problem.name())
                } else {
                    "unknown key".to_string()
                };
                return Err(Error::Config { field: key.clone(), reason });
            }
        }

        let real = |key: &str, default: f64| -> Result<f64> { map.get(key).map_or(Ok(default), |v| parse_real(key, v)) };
        let count = |key: &str, default: usize| -> Result<usize> {
            map.get(key).map_or(Ok(default), |v| {
                v.parse().map_err(|_| Error::Config {
                    field: key.into(),
                    reason: format!("expected a non-negative integer, got `{v}`"),
                })
            })
        };
        let optional = |key: &str| -> Result<Option<f64>> { map.get(key).map(|v| parse_real(key, v)).transpose() };

        let defaults = Schedule::default();
        let schedule = Schedule {
            t_init: optional("t_init")?,
            alpha: real("alpha", defaults.alpha)?,
            t_min: optional("t_min")?,
            perturb_eps: real("perturb_eps", PROBLEM_PERTURB_EPS)?,
            merge_tol: real("merge_tol", defaults.merge_tol)?,
            inner_tol: real("inner_tol", defaults.inner_tol)?,
            max_inner_iters: count("max_inner_iters", defaults.max_inner_iters)?,
            max_models: count("max_models", defaults.max_models)?,
            prune_mass: real("prune_mass", defaults.prune_mass)?,
            rng_seed: map.get("seed").map_or(Ok(defaults.rng_seed), |v| {
                v.parse().map_err(|_| Error::Config {
                    field: "seed".into(),
                    reason: format!("expected a non-negative integer, got `{v}`"),
                })
            })?,
        };
        schedule.validate()?;

        let wd = WceGrids::default();
        let wce_grids = WceGrids {
            x0_nodes: count("x0_nodes", wd.x0_nodes)?,
            truncation: real("truncation", wd.truncation)?,
            noise_window: real("noise_window", wd.noise_window)?,
            y_spacing: real("y_spacing", wd.y_spacing)?,
            table_step: real("table_step", wd.table_step)?,
        };
        let slope_floor = real("slope_floor", 0.0)?;
        let sd = SideChannelGrids::default();
        let sc_grids = SideChannelGrids {
            x0_nodes: count("x0_nodes", sd.x0_nodes)?,
            truncation: real("truncation", sd.truncation)?,
            noise_window: real("noise_window", sd.noise_window)?,
            y1_nodes: count("y1_nodes", sd.y1_nodes)?,
            y3_nodes: count("y3_nodes", sd.y3_nodes)?,
            table_step: real("table_step", sd.table_step)?,
        };
        let k = real("k", 0.2)?;
        let sigma_x0 = real("sigma", 5.0)?;
        let lambda = real("lambda", 0.0)?;
        match problem {
            ProblemKind::Wce => {
                WceParams::new(k, sigma_x0)?;
                wce_grids.validate()?;
                if !(slope_floor >= 0.0 && slope_floor.is_finite()) {
                    return Err(Error::Config {
                        field: "slope_floor".into(),
                        reason: format!("must be non-negative, got {slope_floor}"),
                    });
                }
            }
            ProblemKind::SideChannel => {
                SideChannelParams::new(k, sigma_x0, lambda)?;
                sc_grids.validate()?;
            }
        }
        let target_b_snr = optional("target_b_snr")?;
        if let Some(t) = target_b_snr {
            if !(t >= 0.0) {
                return Err(Error::Config {
                    field: "target_b_snr".into(),
                    reason: format!("must be non-negative, got {t}"),
                });
            }
        }
        let b_snr_tol = real("b_snr_tol", 0.2)?;
        if !(b_snr_tol > 0.0) {
            return Err(Error::Config {
                field: "b_snr_tol".into(),
                reason: format!("must be positive, got {b_snr_tol}"),
            });
        }
        let output = match map.get("output") {
            Some(p) => base.join(p),
            None => base.join(stem),
        };
        Ok(Self {
            problem,
            k,
            sigma_x0,
            lambda,
            target_b_snr,
            b_snr_tol,
            schedule,
            wce_grids,
            slope_floor,
            sc_grids,
            output,
            entries,
        })
    }
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Config {
            field: key.into(),
            reason: format!("expected a finite number, got `{v}`"),
        }),
    }
}

/// `key = value` lines; `#` starts a comment. Keys may appear once.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                field: format!("line {}", n + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config {
                field: format!("line {}", n + 1),
                reason: "empty key".into(),
            });
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config { field: k, reason: "given twice".into() });
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Round-trip decimal form used in every data file.
pub fn full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Six significant digits for tables.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (5 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// What a run reports besides its files.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub problem: ProblemKind,
    /// `E{k²U₁² + X₂²}` of the quenched mapping.
    pub cost: f64,
    pub models: usize,
    pub steps: Option<f64>,
    pub b_snr: Option<f64>,
    pub lambda: Option<f64>,
    pub seconds: f64,
    pub output: PathBuf,
    pub warning: Option<String>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "J = {}", full(self.cost));
        if let Some(n) = self.steps {
            let _ = writeln!(s, "steps = {n}");
        }
        if let Some(b) = self.b_snr {
            let _ = writeln!(s, "b_snr = {}", full(b));
        }
        if let Some(l) = self.lambda {
            let _ = writeln!(s, "lambda = {}", full(l));
        }
        let _ = writeln!(s, "models = {}", self.models);
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "warning = {w}");
        }
        let _ = writeln!(s, "output = {}", self.output.display());
        s
    }
}

/// Execute a configuration and write its artifacts.
pub fn run(cfg: &RunConfig, verbose: bool) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    match cfg.problem {
        ProblemKind::Wce => run_wce(cfg, verbose),
        ProblemKind::SideChannel => run_side_channel(cfg, verbose),
    }
}

fn run_wce(cfg: &RunConfig, verbose: bool) -> Result<RunSummary> {
    let start = Instant::now();
    let params = WceParams::new(cfg.k, cfg.sigma_x0)?;
    let mut problem = WceProblem::new(params, cfg.wce_grids)?.with_slope_floor(cfg.slope_floor)?;
    let outcome = anneal(&mut problem, &cfg.schedule, verbose)?;
    let seconds = start.elapsed().as_secs_f64();
    let ctl = &outcome.controller;
    let f1 = problem.hard_mapping(ctl);
    let split = problem.mapping_cost(&f1);
    let steps = count_steps(&problem, ctl);
    let dir = &cfg.output;

    write_common(dir, &outcome, verbose)?;
    let nodes = problem.x0_grid().nodes();
    let mut snap = String::from("T,x0,f1\n");
    for s in &outcome.snapshots {
        let f = crate::wce::hard_mapping(problem.x0_grid(), &s.models, &s.assignment);
        for (&x, &v) in nodes.iter().zip(&f) {
            let _ = writeln!(snap, "{},{},{}", full(s.temperature), full(x), full(v));
        }
    }
    write_file(&dir.join("snapshots.csv"), &snap)?;
    let mut mapping = String::from("x0,f1\n");
    for (&x, &v) in nodes.iter().zip(&f1) {
        let _ = writeln!(mapping, "{},{}", full(x), full(v));
    }
    write_file(&dir.join("mapping.csv"), &mapping)?;
    let mut est = String::from("y,g2\n");
    for (y, &v) in problem.g2().nodes().zip(problem.g2().values()) {
        let _ = writeln!(est, "{},{}", full(y), full(v));
    }
    write_file(&dir.join("estimator.csv"), &est)?;
    let mut models = String::from("slope,intercept\n");
    for m in ctl.models() {
        let _ = writeln!(models, "{},{}", full(m.slope), full(m.intercept));
    }
    write_file(&dir.join("models.csv"), &models)?;

    let (_, linear) = best_affine_cost(&params);
    let mut report = report_head(cfg, &outcome, seconds);
    let _ = writeln!(report, "J = {}", full(outcome.cost));
    let _ = writeln!(report, "control = {}", full(split.control));
    let _ = writeln!(report, "estimation = {}", full(split.estimation));
    let _ = writeln!(report, "steps = {steps}");
    let _ = writeln!(report, "linear_J = {}", full(linear));
    report_tail(&mut report, cfg);
    write_file(&dir.join("report.txt"), &report)?;

    Ok(RunSummary {
        problem: cfg.problem,
        cost: outcome.cost,
        models: ctl.n_models(),
        steps: Some(steps),
        b_snr: None,
        lambda: None,
        seconds,
        output: dir.clone(),
        warning: None,
    })
}

fn run_side_channel(cfg: &RunConfig, verbose: bool) -> Result<RunSummary> {
    let start = Instant::now();
    let params = SideChannelParams::new(cfg.k, cfg.sigma_x0, cfg.lambda)?;
    let (problem, outcome, point, evaluations, warning) = match cfg.target_b_snr {
        Some(target) => {
            let s = sweep_lambda(&params, &cfg.sc_grids, &cfg.schedule, target, cfg.b_snr_tol, &LAMBDA_LADDER)?;
            let point = SweepPoint { lambda: s.lambda, b_snr: s.b_snr, cost: s.cost };
            (s.problem, s.anneal, point, s.evaluations, s.warning)
        }
        None => {
            let (p, o, pt) = run_at_lambda(&params, &cfg.sc_grids, &cfg.schedule, cfg.lambda, verbose)?;
            (p, o, pt.clone(), vec![pt], None)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let ctl = &outcome.controller;
    let dir = &cfg.output;

    write_common(dir, &outcome, verbose && cfg.target_b_snr.is_none())?;
    let grid = problem.x0_grid();
    let mut snap = String::from("T,x0,f1,g2\n");
    for s in &outcome.snapshots {
        for (&x, &a) in grid.nodes().iter().zip(&s.assignment) {
            let m = &s.models[a];
            let _ = writeln!(snap, "{},{},{},{}", full(s.temperature), full(x), full(x + m.g1.eval(x)), full(m.g2.eval(x)));
        }
    }
    write_file(&dir.join("snapshots.csv"), &snap)?;
    let mut mapping = String::from("x0,f1,g2\n");
    for (x, f, u) in problem.hard_mapping(ctl) {
        let _ = writeln!(mapping, "{},{},{}", full(x), full(f), full(u));
    }
    write_file(&dir.join("mapping.csv"), &mapping)?;
    let mut est = String::from("y1,y3,g3\n");
    for (a, b, v) in problem.g3().rows() {
        let _ = writeln!(est, "{},{},{}", full(a), full(b), full(v));
    }
    write_file(&dir.join("estimator.csv"), &est)?;
    let mut models = String::from("g1_slope,g1_intercept,g2_slope,g2_intercept\n");
    for m in ctl.models() {
        let _ = writeln!(
            models,
            "{},{},{},{}",
            full(m.g1.slope),
            full(m.g1.intercept),
            full(m.g2.slope),
            full(m.g2.intercept)
        );
    }
    write_file(&dir.join("models.csv"), &models)?;
    let mut sweep = String::from("lambda,b_snr,J\n");
    for e in &evaluations {
        let _ = writeln!(sweep, "{},{},{}", full(e.lambda), full(e.b_snr), full(e.cost));
    }
    write_file(&dir.join("sweep.csv"), &sweep)?;

    let (_, linear) = best_linear_cost(cfg.k, cfg.sigma_x0, point.b_snr);
    let mut report = report_head(cfg, &outcome, seconds);
    let _ = writeln!(report, "J = {}", full(point.cost));
    let _ = writeln!(report, "lagrangian = {}", full(outcome.cost));
    let _ = writeln!(report, "b_snr = {}", full(point.b_snr));
    let _ = writeln!(report, "lambda = {}", full(point.lambda));
    let _ = writeln!(report, "linear_J = {}", full(linear));
    if let Some(t) = cfg.target_b_snr {
        let _ = writeln!(report, "target_b_snr = {}", full(t));
    }
    if let Some(w) = &warning {
        let _ = writeln!(report, "warning = {w}");
    }
    report_tail(&mut report, cfg);
    write_file(&dir.join("report.txt"), &report)?;

    debug_assert_eq!(snr_of(grid, ctl), point.b_snr);
    Ok(RunSummary {
        problem: cfg.problem,
        cost: point.cost,
        models: ctl.n_models(),
        steps: None,
        b_snr: Some(point.b_snr),
        lambda: Some(point.lambda),
        seconds,
        output: dir.clone(),
        warning,
    })
}

fn write_common<M>(dir: &Path, outcome: &AnnealOutcome<M>, verbose: bool) -> Result<()> {
    let mut trace = String::from("T,J,H,F,M\n");
    for r in &outcome.trace.records {
        let _ = writeln!(
            trace,
            "{},{},{},{},{}",
            full(r.temperature),
            full(r.cost),
            full(r.entropy),
            full(r.free_energy),
            r.models
        );
    }
    write_file(&dir.join("trace.csv"), &trace)?;
    if verbose {
        let mut inner = String::from("step,T,iteration,J,F\n");
        for r in &outcome.inner {
            let _ = writeln!(
                inner,
                "{},{},{},{},{}",
                r.step,
                full(r.temperature),
                r.iteration,
                full(r.cost),
                full(r.free_energy)
            );
        }
        write_file(&dir.join("inner_trace.csv"), &inner)?;
    }
    Ok(())
}

fn report_head<M: AffineModel>(cfg: &RunConfig, outcome: &AnnealOutcome<M>, seconds: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem = {}", cfg.problem.name());
    let _ = writeln!(s, "k = {}", full(cfg.k));
    let _ = writeln!(s, "sigma = {}", full(cfg.sigma_x0));
    let _ = writeln!(s, "entropy = 0");
    let _ = writeln!(s, "models = {}", outcome.controller.n_models());
    let _ = writeln!(s, "temperatures = {}", outcome.trace.records.len());
    let _ = writeln!(s, "t_init = {}", full(outcome.t_init));
    let _ = writeln!(s, "t_min = {}", full(outcome.t_min));
    let _ = writeln!(s, "pre_quench_J = {}", full(outcome.pre_quench_cost));
    let _ = writeln!(s, "unconverged_temperatures = {}", outcome.unconverged_temperatures);
    let _ = writeln!(s, "model_cap_hit = {}", outcome.model_cap_hit);
    let _ = writeln!(s, "wall_seconds = {seconds:.3}");
    let _ = writeln!(s, "engine_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "rng_seed = {}", cfg.schedule.rng_seed);
    s
}

fn report_tail(s: &mut String, cfg: &RunConfig) {
    for (k, v) in &cfg.entries {
        let _ = writeln!(s, "config.{k} = {v}");
    }
}

/// Read a `key = value` report.
pub fn read_report(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_key_values(&text).map_err(|e| Error::Malformed {
        path: path.into(),
        reason: e.to_string(),
    })?;
    Ok(entries.into_iter().collect())
}

/// Columns of a CSV file with a header row, by name.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Malformed { path: path.into(), reason };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| malformed("empty file".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(malformed(format!("row {} has {} fields, expected {}", n + 2, cells.len(), header.len())));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| malformed(format!("row {}: `{}` is not a number", n + 2, cell.trim())))?;
            if !v.is_finite() {
                return Err(malformed(format!("row {}: non-finite value `{}`", n + 2, cell.trim())));
            }
            cols[c].push(v);
        }
    }
    Ok((header, cols))
}

/// Result of `eval-mapping`.
#[derive(Debug, Clone, Copy)]
pub struct MappingReport {
    pub cost: f64,
    pub control: f64,
    pub estimation: f64,
    pub b_snr: Option<f64>,
}

impl MappingReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "J = {}", full(self.cost));
        let _ = writeln!(s, "control = {}", full(self.control));
        let _ = writeln!(s, "estimation = {}", full(self.estimation));
        if let Some(b) = self.b_snr {
            let _ = writeln!(s, "b_snr = {}", full(b));
        }
        s
    }
}

/// Left and right limits at `x` of the piecewise-linear function through
/// the rows. Two rows with the same `x0` mark a jump.
fn limits(xs: &[f64], ys: &[f64], x: f64) -> (f64, f64) {
    let first = xs.partition_point(|&v| v < x);
    let last = xs.partition_point(|&v| v <= x);
    if last > first + 1 {
        (ys[first], ys[last - 1])
    } else {
        let v = interpolate_sorted(xs, ys, x);
        (v, v)
    }
}

/// Evaluate a mapping file on the default grids. Rows are interpolated
/// linearly onto the `X₀` nodes and clamped outside their range; a repeated
/// `x0` is a jump, and a node sitting on it splits its mass between the
/// two sides.
pub fn eval_mapping(path: &Path, k: f64, sigma_x0: f64, x0_nodes: usize) -> Result<MappingReport> {
    let (header, cols) = read_csv(path)?;
    let malformed = |reason: &str| Error::Malformed { path: path.into(), reason: reason.into() };
    let names: Vec<&str> = header.iter().map(String::as_str).collect();
    if names != ["x0", "f1"] && names != ["x0", "f1", "g2"] {
        return Err(malformed("header must be `x0,f1` or `x0,f1,g2`"));
    }
    let xs = &cols[0];
    if xs.is_empty() {
        return Err(malformed("no rows"));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) || xs.windows(3).any(|w| w[0] == w[2]) {
        return Err(malformed("x0 must be increasing, with at most two rows per value"));
    }
    let side = |col: &[f64], nodes: &[f64]| -> (Vec<f64>, Vec<f64>) { nodes.iter().map(|&x| limits(xs, col, x)).unzip() };
    if names.len() == 2 {
        let grids = WceGrids { x0_nodes, ..WceGrids::default() };
        let mut problem = WceProblem::new(WceParams::new(k, sigma_x0)?, grids)?;
        let (l, r) = side(&cols[1], problem.x0_grid().nodes());
        let c = problem.evaluate_mapping_limits(&l, &r)?;
        Ok(MappingReport { cost: c.total, control: c.control, estimation: c.estimation, b_snr: None })
    } else {
        let grids = SideChannelGrids { x0_nodes, ..SideChannelGrids::default() };
        let mut problem = SideChannelProblem::new(SideChannelParams::new(k, sigma_x0, 0.0)?, grids)?;
        let nodes = problem.x0_grid().nodes().to_vec();
        let (fl, fr) = side(&cols[1], &nodes);
        let (gl, gr) = side(&cols[2], &nodes);
        let c = problem.evaluate_mapping_limits((&fl, &gl), (&fr, &gr))?;
        Ok(MappingReport { cost: c.total, control: c.control, estimation: c.estimation, b_snr: Some(c.b_snr) })
    }
}

/// One literature constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LiteratureValue {
    pub kind: String,
    pub b_snr: Option<f64>,
    pub value: f64,
    pub label: String,
}

pub fn literature() -> Vec<LiteratureValue> {
    LITERATURE
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.splitn(4, ',').collect();
            LiteratureValue {
                kind: f[0].to_string(),
                b_snr: f[1].parse().ok(),
                value: f[2].parse().expect("bundled literature value"),
                label: f[3].to_string(),
            }
        })
        .collect()
}

/// Rendered comparison table.
#[derive(Debug, Clone)]
pub struct Table {
    pub csv: String,
    pub text: String,
}

/// `report.txt` of `dir` itself and of its immediate subdirectories.
fn find_reports(dir: &Path) -> Result<Vec<(PathBuf, BTreeMap<String, String>)>> {
    let mut paths = Vec::new();
    let own = dir.join("report.txt");
    if own.is_file() {
        paths.push(own);
    }
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = listing.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        let p = d.join("report.txt");
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.into_iter().map(|p| read_report(&p).map(|r| (p, r))).collect()
}

fn report_value(path: &Path, report: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    report
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Malformed { path: path.into(), reason: format!("missing or bad `{key}`") })
}

fn render_aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:>w$}", w = widths[c])).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Build the comparison tables and write `table.csv` / `table.txt` into `dir`.
pub fn table(dir: &Path) -> Result<Table> {
    let reports = find_reports(dir)?;
    if reports.is_empty() {
        return Err(Error::MissingArtifact(dir.join("report.txt")));
    }
    let lit = literature();
    let run_name = |p: &Path| {
        p.parent()
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut wce_rows = Vec::new();
    let mut sc_rows = Vec::new();
    for (path, r) in &reports {
        let k = report_value(path, r, "k")?;
        let sigma = report_value(path, r, "sigma")?;
        let j = report_value(path, r, "J")?;
        match r.get("problem").map(String::as_str) {
            Some("wce") => {
                let (_, linear) = best_affine_cost(&WceParams::new(k, sigma)?);
                let steps = r.get("steps").cloned().unwrap_or_default();
                wce_rows.push(vec![
                    run_name(path),
                    sig6(k),
                    sig6(sigma),
                    sig6(j),
                    steps,
                    sig6(linear),
                    sig6((linear - j) / linear),
                ]);
            }
            Some("side-channel") => {
                let b = report_value(path, r, "b_snr")?;
                let (_, linear) = best_linear_cost(k, sigma, b);
                let jm = lit
                    .iter()
                    .filter(|l| l.kind == "sc_jm")
                    .filter_map(|l| l.b_snr.map(|lb| (lb, l.value)))
                    .filter(|(lb, _)| (lb - b).abs() <= 0.2)
                    .min_by(|x, y| (x.0 - b).abs().total_cmp(&(y.0 - b).abs()))
                    .map(|(_, v)| v);
                sc_rows.push((
                    b,
                    vec![
                        run_name(path),
                        sig6(b),
                        sig6(linear),
                        jm.map(sig6).unwrap_or_default(),
                        sig6(j),
                        jm.map(|m| sig6((m - j) / m)).unwrap_or_default(),
                    ],
                ));
            }
            other => {
                return Err(Error::Malformed {
                    path: path.clone(),
                    reason: format!("unknown problem {other:?}"),
                })
            }
        }
    }
    sc_rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut csv = String::new();
    let mut text = String::new();
    if !wce_rows.is_empty() {
        let head: Vec<String> =
            ["run", "k", "sigma", "J", "steps", "linear_J", "(linear-J)/linear"].iter().map(|s| s.to_string()).collect();
        let mut rows = vec![head];
        rows.extend(wce_rows);
        for l in lit.iter().filter(|l| l.kind == "wce") {
            rows.push(vec![
                format!("literature: {}", l.label),
                "0.2".into(),
                "5".into(),
                sig6(l.value),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
        for r in &rows {
            let _ = writeln!(csv, "{}", r.join(","));
        }
        text.push_str(&render_aligned(&rows));
    }
    if !sc_rows.is_empty() {
        if !csv.is_empty() {
            csv.push('\n');
            text.push('\n');
        }
        let head: Vec<String> =
            ["run", "b_snr", "linear_J", "J_M (literature)", "J", "(J_M-J)/J_M"].iter().map(|s| s.to_string()).collect();
        let mut rows = vec![head];
        rows.extend(sc_rows.into_iter().map(|r| r.1));
        for r in &rows {
            let _ = writeln!(csv, "{}", r.join(","));
        }
        text.push_str(&render_aligned(&rows));
    }
    write_file(&dir.join("table.csv"), &csv)?;
    write_file(&dir.join("table.txt"), &text)?;
    Ok(Table { csv, text })
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Write gnuplot data files for a finished run into `dir/plot` and return
/// their paths.
pub fn plot_data(dir: &Path) -> Result<Vec<PathBuf>> {
    let report = read_report(&require(dir.join("report.txt"))?)?;
    let side = report.get("problem").map(String::as_str) == Some("side-channel");
    let (_, trace) = read_csv(&require(dir.join("trace.csv"))?)?;
    let (_, snaps) = read_csv(&require(dir.join("snapshots.csv"))?)?;
    let (_, mapping) = read_csv(&require(dir.join("mapping.csv"))?)?;
    let (_, est) = read_csv(&require(dir.join("estimator.csv"))?)?;
    let out = dir.join("plot");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut files = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        write_file(&p, &text)?;
        files.push(p);
        Ok(())
    };

    // Snapshots are stored temperature by temperature.
    let temps = &trace[0];
    let n_nodes = mapping[0].len();
    if snaps[0].len() != temps.len() * n_nodes {
        return Err(Error::Malformed {
            path: dir.join("snapshots.csv"),
            reason: format!("expected {} rows, found {}", temps.len() * n_nodes, snaps[0].len()),
        });
    }
    for (t, &temp) in temps.iter().enumerate() {
        let mut s = format!("# T = {}\n", full(temp));
        for r in t * n_nodes..(t + 1) * n_nodes {
            let row: Vec<String> = snaps[1..].iter().map(|c| full(c[r])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        emit(format!("snapshot_{t:03}.dat"), s)?;
    }

    let mut f1 = String::from(if side { "# x0 f1 g2\n" } else { "# x0 f1\n" });
    for r in 0..n_nodes {
        let row: Vec<String> = mapping.iter().map(|c| full(c[r])).collect();
        let _ = writeln!(f1, "{}", row.join(" "));
    }
    emit("f1.dat".into(), f1)?;

    if side {
        // Full surface in gnuplot's blank-line-separated grid layout, and
        // the slice through y3 = 0.
        let mut surf = String::from("# y1 y3 g3\n");
        let mut slice = String::from("# y1 g3(y1, 0)\n");
        let y3_zero = est[1].iter().copied().fold(f64::INFINITY, |a, v| if v.abs() < a.abs() { v } else { a });
        for r in 0..est[0].len() {
            if r > 0 && est[0][r] != est[0][r - 1] {
                surf.push('\n');
            }
            let _ = writeln!(surf, "{} {} {}", full(est[0][r]), full(est[1][r]), full(est[2][r]));
            if est[1][r] == y3_zero {
                let _ = writeln!(slice, "{} {}", full(est[0][r]), full(est[2][r]));
            }
        }
        emit("g3.dat".into(), surf)?;
        emit("g3_slice.dat".into(), slice)?;
    } else {
        let mut g2 = String::from("# y g2\n");
        for r in 0..est[0].len() {
            let _ = writeln!(g2, "{} {}", full(est[0][r]), full(est[1][r]));
        }
        emit("g2.dat".into(), g2)?;
    }

    let dev = step_deviation(&mapping[0], &mapping[1], None, FILE_JUMP_TOL);
    let mut s = String::from("# x0 deviation step\n");
    for (x, d, step) in dev {
        let _ = writeln!(s, "{} {} {}", full(x), full(d), step);
    }
    emit("step_deviation.dat".into(), s)?;
    let steps = count_steps_of_mapping(&mapping[0], &mapping[1], None, FILE_JUMP_TOL);
    emit("steps.txt".into(), format!("steps = {steps}\n"))?;
    Ok(files)
}
