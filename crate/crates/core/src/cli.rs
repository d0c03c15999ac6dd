//! Run configuration, the `solve` / `plotscript` commands and their output files.
//!
//! A run writes three files into its output directory:
//!
//! - `summary.json`: final cost, per-iteration metrics, arc intervals, timings
//!   and the normalized configuration;
//! - `convergence.csv`: one row per consecutive pair of ensemble sizes;
//! - `control.csv`: one row per grid node with `t, u, psi, label, singular_feedback`.
//!
//! CSV numbers carry 17 significant digits so every double round-trips.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{
    double_integrator_problem, lq_toy_problem, singular_toy_problem, sit_problem, DoubleIntegratorParams, LqToyParams,
    ProblemSpec, SingularToyParams, SitParams,
};
use crate::ensemble::ParamDistribution;
use crate::error::{Error, Result};
use crate::pmp::{ArcInterval, ArcLabel};
use crate::solver::{saa_solve, OuterRecord, SaaError, SaaSchedule, SolveReport, SolverOptions};

pub const DEFAULT_GRID: usize = 900;
pub const DEFAULT_K_MIN: usize = 2;
pub const DEFAULT_OUT: &str = "out";

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// A built-in model with its fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Sit(SitParams),
    LqToy(LqToyParams),
    DoubleIntegrator(DoubleIntegratorParams),
    SingularToy(SingularToyParams),
}

impl Model {
    pub const NAMES: [&'static str; 4] = ["sit", "lq_toy", "double_integrator", "singular_toy"];

    pub fn name(&self) -> &'static str {
        match self {
            Model::Sit(_) => "sit",
            Model::LqToy(_) => "lq_toy",
            Model::DoubleIntegrator(_) => "double_integrator",
            Model::SingularToy(_) => "singular_toy",
        }
    }

    fn from_parts(name: &str, params: Option<Value>) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(params: Option<Value>) -> Result<T> {
            let value = params.unwrap_or_else(|| Value::Object(Default::default()));
            serde_json::from_value(value).map_err(|e| Error::validation("params", e.to_string()))
        }
        Ok(match name {
            "sit" => Model::Sit(parse(params)?),
            "lq_toy" => Model::LqToy(parse(params)?),
            "double_integrator" => Model::DoubleIntegrator(parse(params)?),
            "singular_toy" => Model::SingularToy(parse(params)?),
            other => {
                return Err(Error::validation(
                    "model",
                    format!("unknown model `{other}`, expected one of {:?}", Model::NAMES),
                ))
            }
        })
    }

    fn params_value(&self) -> Value {
        let v = match self {
            Model::Sit(p) => serde_json::to_value(p),
            Model::LqToy(p) => serde_json::to_value(p),
            Model::DoubleIntegrator(p) => serde_json::to_value(p),
            Model::SingularToy(p) => serde_json::to_value(p),
        };
        v.expect("parameter structs serialize")
    }

    /// Problem with the model's default bounds; `None` keeps its default laws.
    pub fn build(&self, distributions: Option<Vec<ParamDistribution>>) -> Result<ProblemSpec> {
        match self {
            Model::Sit(p) => sit_problem(*p, distributions),
            Model::LqToy(p) => lq_toy_problem(*p, distributions),
            Model::DoubleIntegrator(p) => double_integrator_problem(*p, distributions),
            Model::SingularToy(p) => singular_toy_problem(*p, distributions),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleKind {
    Range { k_min: usize, k_max: usize },
    Sizes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Early-stop tolerances on rel_J and rel_u; zero disables early stopping.
    pub tol_cost: f64,
    pub tol_control: f64,
}

impl ScheduleConfig {
    pub fn to_schedule(&self, seed: u64) -> Result<SaaSchedule> {
        let s = match &self.kind {
            ScheduleKind::Range { k_min, k_max } => SaaSchedule::range(*k_min, *k_max, seed)?,
            ScheduleKind::Sizes(sizes) => SaaSchedule::new(sizes.clone(), seed)?,
        };
        s.with_tolerances(self.tol_cost, self.tol_control)
    }

    /// Caps the schedule at `k`: a range gets `k_max = k`, an explicit list
    /// drops larger sizes and ends at `k`.
    pub fn cap(&mut self, k: usize) {
        match &mut self.kind {
            ScheduleKind::Range { k_max, .. } => *k_max = k,
            ScheduleKind::Sizes(sizes) => {
                sizes.retain(|s| *s < k);
                sizes.push(k);
            }
        }
    }

    pub fn k_max(&self) -> usize {
        match &self.kind {
            ScheduleKind::Range { k_max, .. } => *k_max,
            ScheduleKind::Sizes(sizes) => sizes.last().copied().unwrap_or(0),
        }
    }
}

/// A fully validated run with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    /// One law per model parameter, in model order.
    pub distributions: Vec<ParamDistribution>,
    pub u_min: f64,
    pub u_max: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// `solver.grid` holds the top-level `grid` key.
    pub solver: SolverOptions,
    pub out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    #[serde(skip_serializing_if = "Option::is_none")]
    k_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tol_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tol_control: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distributions: Option<Vec<ParamDistribution>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u_max: Option<f64>,
    schedule: RawSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solver: Option<SolverOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

fn schedule_from_raw(raw: RawSchedule) -> Result<ScheduleConfig> {
    let kind = match (raw.sizes, raw.k_min, raw.k_max) {
        (Some(sizes), None, None) => ScheduleKind::Sizes(sizes),
        (Some(_), _, _) => {
            return Err(Error::validation(
                "schedule",
                "give either `sizes` or `k_min`/`k_max`, not both",
            ))
        }
        (None, k_min, Some(k_max)) => ScheduleKind::Range {
            k_min: k_min.unwrap_or(DEFAULT_K_MIN.min(k_max)),
            k_max,
        },
        (None, _, None) => return Err(Error::validation("schedule.k_max", "missing")),
    };
    let tol_cost = raw.tol_cost.unwrap_or(0.0);
    let tol_control = raw.tol_control.unwrap_or(0.0);
    Ok(ScheduleConfig {
        kind,
        tol_cost,
        tol_control,
    })
}

impl RunConfig {
    fn from_raw(raw: RawConfig) -> Result<Self> {
        let model = Model::from_parts(&raw.model, raw.params)?;
        let defaults = model.build(None)?;
        let mut laws = defaults.distributions().to_vec();
        for law in raw.distributions.unwrap_or_default() {
            match laws.iter_mut().find(|d| d.name() == law.name()) {
                Some(slot) => *slot = law,
                None => {
                    return Err(Error::validation(
                        "distributions",
                        format!("model `{}` has no parameter `{}`", model.name(), law.name()),
                    ))
                }
            }
        }
        let mut solver = raw.solver.unwrap_or_default();
        solver.grid = raw.grid.unwrap_or(DEFAULT_GRID);
        let config = RunConfig {
            u_min: raw.u_min.unwrap_or(defaults.u_min()),
            u_max: raw.u_max.unwrap_or(defaults.u_max()),
            distributions: laws,
            model,
            schedule: schedule_from_raw(raw.schedule)?,
            seed: raw.seed.unwrap_or(0),
            solver,
            out: raw.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        };
        config.validate()?;
        Ok(config)
    }

    fn to_raw(&self) -> RawConfig {
        let (k_min, k_max, sizes) = match &self.schedule.kind {
            ScheduleKind::Range { k_min, k_max } => (Some(*k_min), Some(*k_max), None),
            ScheduleKind::Sizes(s) => (None, None, Some(s.clone())),
        };
        RawConfig {
            model: self.model.name().to_string(),
            params: Some(self.model.params_value()),
            distributions: Some(self.distributions.clone()),
            grid: Some(self.solver.grid),
            u_min: Some(self.u_min),
            u_max: Some(self.u_max),
            schedule: RawSchedule {
                k_min,
                k_max,
                sizes,
                tol_cost: Some(self.schedule.tol_cost),
                tol_control: Some(self.schedule.tol_control),
            },
            seed: Some(self.seed),
            solver: Some(self.solver.clone()),
            out: Some(self.out.clone()),
        }
    }

    /// Re-checks every invariant; used after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        self.problem()?;
        self.schedule.to_schedule(self.seed)?;
        self.solver.validate()?;
        if self.out.as_os_str().is_empty() {
            return Err(Error::validation("out", "output directory must be non-empty"));
        }
        if self.out.is_file() {
            return Err(Error::validation("out", format!("{} is a file", self.out.display())));
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        self.model
            .build(Some(self.distributions.clone()))?
            .with_bounds(self.u_min, self.u_max)
    }

    /// Normalized form: every key present, defaults written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("config serializes")
    }
}

/// Parses and validates a config held in memory; `origin` labels errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig> {
    let config_error = |message: String| Error::Config {
        path: origin.to_string(),
        message,
    };
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| config_error(e.to_string()))?;
    RunConfig::from_raw(raw).map_err(|e| config_error(e.to_string()))
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Failure of [`execute`], mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(Error),
    #[error(transparent)]
    Solver(Box<SaaError>),
    #[error("writing results: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Solver(_) => EXIT_SOLVER,
            RunError::Io(_) => EXIT_IO,
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    num(v.unwrap_or(f64::NAN))
}

pub const CONVERGENCE_HEADER: &str = "k_prev,k,J,rel_J,rel_u,inner_iterations";
pub const CONTROL_HEADER: &str = "t,u,psi,label,singular_feedback";

/// One row per consecutive pair of ensemble sizes.
pub fn convergence_csv(records: &[OuterRecord]) -> String {
    let mut s = String::from(CONVERGENCE_HEADER);
    s.push('\n');
    for pair in records.windows(2) {
        let r = &pair[1];
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            pair[0].k,
            r.k,
            num(r.cost),
            opt_num(r.rel_cost),
            opt_num(r.rel_control),
            r.inner_iterations
        );
    }
    s
}

pub fn control_csv(report: &SolveReport) -> String {
    let mut s = String::from(CONTROL_HEADER);
    s.push('\n');
    let grid = report.control.grid();
    let feedback = report.singular_controls();
    let columns = report
        .control
        .values()
        .iter()
        .zip(report.switching.values())
        .zip(&report.arcs.labels)
        .zip(feedback);
    for (j, (((u, psi), label), law)) in columns.enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            num(grid.node(j)),
            num(*u),
            num(*psi),
            label,
            opt_num(law)
        );
    }
    s
}

#[derive(Serialize)]
struct ArcCounts {
    #[serde(rename = "MAX")]
    max: usize,
    #[serde(rename = "MIN")]
    min: usize,
    #[serde(rename = "SINGULAR")]
    singular: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    model: &'a str,
    final_k: usize,
    final_cost: f64,
    stopped_early: bool,
    records: &'a [OuterRecord],
    eps_sing: f64,
    psi_max_abs: f64,
    arc_nodes: ArcCounts,
    arcs: &'a [ArcInterval],
    /// SINGULAR nodes where the feedback law is defined.
    singular_feedback_nodes: usize,
    wall_clock_secs: f64,
    config: Value,
}

pub fn summary_json(config: &RunConfig, report: &SolveReport) -> String {
    let summary = Summary {
        model: config.model.name(),
        final_k: report.ensemble.len(),
        final_cost: report.final_cost(),
        stopped_early: report.stopped_early,
        records: &report.records,
        eps_sing: report.switching.eps_sing(),
        psi_max_abs: report.switching.max_abs(),
        arc_nodes: ArcCounts {
            max: report.arcs.count(ArcLabel::Max),
            min: report.arcs.count(ArcLabel::Min),
            singular: report.arcs.count(ArcLabel::Singular),
        },
        arcs: &report.arcs.intervals,
        singular_feedback_nodes: report.singular_controls().iter().flatten().count(),
        wall_clock_secs: report.wall_clock_secs,
        config: serde_json::to_value(config.to_raw()).expect("config serializes"),
    };
    serde_json::to_string_pretty(&summary).expect("summary serializes")
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"))
}

pub fn write_table(records: &[OuterRecord], out: &mut dyn Write) -> io::Result<()> {
    writeln!(
        out,
        "{:>5} {:>22} {:>10} {:>10} {:>6}",
        "k", "J", "rel_J", "rel_u", "inner"
    )?;
    for r in records {
        writeln!(
            out,
            "{:>5} {:>22.15e} {:>10} {:>10} {:>6}{}",
            r.k,
            r.cost,
            metric(r.rel_cost),
            metric(r.rel_control),
            r.inner_iterations,
            if r.stalled { " stalled" } else { "" }
        )?;
    }
    Ok(())
}

/// Solves and writes the three output files; prints the metric table to `stdout`.
pub fn execute(config: &RunConfig, stdout: &mut dyn Write) -> std::result::Result<SolveReport, RunError> {
    let spec = config.problem().map_err(RunError::Config)?;
    let schedule = config.schedule.to_schedule(config.seed).map_err(RunError::Config)?;
    let report = saa_solve(&spec, &schedule, &config.solver).map_err(|e| {
        let _ = write_table(&e.partial, stdout);
        RunError::Solver(Box::new(e))
    })?;
    write_table(&report.records, stdout)?;
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("convergence.csv"), convergence_csv(&report.records))?;
    fs::write(config.out.join("control.csv"), control_csv(&report))?;
    fs::write(config.out.join("summary.json"), summary_json(config, &report))?;
    Ok(report)
}

/// Runs a validated config and returns the process exit code.
pub fn run(config: &RunConfig) -> i32 {
    match execute(config, &mut io::stdout().lock()) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub const PLOT_SCRIPT: &str = r#"# gnuplot script; run inside the output directory: gnuplot plot.gp
set datafile separator ','
set datafile missing 'NaN'
set terminal pngcairo size 900,600

set output 'rel_cost.png'
set logscale y
set xlabel 'k'
set ylabel '|J^{k-1} - J^k| / |J^{k-1}|'
plot 'convergence.csv' skip 1 using 2:4 with linespoints title 'rel_J'

set output 'rel_control.png'
set ylabel '||u^{k-1} - u^k|| / ||u^{k-1}||'
plot 'convergence.csv' skip 1 using 2:5 with linespoints title 'rel_u'

set output 'control.png'
unset logscale y
set xlabel 't'
set ylabel 'u'
plot 'control.csv' skip 1 using 1:2 with lines lw 2 title 'optimized control', \
     'control.csv' skip 1 using 1:5 with lines dt 2 lc rgb 'red' title 'singular feedback'
"#;

pub fn write_plot_script(dir: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("plot.gp");
    fs::write(&path, PLOT_SCRIPT)?;
    Ok(path)
}

#[derive(Debug, Parser)]
#[command(
    name = "ensemble-control",
    version,
    about = "Ensemble optimal control by sample average approximation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured problem over its ensemble schedule.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the largest ensemble size.
        #[arg(long)]
        samples: Option<usize>,
        /// Override the number of grid steps.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the normalized config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a gnuplot script for the run's CSV files.
    Plotscript {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads a config and applies command-line overrides.
pub fn load_with_overrides(
    path: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    grid: Option<usize>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut config = parse_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(k) = samples {
        config.schedule.cap(k);
    }
    if let Some(n) = grid {
        config.solver.grid = n;
    }
    if let Some(o) = out {
        config.out = o;
    }
    config.validate().map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: format!("after command-line overrides: {e}"),
    })?;
    Ok(config)
}

pub fn dispatch(cli: Cli, stdout: &mut dyn Write) -> i32 {
    match cli.command {
        Command::Solve {
            config,
            seed,
            samples,
            grid,
            out,
            dry_run,
        } => {
            let config = match load_with_overrides(&config, seed, samples, grid, out) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            };
            if dry_run {
                return match writeln!(stdout, "{}", config.to_json()) {
                    Ok(()) => 0,
                    Err(_) => EXIT_IO,
                };
            }
            match execute(&config, stdout) {
                Ok(_) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Plotscript { out } => match write_plot_script(&out) {
            Ok(path) => {
                let _ = writeln!(stdout, "wrote {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_IO
            }
        },
    }
}
