//! Command-line front end.
//!
//! Five subcommands: `fit-hetero` and `fit-homo` estimate from a panel CSV and
//! write a fit report (JSON) plus a predictions CSV; `interval` writes a single
//! interval estimate as JSON; `simulate-mse` and `simulate-coverage` drive the
//! Monte Carlo harness and write a report JSON plus a flat CSV.
//!
//! A `--config FILE` flag names a flat key = value file (one entry per line,
//! `#` starts a comment) whose keys are the long flag names of the chosen
//! subcommand; entries override anything given on the command line. Unknown
//! keys are rejected.
//!
//! Output paths are claimed (created empty) before any computation starts, so
//! an unwritable path fails fast; on error the claimed files are removed
//! again and a structured JSON description of the failure goes to stderr.
//! Exit codes: 0 ok, 2 input problem, 3 numeric failure, 4 resource cap.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gcv::{EtaGrid, EtaSelection, GcvCurve};
use crate::hetero::{self, UnitFit};
use crate::homo::{self, FitOptions};
use crate::inference::{self, IntervalEstimate, NoiseModel};
use crate::io;
use crate::kernel::KernelSpec;
use crate::panel::PanelData;
use crate::simlab::{self, Design, EstimatorConfig, EtaRule, ModelKind};
use crate::simlab::dgp::DgpSpec;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "panelkrr", version, about = "Kernel ridge regression for panels with interactive fixed effects", max_term_width = 100)]
pub struct Cli {
    /// Flat key = value file overriding the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for the simulation drivers (default: all logical cores)
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one curve per unit and write a report plus per-unit predictions
    FitHetero(FitHeteroArgs),
    /// Fit a single pooled curve and write a report plus predictions
    FitHomo(FitHomoArgs),
    /// Construct one confidence or prediction interval
    Interval(IntervalArgs),
    /// Monte Carlo mean squared error on a synthetic design
    SimulateMse(SimulateArgs),
    /// Monte Carlo coverage of the pooled pointwise intervals
    SimulateCoverage(CoverageArgs),
}

#[derive(Args)]
struct FitHeteroArgs {
    /// Long-format panel CSV: unit,time,y,x1..xd[,f1..fq]
    #[arg(long, value_name = "CSV")]
    data: PathBuf,

    /// Fit only the unit with this label (default: every unit)
    #[arg(long, value_name = "LABEL")]
    unit: Option<String>,

    /// Kernel expression, e.g. "gaussian(b=1.0)" or "add([0]:gaussian(b=1.0), [1]:poly(k=3))"
    #[arg(long, value_name = "EXPR")]
    kernel: String,

    /// Smoothing parameter: a positive number or "gcv"
    #[arg(long, default_value = "gcv")]
    eta: String,

    /// Absolute GCV search grid lo:hi:points (default: a data-scaled 40-point grid)
    #[arg(long, value_name = "LO:HI:N")]
    eta_grid: Option<String>,

    /// Points per unit in the predictions CSV when d = 1
    #[arg(long, default_value_t = 100, value_name = "K")]
    grid_points: usize,

    /// Fit report output (JSON)
    #[arg(long, value_name = "JSON")]
    report: PathBuf,

    /// Predictions output (CSV)
    #[arg(long, value_name = "CSV")]
    predictions: PathBuf,
}

#[derive(Args)]
struct FitHomoArgs {
    /// Long-format panel CSV: unit,time,y,x1..xd[,f1..fq]
    #[arg(long, value_name = "CSV")]
    data: PathBuf,

    /// Kernel expression, e.g. "gaussian(b=1.0)"
    #[arg(long, value_name = "EXPR")]
    kernel: String,

    /// Smoothing parameter: a positive number or "gcv"
    #[arg(long, default_value = "gcv")]
    eta: String,

    /// Absolute GCV search grid lo:hi:points (default: a data-scaled 40-point grid)
    #[arg(long, value_name = "LO:HI:N")]
    eta_grid: Option<String>,

    /// Largest N*T the pooled solver accepts
    #[arg(long, value_name = "CAP")]
    nt_cap: Option<usize>,

    /// Points in the predictions CSV when d = 1
    #[arg(long, default_value_t = 100, value_name = "K")]
    grid_points: usize,

    /// Fit report output (JSON)
    #[arg(long, value_name = "JSON")]
    report: PathBuf,

    /// Predictions output (CSV)
    #[arg(long, value_name = "CSV")]
    predictions: PathBuf,
}

#[derive(Args)]
struct IntervalArgs {
    /// Long-format panel CSV: unit,time,y,x1..xd[,f1..fq]
    #[arg(long, value_name = "CSV")]
    data: PathBuf,

    /// Which estimator: hetero or homo
    #[arg(long, value_name = "MODEL")]
    model: String,

    /// hetero: mean or prediction; homo: g or beta
    #[arg(long, value_name = "KIND")]
    kind: String,

    /// Kernel expression
    #[arg(long, value_name = "EXPR")]
    kernel: String,

    /// Smoothing parameter: a positive number or "gcv"
    #[arg(long, default_value = "gcv")]
    eta: String,

    /// Absolute GCV search grid lo:hi:points
    #[arg(long, value_name = "LO:HI:N")]
    eta_grid: Option<String>,

    /// Confidence level in (0,1)
    #[arg(long, default_value_t = 0.95)]
    level: f64,

    /// hetero kinds: unit label the interval is for
    #[arg(long, value_name = "LABEL")]
    unit: Option<String>,

    /// hetero kinds: CSV with next-period covariates, one row per unit (unit,x1..xd)
    #[arg(long, value_name = "CSV")]
    next_rows: Option<PathBuf>,

    /// hetero kinds: next-period observed factors after the leading 1, comma-separated
    #[arg(long, value_name = "V2,..,VQ")]
    f0: Option<String>,

    /// prediction kind: noise model, gaussian or empirical
    #[arg(long, default_value = "gaussian")]
    noise: String,

    /// homo g kind: evaluation point, comma-separated d values
    #[arg(long, value_name = "X1,..,XD")]
    x0: Option<String>,

    /// homo beta kind: anchor point where the nonlinear part vanishes
    #[arg(long, value_name = "X1,..,XD")]
    anchor: Option<String>,

    /// homo beta kind: which x column (1-based) carries the linear coefficient
    #[arg(long, value_name = "J")]
    linear_coord: Option<usize>,

    /// homo: largest N*T the pooled solver accepts
    #[arg(long, value_name = "CAP")]
    nt_cap: Option<usize>,

    /// Interval output (JSON)
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Synthetic design: hetero-logistic, beta-mixture, or firm-panel
    #[arg(long, value_name = "NAME")]
    design: String,

    /// Cross-section size
    #[arg(long, value_name = "N")]
    n: usize,

    /// Time-series length
    #[arg(long, value_name = "T")]
    t: usize,

    /// Base seed; replication r uses stream r+1 of this seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Number of replications
    #[arg(long, value_name = "R")]
    reps: usize,

    /// Which estimator: hetero or homo
    #[arg(long, value_name = "MODEL")]
    model: String,

    /// Kernel expression
    #[arg(long, value_name = "EXPR")]
    kernel: String,

    /// Smoothing parameter: a positive number or "gcv"
    #[arg(long, default_value = "gcv")]
    eta: String,

    /// hetero-logistic: fix every unit's quadratic weight (default: draw per unit)
    #[arg(long, value_name = "W")]
    quad_scale: Option<f64>,

    /// hetero-logistic, beta-mixture: multiplier on the idiosyncratic noise
    #[arg(long, default_value_t = 1.0, value_name = "S")]
    noise_scale: f64,

    /// firm-panel: idiosyncratic noise standard deviation
    #[arg(long, default_value_t = 1.0, value_name = "SD")]
    noise_sd: f64,

    /// firm-panel: scale of the interactive effect
    #[arg(long, default_value_t = 1.0, value_name = "S")]
    ife_scale: f64,

    /// firm-panel: the three linear coefficients
    #[arg(long, default_value = "0.10,0.10,0.73", value_name = "B1,B2,B3")]
    coefficients: String,

    /// Scale AR innovations by sigma*sqrt(1-rho^2) instead of sigma*(1-rho^2)
    #[arg(long)]
    sqrt_innovation_scale: bool,

    /// Report output (JSON)
    #[arg(long, value_name = "JSON")]
    json: PathBuf,

    /// Flat report output (CSV)
    #[arg(long, value_name = "CSV")]
    csv: PathBuf,
}

#[derive(Args)]
struct CoverageArgs {
    #[command(flatten)]
    sim: SimulateArgs,

    /// Nominal coverage level in (0,1)
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code: u8 = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let doc = serde_json::json!({
                "error": {
                    "exit_code": err.exit_code(),
                    "kind": err.kind(),
                    "message": err.to_string(),
                }
            });
            eprintln!("{}", serde_json::to_string_pretty(&doc).expect("error serializes"));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(mut cli: Cli) -> Result<()> {
    if let Some(path) = cli.config.clone() {
        apply_config_file(&mut cli, &path)?;
    }
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(Error::input("threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::resource(format!("thread pool setup failed: {e}")))?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::FitHetero(args) => run_fit_hetero(args, threads),
        Command::FitHomo(args) => run_fit_homo(args, threads),
        Command::Interval(args) => run_interval(args, threads),
        Command::SimulateMse(args) => run_simulate_mse(args, threads),
        Command::SimulateCoverage(args) => run_simulate_coverage(args, threads),
    }
}

// ---------------------------------------------------------------------------
// config file

fn apply_config_file(cli: &mut Cli, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read config file {}: {e}", path.display())))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::input(format!(
                "config file {} line {}: expected key = value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key == "threads" {
            cli.threads = Some(pusize(key, value)?);
            continue;
        }
        let known = match &mut cli.command {
            Command::FitHetero(a) => a.apply(key, value)?,
            Command::FitHomo(a) => a.apply(key, value)?,
            Command::Interval(a) => a.apply(key, value)?,
            Command::SimulateMse(a) => a.apply(key, value)?,
            Command::SimulateCoverage(a) => a.apply(key, value)?,
        };
        if !known {
            return Err(Error::input(format!(
                "config file {} line {}: unknown key {key:?} for this subcommand",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(())
}

fn pf64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::input(format!("{key}: expected a number, got {v:?}")))
        .and_then(|x| {
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::input(format!("{key}: value must be finite")))
            }
        })
}

fn pusize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::input(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn pu64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| Error::input(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn pbool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::input(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl FitHeteroArgs {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data" => self.data = PathBuf::from(v),
            "unit" => self.unit = Some(v.to_string()),
            "kernel" => self.kernel = v.to_string(),
            "eta" => self.eta = v.to_string(),
            "eta-grid" => self.eta_grid = Some(v.to_string()),
            "grid-points" => self.grid_points = pusize(key, v)?,
            "report" => self.report = PathBuf::from(v),
            "predictions" => self.predictions = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.display().to_string());
        if let Some(u) = &self.unit {
            m.insert("unit".into(), u.clone());
        }
        m.insert("kernel".into(), self.kernel.clone());
        m.insert("eta".into(), self.eta.clone());
        if let Some(g) = &self.eta_grid {
            m.insert("eta-grid".into(), g.clone());
        }
        m.insert("grid-points".into(), self.grid_points.to_string());
        m.insert("report".into(), self.report.display().to_string());
        m.insert("predictions".into(), self.predictions.display().to_string());
        m
    }
}

impl FitHomoArgs {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data" => self.data = PathBuf::from(v),
            "kernel" => self.kernel = v.to_string(),
            "eta" => self.eta = v.to_string(),
            "eta-grid" => self.eta_grid = Some(v.to_string()),
            "nt-cap" => self.nt_cap = Some(pusize(key, v)?),
            "grid-points" => self.grid_points = pusize(key, v)?,
            "report" => self.report = PathBuf::from(v),
            "predictions" => self.predictions = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.display().to_string());
        m.insert("kernel".into(), self.kernel.clone());
        m.insert("eta".into(), self.eta.clone());
        if let Some(g) = &self.eta_grid {
            m.insert("eta-grid".into(), g.clone());
        }
        if let Some(c) = self.nt_cap {
            m.insert("nt-cap".into(), c.to_string());
        }
        m.insert("grid-points".into(), self.grid_points.to_string());
        m.insert("report".into(), self.report.display().to_string());
        m.insert("predictions".into(), self.predictions.display().to_string());
        m
    }
}

impl IntervalArgs {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data" => self.data = PathBuf::from(v),
            "model" => self.model = v.to_string(),
            "kind" => self.kind = v.to_string(),
            "kernel" => self.kernel = v.to_string(),
            "eta" => self.eta = v.to_string(),
            "eta-grid" => self.eta_grid = Some(v.to_string()),
            "level" => self.level = pf64(key, v)?,
            "unit" => self.unit = Some(v.to_string()),
            "next-rows" => self.next_rows = Some(PathBuf::from(v)),
            "f0" => self.f0 = Some(v.to_string()),
            "noise" => self.noise = v.to_string(),
            "x0" => self.x0 = Some(v.to_string()),
            "anchor" => self.anchor = Some(v.to_string()),
            "linear-coord" => self.linear_coord = Some(pusize(key, v)?),
            "nt-cap" => self.nt_cap = Some(pusize(key, v)?),
            "out" => self.out = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.display().to_string());
        m.insert("model".into(), self.model.clone());
        m.insert("kind".into(), self.kind.clone());
        m.insert("kernel".into(), self.kernel.clone());
        m.insert("eta".into(), self.eta.clone());
        if let Some(g) = &self.eta_grid {
            m.insert("eta-grid".into(), g.clone());
        }
        m.insert("level".into(), self.level.to_string());
        if let Some(u) = &self.unit {
            m.insert("unit".into(), u.clone());
        }
        if let Some(p) = &self.next_rows {
            m.insert("next-rows".into(), p.display().to_string());
        }
        if let Some(f) = &self.f0 {
            m.insert("f0".into(), f.clone());
        }
        m.insert("noise".into(), self.noise.clone());
        if let Some(x) = &self.x0 {
            m.insert("x0".into(), x.clone());
        }
        if let Some(a) = &self.anchor {
            m.insert("anchor".into(), a.clone());
        }
        if let Some(j) = self.linear_coord {
            m.insert("linear-coord".into(), j.to_string());
        }
        if let Some(c) = self.nt_cap {
            m.insert("nt-cap".into(), c.to_string());
        }
        m.insert("out".into(), self.out.display().to_string());
        m
    }
}

impl SimulateArgs {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "design" => self.design = v.to_string(),
            "n" => self.n = pusize(key, v)?,
            "t" => self.t = pusize(key, v)?,
            "seed" => self.seed = pu64(key, v)?,
            "reps" => self.reps = pusize(key, v)?,
            "model" => self.model = v.to_string(),
            "kernel" => self.kernel = v.to_string(),
            "eta" => self.eta = v.to_string(),
            "quad-scale" => self.quad_scale = Some(pf64(key, v)?),
            "noise-scale" => self.noise_scale = pf64(key, v)?,
            "noise-sd" => self.noise_sd = pf64(key, v)?,
            "ife-scale" => self.ife_scale = pf64(key, v)?,
            "coefficients" => self.coefficients = v.to_string(),
            "sqrt-innovation-scale" => self.sqrt_innovation_scale = pbool(key, v)?,
            "json" => self.json = PathBuf::from(v),
            "csv" => self.csv = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("design".into(), self.design.clone());
        m.insert("n".into(), self.n.to_string());
        m.insert("t".into(), self.t.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("reps".into(), self.reps.to_string());
        m.insert("model".into(), self.model.clone());
        m.insert("kernel".into(), self.kernel.clone());
        m.insert("eta".into(), self.eta.clone());
        if let Some(w) = self.quad_scale {
            m.insert("quad-scale".into(), w.to_string());
        }
        m.insert("noise-scale".into(), self.noise_scale.to_string());
        m.insert("noise-sd".into(), self.noise_sd.to_string());
        m.insert("ife-scale".into(), self.ife_scale.to_string());
        m.insert("coefficients".into(), self.coefficients.clone());
        m.insert("sqrt-innovation-scale".into(), self.sqrt_innovation_scale.to_string());
        m.insert("json".into(), self.json.display().to_string());
        m.insert("csv".into(), self.csv.display().to_string());
        m
    }
}

impl CoverageArgs {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "level" => {
                self.level = pf64(key, v)?;
                Ok(true)
            }
            _ => self.sim.apply(key, v),
        }
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut m = self.sim.echo();
        m.insert("level".into(), self.level.to_string());
        m
    }
}

// ---------------------------------------------------------------------------
// shared pieces

/// Claims output files up front and deletes them again unless `disarm` ran.
struct ArtifactGuard {
    created: Vec<PathBuf>,
    armed: bool,
}

impl ArtifactGuard {
    fn new() -> Self {
        ArtifactGuard { created: Vec::new(), armed: true }
    }

    fn claim(&mut self, path: &Path) -> Result<()> {
        fs::write(path, b"").map_err(|e| {
            Error::input(format!("output path {} is not writable: {e}", path.display()))
        })?;
        self.created.push(path.to_path_buf());
        Ok(())
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for ArtifactGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

enum EtaChoice {
    Fixed(f64),
    Gcv(Option<EtaGrid>),
}

fn parse_eta_choice(eta: &str, grid: Option<&str>) -> Result<EtaChoice> {
    if eta == "gcv" {
        let grid = grid.map(parse_eta_grid).transpose()?;
        return Ok(EtaChoice::Gcv(grid));
    }
    if grid.is_some() {
        return Err(Error::input("eta-grid only applies when eta is \"gcv\""));
    }
    let v = pf64("eta", eta)?;
    if v <= 0.0 {
        return Err(Error::input(format!("eta must be positive or \"gcv\", got {eta}")));
    }
    Ok(EtaChoice::Fixed(v))
}

fn parse_eta_grid(s: &str) -> Result<EtaGrid> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::input(format!("eta-grid: expected lo:hi:points, got {s:?}")));
    }
    let lo = pf64("eta-grid lo", parts[0])?;
    let hi = pf64("eta-grid hi", parts[1])?;
    let n = pusize("eta-grid points", parts[2])?;
    EtaGrid::log_spaced(lo, hi, n)
}

fn parse_number_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| pf64(key, p.trim()))
        .collect()
}

fn find_unit(panel: &PanelData, label: &str) -> Result<usize> {
    panel
        .unit_labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| {
            let shown: Vec<&str> =
                panel.unit_labels.iter().take(8).map(|s| s.as_str()).collect();
            let suffix = if panel.unit_labels.len() > 8 {
                format!(", .. ({} total)", panel.unit_labels.len())
            } else {
                String::new()
            };
            Error::input(format!(
                "unknown unit label {label:?}; panel has: {}{suffix}",
                shown.join(", ")
            ))
        })
}

fn parse_model(s: &str) -> Result<ModelKind> {
    match s {
        "hetero" => Ok(ModelKind::Hetero),
        "homo" => Ok(ModelKind::Homo),
        _ => Err(Error::input(format!("model must be hetero or homo, got {s:?}"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::input(format!("cannot write {}: {e}", path.display())))
}

fn to_pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// fit reports

#[derive(Serialize)]
struct GcvReport {
    selected_eta: f64,
    grid_eta: f64,
    curve: GcvCurve,
}

impl GcvReport {
    fn from_selection(sel: EtaSelection) -> Self {
        GcvReport { selected_eta: sel.eta, grid_eta: sel.grid_eta, curve: sel.curve }
    }
}

#[derive(Serialize)]
struct UnitReport {
    unit: String,
    eta: f64,
    effective_dim: f64,
    sigma_eps_sq: f64,
    beta: Vec<f64>,
    warnings: Vec<String>,
    gcv: Option<GcvReport>,
}

#[derive(Serialize)]
struct HeteroReport {
    version: String,
    mode: String,
    config: BTreeMap<String, String>,
    threads: usize,
    units: Vec<UnitReport>,
}

#[derive(Serialize)]
struct HomoReport {
    version: String,
    mode: String,
    config: BTreeMap<String, String>,
    threads: usize,
    eta: f64,
    effective_dim: f64,
    sigma_eps_sq: f64,
    /// One row per unit: the unit's coefficients on the augmented regressors.
    betas: Vec<Vec<f64>>,
    warnings: Vec<String>,
    gcv: Option<GcvReport>,
}

#[derive(Serialize)]
struct IntervalReport {
    version: String,
    mode: String,
    config: BTreeMap<String, String>,
    interval: IntervalEstimate,
}

fn run_fit_hetero(args: FitHeteroArgs, threads: usize) -> Result<()> {
    if args.grid_points < 2 {
        return Err(Error::input("grid-points must be at least 2"));
    }
    let choice = parse_eta_choice(&args.eta, args.eta_grid.as_deref())?;
    let kspec: KernelSpec = args.kernel.parse()?;
    let mut guard = ArtifactGuard::new();
    guard.claim(&args.report)?;
    guard.claim(&args.predictions)?;

    let panel = io::parse_panel_csv(&args.data)?;
    let units: Vec<usize> = match &args.unit {
        Some(label) => vec![find_unit(&panel, label)?],
        None => (0..panel.n()).collect(),
    };

    let mut reports = Vec::with_capacity(units.len());
    let mut fits: Vec<UnitFit> = Vec::with_capacity(units.len());
    for &i in &units {
        let (fit, sel) = match &choice {
            EtaChoice::Fixed(eta) => (hetero::fit_unit(&panel, i, &kspec, *eta)?, None),
            EtaChoice::Gcv(grid) => {
                let (fit, sel) = hetero::fit_unit_gcv(&panel, i, &kspec, grid.as_ref())?;
                (fit, Some(sel))
            }
        };
        reports.push(UnitReport {
            unit: panel.unit_labels[i].clone(),
            eta: fit.eta,
            effective_dim: fit.effective_dim,
            sigma_eps_sq: fit.sigma_sq,
            beta: fit.beta.to_vec(),
            warnings: fit.warnings.clone(),
            gcv: sel.map(GcvReport::from_selection),
        });
        fits.push(fit);
    }

    let report = HeteroReport {
        version: VERSION.to_string(),
        mode: "fit-hetero".to_string(),
        config: args.echo(),
        threads,
        units: reports,
    };
    write_text(&args.report, &to_pretty(&report))?;

    let d = panel.d();
    let mut csv = String::new();
    csv.push_str("unit");
    for j in 1..=d {
        csv.push_str(&format!(",x{j}"));
    }
    csv.push_str(",ghat\n");
    for (&i, fit) in units.iter().zip(&fits) {
        let points = panel.unit_x(i);
        for x in prediction_grid(&points.view(), args.grid_points) {
            let ghat = fit.predict_g(&x)?;
            csv.push_str(&panel.unit_labels[i]);
            for v in &x {
                csv.push_str(&format!(",{v:.16e}"));
            }
            csv.push_str(&format!(",{ghat:.16e}\n"));
        }
    }
    write_text(&args.predictions, &csv)?;
    guard.disarm();
    Ok(())
}

fn run_fit_homo(args: FitHomoArgs, threads: usize) -> Result<()> {
    if args.grid_points < 2 {
        return Err(Error::input("grid-points must be at least 2"));
    }
    let choice = parse_eta_choice(&args.eta, args.eta_grid.as_deref())?;
    let kspec: KernelSpec = args.kernel.parse()?;
    let mut opts = FitOptions::default();
    if let Some(cap) = args.nt_cap {
        opts.nt_cap = cap;
    }
    let mut guard = ArtifactGuard::new();
    guard.claim(&args.report)?;
    guard.claim(&args.predictions)?;

    let panel = io::parse_panel_csv(&args.data)?;
    let (fit, sel) = match &choice {
        EtaChoice::Fixed(eta) => (homo::fit(&panel, &kspec, *eta, &opts)?, None),
        EtaChoice::Gcv(grid) => {
            let (fit, sel) = homo::fit_gcv(&panel, &kspec, grid.as_ref(), &opts)?;
            (fit, Some(sel))
        }
    };

    let report = HomoReport {
        version: VERSION.to_string(),
        mode: "fit-homo".to_string(),
        config: args.echo(),
        threads,
        eta: fit.eta,
        effective_dim: fit.effective_dim()?,
        sigma_eps_sq: fit.sigma_sq,
        betas: fit.betas.rows().into_iter().map(|r| r.to_vec()).collect(),
        warnings: fit.warnings.clone(),
        gcv: sel.map(GcvReport::from_selection),
    };
    write_text(&args.report, &to_pretty(&report))?;

    let d = panel.d();
    let mut csv = String::new();
    for j in 1..=d {
        if j > 1 {
            csv.push(',');
        }
        csv.push_str(&format!("x{j}"));
    }
    csv.push_str(",ghat\n");
    let stacked = panel.stacked_x();
    for x in prediction_grid(&stacked.view(), args.grid_points) {
        let ghat = fit.predict_g(&x)?;
        for (j, v) in x.iter().enumerate() {
            if j > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{v:.16e}"));
        }
        csv.push_str(&format!(",{ghat:.16e}\n"));
    }
    write_text(&args.predictions, &csv)?;
    guard.disarm();
    Ok(())
}

/// Evaluation grid for the predictions CSV: an even sweep of the observed
/// range for a univariate covariate, the sample points themselves otherwise.
fn prediction_grid(points: &ArrayView2<f64>, grid_points: usize) -> Vec<Vec<f64>> {
    let d = points.ncols();
    if d == 1 {
        let col = points.column(0);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![vec![lo]];
        }
        (0..grid_points)
            .map(|j| vec![lo + (hi - lo) * j as f64 / (grid_points - 1) as f64])
            .collect()
    } else {
        points.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

// ---------------------------------------------------------------------------
// interval mode

fn run_interval(args: IntervalArgs, _threads: usize) -> Result<()> {
    let model = parse_model(&args.model)?;
    let choice = parse_eta_choice(&args.eta, args.eta_grid.as_deref())?;
    let kspec: KernelSpec = args.kernel.parse()?;
    let mut guard = ArtifactGuard::new();
    guard.claim(&args.out)?;

    let panel = io::parse_panel_csv(&args.data)?;
    let interval = match (model, args.kind.as_str()) {
        (ModelKind::Hetero, "mean") | (ModelKind::Hetero, "prediction") => {
            let label = args
                .unit
                .as_deref()
                .ok_or_else(|| Error::input("hetero intervals need --unit"))?;
            let i = find_unit(&panel, label)?;
            let next = args
                .next_rows
                .as_deref()
                .ok_or_else(|| Error::input("hetero intervals need --next-rows"))?;
            let x_all0 = parse_next_rows(next, &panel)?;
            let f_10 = build_f0(args.f0.as_deref(), panel.q1())?;
            let x_i0 = x_all0.row(i).to_vec();
            let fit = match &choice {
                EtaChoice::Fixed(eta) => hetero::fit_unit(&panel, i, &kspec, *eta)?,
                EtaChoice::Gcv(grid) => hetero::fit_unit_gcv(&panel, i, &kspec, grid.as_ref())?.0,
            };
            if args.kind == "mean" {
                inference::mean_interval_hetero(&fit, &panel, &x_i0, &f_10, &x_all0.view(), args.level)?
            } else {
                let noise = match args.noise.as_str() {
                    "gaussian" => NoiseModel::Gaussian,
                    "empirical" => NoiseModel::Empirical,
                    other => {
                        return Err(Error::input(format!(
                            "noise must be gaussian or empirical, got {other:?}"
                        )))
                    }
                };
                inference::prediction_interval(
                    &fit,
                    &panel,
                    &x_i0,
                    &f_10,
                    &x_all0.view(),
                    args.level,
                    noise,
                )?
            }
        }
        (ModelKind::Homo, "g") | (ModelKind::Homo, "beta") => {
            let mut opts = FitOptions::default();
            if let Some(cap) = args.nt_cap {
                opts.nt_cap = cap;
            }
            let fit = match &choice {
                EtaChoice::Fixed(eta) => homo::fit(&panel, &kspec, *eta, &opts)?,
                EtaChoice::Gcv(grid) => homo::fit_gcv(&panel, &kspec, grid.as_ref(), &opts)?.0,
            };
            if args.kind == "g" {
                let x0 = args
                    .x0
                    .as_deref()
                    .ok_or_else(|| Error::input("kind g needs --x0"))?;
                let x0 = parse_number_list("x0", x0)?;
                inference::g_interval_homo(&fit, &x0, args.level)?
            } else {
                let anchor = args
                    .anchor
                    .as_deref()
                    .ok_or_else(|| Error::input("kind beta needs --anchor"))?;
                let anchor = parse_number_list("anchor", anchor)?;
                let coord = args
                    .linear_coord
                    .ok_or_else(|| Error::input("kind beta needs --linear-coord"))?;
                if coord == 0 {
                    return Err(Error::input("linear-coord is 1-based; 0 is not a column"));
                }
                inference::linear_coefficient_interval(&fit, &anchor, coord - 1, args.level)?
            }
        }
        (ModelKind::Hetero, other) => {
            return Err(Error::input(format!(
                "hetero interval kind must be mean or prediction, got {other:?}"
            )))
        }
        (ModelKind::Homo, other) => {
            return Err(Error::input(format!(
                "homo interval kind must be g or beta, got {other:?}"
            )))
        }
    };

    let report = IntervalReport {
        version: VERSION.to_string(),
        mode: "interval".to_string(),
        config: args.echo(),
        interval,
    };
    write_text(&args.out, &to_pretty(&report))?;
    guard.disarm();
    Ok(())
}

/// Next-period covariates: header `unit,x1..xd`, exactly one row per panel
/// unit. Rows may come in any order; they are matched by label.
fn parse_next_rows(path: &Path, panel: &PanelData) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let d = panel.d();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::input(format!("{}: empty file", path.display())))?;
    let mut expect = vec!["unit".to_string()];
    for j in 1..=d {
        expect.push(format!("x{j}"));
    }
    let got: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if got != expect {
        return Err(Error::input(format!(
            "{}: header must be {}, got {}",
            path.display(),
            expect.join(","),
            got.join(",")
        )));
    }
    let n = panel.n();
    let mut x = Array2::<f64>::zeros((n, d));
    let mut seen = vec![false; n];
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::input(format!(
                "{} line {}: expected {} fields, got {}",
                path.display(),
                idx + 1,
                d + 1,
                fields.len()
            )));
        }
        let i = find_unit(panel, fields[0])?;
        if seen[i] {
            return Err(Error::input(format!(
                "{} line {}: unit {:?} appears twice",
                path.display(),
                idx + 1,
                fields[0]
            )));
        }
        seen[i] = true;
        for j in 0..d {
            x[[i, j]] = pf64("next-rows value", fields[j + 1])?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::input(format!(
            "{}: no row for unit {:?}",
            path.display(),
            panel.unit_labels[i]
        )));
    }
    Ok(x)
}

/// Observed factor vector for the new period: the leading intercept 1 plus
/// the q1-1 values given by --f0.
fn build_f0(f0: Option<&str>, q1: usize) -> Result<Vec<f64>> {
    let rest = match f0 {
        Some(s) if !s.trim().is_empty() => parse_number_list("f0", s)?,
        _ => Vec::new(),
    };
    if rest.len() != q1 - 1 {
        return Err(Error::input(format!(
            "f0 must list {} value(s) (observed factors beyond the intercept), got {}",
            q1 - 1,
            rest.len()
        )));
    }
    let mut f = Vec::with_capacity(q1);
    f.push(1.0);
    f.extend(rest);
    Ok(f)
}

// ---------------------------------------------------------------------------
// simulate modes

#[derive(Serialize)]
struct SimMeta {
    version: String,
    mode: String,
    config: BTreeMap<String, String>,
    threads: usize,
    wall_clock_secs: f64,
}

#[derive(Serialize)]
struct SimReport {
    meta: SimMeta,
    payload: simlab::McPayload,
}

fn build_design(args: &SimulateArgs) -> Result<Design> {
    match args.design.as_str() {
        "hetero-logistic" => Ok(Design::HeteroLogistic {
            quad_scale: args.quad_scale,
            noise_scale: args.noise_scale,
        }),
        "beta-mixture" => Ok(Design::BetaMixture { noise_scale: args.noise_scale }),
        "firm-panel" => {
            let c = parse_number_list("coefficients", &args.coefficients)?;
            if c.len() != 3 {
                return Err(Error::input(format!(
                    "coefficients must list exactly 3 values, got {}",
                    c.len()
                )));
            }
            Ok(Design::FirmPanel {
                coefficients: [c[0], c[1], c[2]],
                noise_sd: args.noise_sd,
                ife_scale: args.ife_scale,
            })
        }
        other => Err(Error::input(format!(
            "design must be hetero-logistic, beta-mixture, or firm-panel, got {other:?}"
        ))),
    }
}

fn build_sim_inputs(args: &SimulateArgs) -> Result<(DgpSpec, EstimatorConfig)> {
    let design = build_design(args)?;
    let mut dgp = DgpSpec::new(design, args.n, args.t, args.seed);
    dgp.sqrt_innovation_scale = args.sqrt_innovation_scale;
    let eta = if args.eta == "gcv" {
        EtaRule::gcv()
    } else {
        let v = pf64("eta", &args.eta)?;
        if v <= 0.0 {
            return Err(Error::input(format!("eta must be positive or \"gcv\", got {}", args.eta)));
        }
        EtaRule::Fixed(v)
    };
    let est = EstimatorConfig {
        model: parse_model(&args.model)?,
        kernel: args.kernel.clone(),
        eta,
    };
    Ok((dgp, est))
}

fn emit_sim_report(
    report: simlab::McReport,
    mode: &str,
    config: BTreeMap<String, String>,
    threads: usize,
    json_path: &Path,
    csv_path: &Path,
    guard: &mut ArtifactGuard,
) -> Result<()> {
    let csv = report.to_csv();
    let doc = SimReport {
        meta: SimMeta {
            version: VERSION.to_string(),
            mode: mode.to_string(),
            config,
            threads,
            wall_clock_secs: report.meta.wall_clock_secs,
        },
        payload: report.payload,
    };
    write_text(json_path, &to_pretty(&doc))?;
    write_text(csv_path, &csv)?;
    guard.disarm();
    Ok(())
}

fn run_simulate_mse(args: SimulateArgs, threads: usize) -> Result<()> {
    let (dgp, est) = build_sim_inputs(&args)?;
    let mut guard = ArtifactGuard::new();
    guard.claim(&args.json)?;
    guard.claim(&args.csv)?;
    let report = simlab::mc_mse(&dgp, &est, args.reps)?;
    emit_sim_report(
        report,
        "simulate-mse",
        args.echo(),
        threads,
        &args.json,
        &args.csv,
        &mut guard,
    )
}

fn run_simulate_coverage(args: CoverageArgs, threads: usize) -> Result<()> {
    let (dgp, est) = build_sim_inputs(&args.sim)?;
    let mut guard = ArtifactGuard::new();
    guard.claim(&args.sim.json)?;
    guard.claim(&args.sim.csv)?;
    let grid = simlab::default_coverage_grid();
    let report = simlab::mc_coverage(&dgp, &est, &grid, args.level, args.sim.reps)?;
    let config = args.echo();
    emit_sim_report(
        report,
        "simulate-coverage",
        config,
        threads,
        &args.sim.json,
        &args.sim.csv,
        &mut guard,
    )
}
