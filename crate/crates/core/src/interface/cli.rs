//! `iplab` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ControllerChoice, ModelChoice, ResolvedController, RunConfig};
use super::io;
use crate::control::synthesize;
use crate::fit::{grid_search, FitResult, ObjectiveMode, ParamGrid};
use crate::ipcurve::{
    descriptors, ip_curve_with, mean_curve, summarize, trial_ip_curve, DescriptorMode, DescriptorSummary, IpCurve,
    IpDescriptors, DESCRIPTOR_DEFINITION,
};
use crate::metrics::{anova_oneway, ellipse_95, weld_score, EllipseMetrics, Palette, Ppm, PrecisionDenominator};
use crate::model::{GroundReaction, PendulumModel};
use crate::signal::{psd, FilterBank, PsdCurve};
use crate::sim::{run_batch_with_gain, NoiseSpec, TrialFailure};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT_MISSING: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "iplab", version, about = "Inverted-pendulum balance simulation and intersection-point analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a batch of stochastic balance trials.
    Simulate(SimulateArgs),
    /// IP curve, descriptors, PSD and ellipses from force-plate or trial CSVs.
    Analyze(AnalyzeArgs),
    /// Grid-search LQR weights and noise levels against a target IP curve.
    Fit(FitArgs),
    /// Score a classified weld mask.
    Weldscore(WeldArgs),
    /// One-way ANOVA across sample groups.
    Anova(AnovaArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model preset name or model JSON file.
    #[arg(long, visible_alias = "preset")]
    pub model: Option<String>,
    /// Controller preset (toi1 … toi8).
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    /// s
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, default_value = "sim_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["forceplate", "trials"])))]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub forceplate: Option<PathBuf>,
    /// Trial CSV files or directories holding `trial_*.csv`.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub trials: Vec<PathBuf>,
    #[arg(long)]
    pub imu: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// m
    #[arg(long)]
    pub reference_height: Option<f64>,
    /// Descriptors per trial, then averaged.
    #[arg(long, conflicts_with = "pooled")]
    pub per_subject: bool,
    /// Descriptors of the band-wise mean curve (default).
    #[arg(long)]
    pub pooled: bool,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    SlopeError,
    CurveError,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, visible_alias = "preset")]
    pub model: Option<String>,
    /// IP curve CSV (`band_hz,ip_m,ip_norm,r2`).
    #[arg(long)]
    pub target: PathBuf,
    /// ParamGrid JSON; the default grid otherwise.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub reference_height: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    Welded,
    Workpiece,
}

#[derive(Debug, Args)]
pub struct WeldArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub palette: PathBuf,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnovaArgs {
    /// One CSV per group.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub groups: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub trial_index: usize,
    pub failure: TrialFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub model: PendulumModel,
    pub controller: ResolvedController,
    /// Trial `i` draws from ChaCha8 seeded with `base_seed` on stream `i`.
    pub base_seed: u64,
    pub n_trials: usize,
    pub files: Vec<String>,
    pub failures: Vec<FailureEntry>,
    pub gain: Vec<Vec<f64>>,
    pub care_relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub tool_version: String,
    pub descriptor_definition: String,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    /// Hz
    pub sample_rate: f64,
    /// s
    pub duration: f64,
    pub warnings: Vec<String>,
    /// Mean curve when several trials are given.
    pub ip_curve: IpCurve,
    pub descriptors: IpDescriptors,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<DescriptorSummary>,
    pub psd: BTreeMap<String, PsdCurve>,
    /// COP, cm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sway_ellipse: Option<EllipseMetrics>,
    /// IMU A-P and M-L acceleration, m/s².
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel_ellipse: Option<EllipseMetrics>,
    /// Simulated trials only: A-P COP (cm) against A-P COM acceleration (m/s²), one per trial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cop_accel_ellipses: Option<Vec<EllipseMetrics>>,
    pub trials_used: usize,
    pub trials_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub tool_version: String,
    pub descriptor_definition: String,
    pub config: RunConfig,
    pub model: PendulumModel,
    pub grid: ParamGrid,
    pub target: String,
    pub n_trials: usize,
    pub base_seed: u64,
    pub result: FitResult,
}

fn to_json_line<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    io::write_file(path, serde_json::to_string_pretty(v)? + "\n")
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<BatchManifest> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = &a.model {
        cfg.model = ModelChoice::Preset(m.clone());
    }
    if let Some(c) = &a.controller {
        cfg.controller = ControllerChoice::Preset(c.clone());
    }
    if let Some(n) = a.trials {
        cfg.trials = n;
    }
    if let Some(d) = a.duration {
        cfg.sim.duration = d;
    }
    cfg.seed = Some(a.seed);
    cfg.validate()?;
    let model = cfg.model()?;
    let ctrl = cfg.controller(model.gait())?;
    let gain = synthesize(&model, &ctrl.lqr)?;
    let noise = NoiseSpec { sigma: ctrl.sigma.clone(), base_seed: a.seed };
    let trials = run_batch_with_gain(&model, &gain, &noise, &cfg.sim, cfg.trials)?;
    std::fs::create_dir_all(&a.out)?;
    let width = (cfg.trials.max(2) - 1).to_string().len().max(3);
    let mut files = Vec::with_capacity(trials.len());
    let mut failures = Vec::new();
    for t in &trials {
        let name = format!("trial_{:0width$}.csv", t.trial_index);
        io::write_file(&a.out.join(&name), io::trial_csv(t))?;
        files.push(name);
        if let Some(f) = &t.failure {
            failures.push(FailureEntry { trial_index: t.trial_index, failure: f.clone() });
        }
    }
    let manifest = BatchManifest {
        tool_version: VERSION.into(),
        config: cfg.clone(),
        model,
        controller: ctrl,
        base_seed: a.seed,
        n_trials: cfg.trials,
        files,
        failures,
        gain: gain.gain.row_iter().map(|r| r.iter().copied().collect()).collect(),
        care_relative_residual: gain.relative_residual,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn expand_trial_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("trial_") && n.ends_with(".csv"))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::InputMissing(format!("no trial_*.csv files in {}", p.display())));
            }
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::InputMissing(p.display().to_string()));
        }
    }
    Ok(out)
}

fn cm(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * 100.0).collect()
}

fn mean_psd(curves: &[PsdCurve]) -> Option<PsdCurve> {
    let first = curves.first()?;
    let mut power = vec![0.0; first.power.len()];
    for c in curves {
        for (p, v) in power.iter_mut().zip(&c.power) {
            *p += v / curves.len() as f64;
        }
    }
    Some(PsdCurve { frequencies: first.frequencies.clone(), power })
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<AnalyzeReport> {
    let mut cfg = load_config(&a.config)?;
    if let Some(h) = a.reference_height {
        cfg.reference_height = Some(h);
    }
    if a.per_subject {
        cfg.descriptor_mode = DescriptorMode::PerSubject;
    } else if a.pooled {
        cfg.descriptor_mode = DescriptorMode::Pooled;
    }
    let href = cfg.reference_height()?;
    let mut warnings = Vec::new();
    let mut psds = BTreeMap::new();
    let mut inputs = Vec::new();
    let report = if let Some(fp_path) = &a.forceplate {
        inputs.push(fp_path.display().to_string());
        let fp = io::parse_forceplate_csv(fp_path)?;
        warnings.extend(fp.timing.warnings.iter().cloned());
        let rate = fp.timing.sample_rate;
        let bank = FilterBank::new(&cfg.band_spec(rate)?)?;
        let r = &fp.records;
        let copx: Vec<f64> = r.iter().map(|x| x.copx).collect();
        let copy: Vec<f64> = r.iter().map(|x| x.copy).collect();
        let grf: Vec<GroundReaction> = r.iter().map(|x| GroundReaction { fx: x.fx, fz: x.fz }).collect();
        let curve = ip_curve_with(&copx, &grf, &bank, href)?;
        let desc = descriptors(&curve)?;
        psds.insert("copx".to_string(), psd(&copx, rate)?);
        psds.insert("copy".to_string(), psd(&copy, rate)?);
        let sway = ellipse_95(&cm(&copx), &cm(&copy))?;
        let accel = match &a.imu {
            Some(p) => {
                inputs.push(p.display().to_string());
                let imu = io::parse_imu_csv(p)?;
                warnings.extend(imu.timing.warnings.iter().cloned());
                let ax: Vec<f64> = imu.records.iter().map(|x| x.ax).collect();
                let ay: Vec<f64> = imu.records.iter().map(|x| x.ay).collect();
                Some(ellipse_95(&ax, &ay)?)
            }
            None => None,
        };
        AnalyzeReport {
            tool_version: VERSION.into(),
            descriptor_definition: DESCRIPTOR_DEFINITION.into(),
            config: cfg.clone(),
            inputs,
            sample_rate: rate,
            duration: fp.timing.duration,
            warnings,
            ip_curve: curve,
            descriptors: desc,
            summary: None,
            psd: psds,
            sway_ellipse: Some(sway),
            accel_ellipse: accel,
            cop_accel_ellipses: None,
            trials_used: 1,
            trials_failed: 0,
        }
    } else {
        if a.imu.is_some() {
            return Err(Error::Validation("--imu applies to force-plate input only".into()));
        }
        let paths = expand_trial_paths(&a.trials)?;
        let mut series = Vec::with_capacity(paths.len());
        for p in &paths {
            inputs.push(p.display().to_string());
            series.push(io::read_trial_csv(p)?);
        }
        let rate = series[0].sample_rate;
        if series.iter().any(|s| s.sample_rate != rate) {
            return Err(Error::Validation("trials have different sample rates".into()));
        }
        let bank = FilterBank::new(&cfg.band_spec(rate)?)?;
        let mut curves = Vec::new();
        let mut ellipses = Vec::new();
        let mut spectra = Vec::new();
        let mut failed = 0;
        let mut duration: f64 = 0.0;
        for s in &series {
            if s.failed() {
                failed += 1;
                warnings.push(format!("trial {} failed; excluded", s.trial_index));
                continue;
            }
            curves.push(trial_ip_curve(s, &bank, href)?);
            ellipses.push(ellipse_95(&cm(&s.cop_x), &s.com_ax)?);
            spectra.push(psd(&s.cop_x, rate)?);
            duration = duration.max(s.len() as f64 / rate);
        }
        if curves.is_empty() {
            return Err(Error::Degenerate("every trial failed".into()));
        }
        let mean = mean_curve(&curves)?;
        let desc = descriptors(&mean)?;
        let summary = summarize(&curves, cfg.descriptor_mode)?;
        if let Some(p) = mean_psd(&spectra) {
            psds.insert("copx".to_string(), p);
        }
        AnalyzeReport {
            tool_version: VERSION.into(),
            descriptor_definition: DESCRIPTOR_DEFINITION.into(),
            config: cfg.clone(),
            inputs,
            sample_rate: rate,
            duration,
            warnings,
            ip_curve: mean,
            descriptors: desc,
            summary: Some(summary),
            psd: psds,
            sway_ellipse: None,
            accel_ellipse: None,
            cop_accel_ellipses: Some(ellipses),
            trials_used: curves.len(),
            trials_failed: failed,
        }
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    io::write_file(&a.out.join("ip_curve.csv"), io::ipcurve_csv(&report.ip_curve))?;
    for (name, p) in &report.psd {
        io::write_file(&a.out.join(format!("psd_{name}.csv")), io::psd_csv(p))?;
    }
    Ok(report)
}

pub fn cmd_fit(a: &FitArgs) -> Result<FitReport> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = &a.model {
        cfg.model = ModelChoice::Preset(m.clone());
    }
    if let Some(n) = a.trials {
        cfg.trials = n;
    }
    if let Some(d) = a.duration {
        cfg.sim.duration = d;
    }
    if let Some(h) = a.reference_height {
        cfg.reference_height = Some(h);
    }
    if let Some(m) = a.mode {
        cfg.objective = match m {
            ModeArg::SlopeError => ObjectiveMode::SlopeError,
            ModeArg::CurveError => ObjectiveMode::CurveError,
        };
    }
    cfg.seed = Some(a.seed);
    let model = cfg.model()?;
    cfg.sim.validate(&model)?;
    let target = io::read_ipcurve_csv(&a.target, a.reference_height)?;
    let grid = match &a.grid {
        Some(p) => serde_json::from_str::<ParamGrid>(&io::read_text(p)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?,
        None => ParamGrid::default(),
    };
    let grid = grid.for_gait(model.gait())?;
    let target_id = a.target.display().to_string();
    let result = grid_search(&model, &grid, &target, &target_id, &cfg.sim, cfg.trials, a.seed, cfg.objective)?;
    let report = FitReport {
        tool_version: VERSION.into(),
        descriptor_definition: DESCRIPTOR_DEFINITION.into(),
        config: cfg.clone(),
        model,
        grid,
        target: target_id,
        n_trials: cfg.trials,
        base_seed: a.seed,
        result,
    };
    write_json(&a.out, &report)?;
    Ok(report)
}

pub fn cmd_weldscore(a: &WeldArgs) -> Result<crate::metrics::WeldScore> {
    let mask = Ppm::read(&a.image)?;
    let palette = Palette::read(&a.palette)?;
    let denom = match a.precision {
        Some(PrecisionArg::Workpiece) => PrecisionDenominator::Workpiece,
        _ => PrecisionDenominator::Welded,
    };
    let s = weld_score(&mask, &palette, denom)?;
    if let Some(p) = &a.out {
        write_json(p, &s)?;
    }
    Ok(s)
}

pub fn cmd_anova(a: &AnovaArgs) -> Result<crate::metrics::AnovaResult> {
    let mut groups = Vec::with_capacity(a.groups.len());
    for p in &a.groups {
        let text = io::read_text(p)?;
        groups.push(io::parse_group_str(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", p.display()) },
            e => e,
        })?);
    }
    let r = anova_oneway(&groups)?;
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    Ok(r)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InputMissing(_) => EXIT_INPUT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("IPLAB_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| format!("IPLAB_THREADS must be a positive integer, got {v:?}"))?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: &Command, err: &mut dyn Write) -> Result<String> {
    match cmd {
        Command::Simulate(a) => {
            let m = cmd_simulate(a)?;
            to_json_line(&json!({
                "manifest": a.out.join("manifest.json"),
                "trials": m.n_trials,
                "failed": m.failures.len(),
            }))
        }
        Command::Analyze(a) => {
            let r = cmd_analyze(a)?;
            for w in &r.warnings {
                let _ = writeln!(err, "{}", json!({ "warning": w }));
            }
            to_json_line(&json!({
                "report": a.out.join("report.json"),
                "crossover_hz": r.descriptors.crossover_hz,
                "reliable_bands": r.ip_curve.reliable_count(),
                "trials_used": r.trials_used,
            }))
        }
        Command::Fit(a) => {
            let r = cmd_fit(a)?;
            to_json_line(&json!({
                "out": a.out,
                "best_params": r.result.best_params,
                "best_objective": r.result.best_objective,
            }))
        }
        Command::Weldscore(a) => to_json_line(&cmd_weldscore(a)?),
        Command::Anova(a) => to_json_line(&cmd_anova(a)?),
    }
}

/// Runs the CLI and returns the process exit code. Diagnostics go to stderr as
/// single-line JSON.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "{}", json!({ "error": { "kind": "usage", "message": first } }));
            return EXIT_USAGE;
        }
    };
    if let Err(m) = configure_threads() {
        let _ = writeln!(err, "{}", json!({ "error": { "kind": "usage", "message": m } }));
        return EXIT_USAGE;
    }
    match dispatch(&cli.command, err) {
        Ok(line) => {
            let _ = writeln!(out, "{line}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            exit_code(&e)
        }
    }
}
