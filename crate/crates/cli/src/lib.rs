//! Command-line front end: dataset generation, training, rollout
//! evaluation, model comparison, and container inspection.
//!
//! Every subcommand is driven by one declarative run configuration,
//! supplied either as a JSON file (`--config`) or by naming one of the
//! four canonical presets (`--preset`). Exit codes: 0 success, 1
//! configuration or input validation failure, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use chaos_forecast_core::baselines::{HineL2, UNetAr};
use chaos_forecast_core::datastore::{Normalizer, TrajectoryBundle};
use chaos_forecast_core::error::CoreError;
use chaos_forecast_core::evaluation::{
    self, RolloutRecord, RolloutSpec,
};
use chaos_forecast_core::ks;
use chaos_forecast_core::l96;
use chaos_forecast_core::latents::System;
use chaos_forecast_core::predictor::HineModel;
use chaos_forecast_core::presets::{ModelKind, RunConfig};
use chaos_forecast_core::spectral::BandSpec;
use chaos_forecast_core::trainer::{self, Checkpoint, PreparedData, TrainOutcome};
use chaos_forecast_core::{container, Result};

#[derive(Debug, Parser)]
#[command(name = "chaos-forecast", version, about = "Chaotic-field forecasting workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a dissipative fourth-order PDE trajectory bundle.
    GenKs(GenArgs),
    /// Generate a forced-ring ODE trajectory bundle.
    GenL96(GenArgs),
    /// Train one model on a bundle.
    Train(TrainArgs),
    /// Roll out one trained checkpoint on the test split.
    Evaluate(EvalArgs),
    /// Evaluate several checkpoints on the same grid and diff them.
    Compare(CompareArgs),
    /// Print the metadata block of any container file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run-configuration document (JSON, unknown keys rejected).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Canonical configuration: paper-ks, paper-l96, desk-ks, desk-l96.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Override the configuration's master seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output bundle path.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input trajectory bundle.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Model to train: msr-hine, unet-ar, or hine-l2.
    #[arg(long, value_name = "KIND", default_value = "msr-hine")]
    pub model: String,
    /// Run directory for the checkpoint and training log.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input trajectory bundle.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Output directory for results and plot data.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Embed external reference results in the output document.
    #[arg(long)]
    pub paper_ref: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input trajectory bundle.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Checkpoints to compare (repeat the flag).
    #[arg(long = "checkpoint", value_name = "PATH", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Model anchoring the percentage gaps.
    #[arg(long, value_name = "KIND", default_value = "unet-ar")]
    pub baseline: String,
    /// Output directory for results and plot data.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Embed external reference results in the output document.
    #[arg(long)]
    pub paper_ref: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Container file (bundle, checkpoint, or rollout dump).
    #[arg(value_name = "PATH")]
    pub path: PathBuf,
}

/// Caps the global worker pool when `CHAOS_FORECAST_THREADS` is set.
/// Safe to call repeatedly; later calls are no-ops.
pub fn init_threads() {
    if let Ok(v) = std::env::var("CHAOS_FORECAST_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Parses and runs, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help and version land here too; those exit cleanly.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::InvalidInput(_) | CoreError::InvalidConfig(_) | CoreError::Format(_) => 1,
        CoreError::Divergence(_) | CoreError::Io(_) | CoreError::Json(_) => 2,
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenKs(a) => gen_bundle(System::Ks, &a),
        Cmd::GenL96(a) => gen_bundle(System::L96, &a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Compare(a) => cmd_compare(&a),
        Cmd::Inspect(a) => cmd_inspect(&a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(CoreError::invalid_input(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &args.config {
        require_file(path, "config file")?;
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)?
    } else if let Some(name) = &args.preset {
        RunConfig::preset(name)?
    } else {
        return Err(CoreError::invalid_config(
            "pass --config PATH or --preset NAME",
        ));
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_bundle(system: System, args: &GenArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    if cfg.system != system {
        return Err(CoreError::invalid_config(format!(
            "configuration is for system '{}', not '{}'",
            cfg.system.tag(),
            system.tag()
        )));
    }
    let bundle = match system {
        System::Ks => ks::ks_generate(cfg.ks.as_ref().unwrap(), cfg.seed)?,
        System::L96 => l96::l96_generate(cfg.l96.as_ref().unwrap(), cfg.seed)?,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    bundle.write(&args.out)?;
    let (s, t, n) = bundle.shape();
    println!("wrote {} ({s} x {t} x {n})", args.out.display());
    Ok(())
}

fn load_prepared(cfg: &RunConfig, data: &Path) -> Result<(TrajectoryBundle, PreparedData)> {
    require_file(data, "bundle")?;
    let bundle = TrajectoryBundle::read(data)?;
    if bundle.meta.system != cfg.system.tag() {
        return Err(CoreError::invalid_input(format!(
            "bundle holds system '{}' but the configuration expects '{}'",
            bundle.meta.system,
            cfg.system.tag()
        )));
    }
    let (n, _) = cfg.grid()?;
    if bundle.n_vars() != n {
        return Err(CoreError::invalid_input(format!(
            "bundle grid size {} does not match configured {}",
            bundle.n_vars(),
            n
        )));
    }
    let prepared = trainer::prepare_data(&bundle, &cfg.split_spec(), cfg.normalization)?;
    Ok((bundle, prepared))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let kind = ModelKind::from_tag(&args.model)?;
    let (bundle, prepared) = load_prepared(&cfg, &args.data)?;
    let run_meta = json!({
        "model": kind.as_str(),
        "config": cfg,
        "bundle_seed": bundle.meta.seed,
    });
    let outcome = match kind {
        ModelKind::MsrHine => {
            let mut model = HineModel::new(&cfg.model_dims()?, cfg.seed)?;
            trainer::train(&mut model, &prepared, &cfg.train, &run_meta, &args.out)?
        }
        ModelKind::UnetAr => {
            let dims = cfg.baseline_dims(kind)?;
            let mut model = UNetAr::new(&dims, cfg.seed);
            trainer::train(&mut model, &prepared, &cfg.train, &run_meta, &args.out)?
        }
        ModelKind::HineL2 => {
            let dims = cfg.baseline_dims(kind)?;
            let mut model = HineL2::new(&dims, cfg.model.k[0], cfg.seed);
            trainer::train(&mut model, &prepared, &cfg.train, &run_meta, &args.out)?
        }
    };
    report_outcome(kind, &outcome);
    Ok(())
}

fn report_outcome(kind: ModelKind, outcome: &TrainOutcome) {
    if outcome.history.is_empty() {
        println!(
            "{}: initialized checkpoint at {} (zero-epoch run)",
            kind.as_str(),
            outcome.checkpoint_path.display()
        );
    } else {
        println!(
            "{}: best validation {:.6} at epoch {}; checkpoint {}",
            kind.as_str(),
            outcome.best_val,
            outcome.best_epoch,
            outcome.checkpoint_path.display()
        );
    }
}

/// A restored model, dispatched over the three architectures.
enum AnyModel {
    Msr(HineModel),
    Ar(UNetAr),
    L2(HineL2),
}

fn restore_any(cfg: &RunConfig, ck: &Checkpoint) -> Result<(ModelKind, AnyModel)> {
    let tag = ck
        .meta
        .pointer("/run/model")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CoreError::format("checkpoint metadata lacks /run/model"))?;
    let kind = ModelKind::from_tag(tag)?;
    let model = match kind {
        ModelKind::MsrHine => {
            let mut m = HineModel::new(&cfg.model_dims()?, cfg.seed)?;
            trainer::restore_model(&mut m, ck)?;
            AnyModel::Msr(m)
        }
        ModelKind::UnetAr => {
            let mut m = UNetAr::new(&cfg.baseline_dims(kind)?, cfg.seed);
            trainer::restore_model(&mut m, ck)?;
            AnyModel::Ar(m)
        }
        ModelKind::HineL2 => {
            let mut m = HineL2::new(&cfg.baseline_dims(kind)?, cfg.model.k[0], cfg.seed);
            trainer::restore_model(&mut m, ck)?;
            AnyModel::L2(m)
        }
    };
    Ok((kind, model))
}

fn check_normalizer(ck: &Checkpoint, prepared: &PreparedData) -> Result<()> {
    let stored: Normalizer = serde_json::from_value(ck.meta["normalizer"].clone())
        .map_err(|e| CoreError::format(format!("checkpoint normalizer block: {e}")))?;
    if stored != prepared.normalizer {
        return Err(CoreError::invalid_input(
            "checkpoint was fitted with a different normalizer; bundle or split mismatch",
        ));
    }
    Ok(())
}

fn roll(model: &AnyModel, prepared: &PreparedData, spec: &RolloutSpec, per_traj: usize, bands: &BandSpec) -> Result<Vec<RolloutRecord>> {
    match model {
        AnyModel::Msr(m) => evaluation::evaluate_model(m, &prepared.test, spec, per_traj, bands),
        AnyModel::Ar(m) => evaluation::evaluate_model(m, &prepared.test, spec, per_traj, bands),
        AnyModel::L2(m) => evaluation::evaluate_model(m, &prepared.test, spec, per_traj, bands),
    }
}

fn write_eval_outputs(
    cfg: &RunConfig,
    out: &Path,
    runs: &[(String, Vec<RolloutRecord>)],
    baseline: &str,
    paper_ref: bool,
) -> Result<()> {
    let spec = RolloutSpec { warm: cfg.warm_steps(), horizon: cfg.eval.horizon };
    let mut doc = evaluation::summarize(
        cfg.system,
        &spec,
        cfg.eval.acc_threshold,
        &cfg.eval.horizons,
        runs,
        baseline,
        paper_ref,
    )?;
    doc.config = serde_json::to_value(cfg)?;
    std::fs::create_dir_all(out)?;
    evaluation::write_results_json(out, &doc)?;
    evaluation::write_metrics_csv(out, &doc)?;
    for (name, records) in runs {
        evaluation::write_curves_csv(out, name, records)?;
        evaluation::write_extreme_rollouts(out, name, records)?;
    }
    for m in &doc.models {
        let mut line = format!(
            "{}: frmse {:.4} +/- {:.4}, end-acc {:.4}, horizon {} steps",
            m.name, m.frmse_mean, m.frmse_std, m.end_acc_mean, m.horizon_steps
        );
        if let Some(d) = &m.vs_baseline {
            line.push_str(&format!(
                " (vs {baseline}: rmse {:+.1}%, acc {:+.1}%, spec {:+.1}%)",
                d.rmse_pct, d.acc_pct, d.spec_pct
            ));
        }
        println!("{line}");
    }
    println!("results under {}", out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let (_bundle, prepared) = load_prepared(&cfg, &args.data)?;
    require_file(&args.checkpoint, "checkpoint")?;
    let ck = trainer::read_checkpoint(&args.checkpoint)?;
    check_normalizer(&ck, &prepared)?;
    let (kind, model) = restore_any(&cfg, &ck)?;
    let spec = RolloutSpec { warm: cfg.warm_steps(), horizon: cfg.eval.horizon };
    let bands = BandSpec::default_for(prepared.n);
    let records = roll(&model, &prepared, &spec, cfg.eval.per_traj, &bands)?;
    let runs = vec![(kind.as_str().to_string(), records)];
    write_eval_outputs(&cfg, &args.out, &runs, kind.as_str(), args.paper_ref)
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let (_bundle, prepared) = load_prepared(&cfg, &args.data)?;
    let spec = RolloutSpec { warm: cfg.warm_steps(), horizon: cfg.eval.horizon };
    let bands = BandSpec::default_for(prepared.n);
    let mut runs: Vec<(String, Vec<RolloutRecord>)> = Vec::new();
    for path in &args.checkpoints {
        require_file(path, "checkpoint")?;
        let ck = trainer::read_checkpoint(path)?;
        check_normalizer(&ck, &prepared)?;
        let (kind, model) = restore_any(&cfg, &ck)?;
        if runs.iter().any(|(n, _)| n == kind.as_str()) {
            return Err(CoreError::invalid_input(format!(
                "two checkpoints share the model kind '{}'",
                kind.as_str()
            )));
        }
        let records = roll(&model, &prepared, &spec, cfg.eval.per_traj, &bands)?;
        runs.push((kind.as_str().to_string(), records));
    }
    write_eval_outputs(&cfg, &args.out, &runs, &args.baseline, args.paper_ref)
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    require_file(&args.path, "container file")?;
    let (meta, arrays) = container::read_file(&args.path)?;
    println!("{}", serde_json::to_string_pretty(&meta)?);
    for a in &arrays {
        println!("array {:24} shape {:?}", a.name, a.shape);
    }
    Ok(())
}
