//! Command-line driver: synthesize benchmark data, train, evaluate,
//! forecast, ablate and verify, all from one TOML run config.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure
//! (divergence, I/O mid-run, a failed check), 2 configuration error
//! (unreadable or invalid config, unknown keys, incompatible checkpoint).

use clap::{Parser, Subcommand};
use deformtime::dataprep::{generate_synthetic, write_csv, SyntheticSpec};
use deformtime::error::Error;
use deformtime::evaluation::EvalMode;
use deformtime::experiment::{
    check_compatibility, compare_with_persistence, evaluate_split, model_grad_check,
    nudge_offsets, opcount_run, prepare, resolved_model_config, train_run, PreparedData,
    RunConfig, SplitChoice,
};
use deformtime::model::{load_checkpoint, save_checkpoint, AblationVariant, DeformTime};
use deformtime::training::grid_search;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "deformtime",
    version,
    about = "Deformable-attention forecasting for multivariable time series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a TOML spec and write it as CSV.
    GenSynth {
        /// TOML file describing the series (t, c, lags, weights, ...).
        spec: PathBuf,
        /// Output CSV path.
        out: PathBuf,
    },
    /// Train a model (or a hyperparameter grid) from a run config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Cap the number of grid trials.
        #[arg(long)]
        budget: Option<usize>,
        /// Config overrides, e.g. train.lr0=0.005 model.d=16
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, validation or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// at_horizon or over_sequence; defaults to the config's eval_mode.
        #[arg(long)]
        mode: Option<String>,
        /// Also score the persistence baseline and report the MAE reduction.
        #[arg(long)]
        baseline: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-anchor forecasts for one split as CSV.
    Forecast {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output path; defaults to <report_dir>/forecast-<split>.csv
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one structural variant (no_vdab, no_tdab, no_pvt, no_nae, no_pn).
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        variant: String,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare analytic gradients against central differences on one sample.
    Gradcheck {
        #[arg(short, long)]
        config: PathBuf,
        /// Worst relative error allowed before a non-zero exit.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 3)]
        probes: usize,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Closed-form vs instrumented multiply counts for the configured model.
    Opcount {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::GenSynth { spec, out } => cmd_gen_synth(&spec, &out),
        Cmd::Train {
            config,
            budget,
            overrides,
        } => cmd_train(&config, budget, &overrides),
        Cmd::Eval {
            config,
            checkpoint,
            split,
            mode,
            baseline,
            overrides,
        } => cmd_eval(&config, &checkpoint, &split, mode.as_deref(), baseline, &overrides),
        Cmd::Forecast {
            config,
            checkpoint,
            split,
            out,
            overrides,
        } => cmd_forecast(&config, &checkpoint, &split, out, &overrides),
        Cmd::Ablate {
            config,
            variant,
            overrides,
        } => cmd_ablate(&config, &variant, &overrides),
        Cmd::Gradcheck {
            config,
            threshold,
            probes,
            overrides,
        } => cmd_gradcheck(&config, threshold, probes, &overrides),
        Cmd::Opcount { config, overrides } => cmd_opcount(&config, &overrides),
    }
}

/// A run config together with its raw TOML tree, kept so grid trials can
/// re-apply typed overrides without round-tripping the struct.
struct Loaded {
    value: toml::Value,
    run: RunConfig,
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Loaded, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let run = materialize(&value)?;
    Ok(Loaded { value, run })
}

/// Deserialize the TOML tree into a validated RunConfig. Unknown keys are
/// rejected here, naming the offender.
fn materialize(value: &toml::Value) -> Result<RunConfig, Error> {
    let run: RunConfig = value
        .clone()
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    run.validate()?;
    Ok(run)
}

/// Set a dotted path like `train.lr0` inside a TOML tree. The value text is
/// parsed as a TOML literal (number, bool, array, quoted string); anything
/// that does not parse is taken as a bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), Error> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {:?} is not KEY=VALUE", spec)))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {:?} has an empty segment", path)));
    }
    let mut cur = root;
    for seg in &segments[..segments.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{:?}: {} is not a table", path, seg)))?;
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{:?} does not end inside a table", path)))?;
    table.insert(segments.last().unwrap().to_string(), parse_literal(raw));
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {}", raw);
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn ensure_dirs(run: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(&run.checkpoint_dir)?;
    fs::create_dir_all(&run.report_dir)?;
    Ok(())
}

/// The config echoed into every report, with `model.c` resolved against the
/// prepared data so the report stands on its own.
fn resolved_echo(run: &RunConfig, prepared: &PreparedData) -> Result<serde_json::Value, Error> {
    let mut resolved = run.clone();
    resolved.model = resolved_model_config(run, prepared)?;
    Ok(serde_json::to_value(&resolved)?)
}

fn emit(report_path: &Path, body: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(body)?;
    fs::write(report_path, format!("{}\n", text))?;
    println!("{}", text);
    Ok(())
}

fn cmd_gen_synth(spec_path: &Path, out: &Path) -> Result<ExitCode, Error> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {}", spec_path.display(), e)))?;
    let spec: SyntheticSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", spec_path.display(), e)))?;
    let ds = generate_synthetic(&spec)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_csv(&ds, out, &[format!("spec: {}", serde_json::to_string(&spec)?)])?;
    println!(
        "wrote {} steps x {} columns to {}",
        ds.len(),
        ds.n_exog() + 1,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Train `run` to completion, writing the checkpoint, the line-JSON epoch
/// log and a summary report named by `label`.
fn run_training(run: &RunConfig, label: &str) -> Result<ExitCode, Error> {
    ensure_dirs(run)?;
    let log_path = run.report_dir.join(format!("{}.log.jsonl", label));
    let mut log = fs::File::create(&log_path)?;
    let artifacts = train_run(run, Some(&mut log))?;

    let ckpt_path = run.checkpoint_dir.join(format!("{}.ckpt", label));
    save_checkpoint(&artifacts.model, &ckpt_path)?;
    let mut report = artifacts.report;
    report.checkpoint_path = Some(ckpt_path.display().to_string());

    let body = json!({
        "command": label,
        "config": resolved_echo(run, &artifacts.prepared)?,
        "report": report,
        "log": log_path.display().to_string(),
    });
    emit(&run.report_dir.join(format!("{}.json", label)), &body)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config: &Path, budget: Option<usize>, overrides: &[String]) -> Result<ExitCode, Error> {
    let loaded = load_config(config, overrides)?;
    match &loaded.run.train.grid {
        Some(axes) if !axes.is_empty() => cmd_train_grid(&loaded, axes.clone(), budget),
        _ => run_training(&loaded.run, "train"),
    }
}

fn cmd_train_grid(
    loaded: &Loaded,
    axes: Vec<deformtime::training::GridAxis>,
    budget: Option<usize>,
) -> Result<ExitCode, Error> {
    let base = &loaded.run;
    ensure_dirs(base)?;
    let mut best: Option<(String, deformtime::experiment::RunArtifacts, RunConfig)> = None;

    let outcome = grid_search(&axes, budget, |trial_id, point| {
        let run = trial_config(loaded, point, trial_id)?;
        let log_path = run.report_dir.join(format!("{}.log.jsonl", trial_id));
        let mut log = fs::File::create(&log_path)?;
        let artifacts = train_run(&run, Some(&mut log))?;
        let val = artifacts.report.best_val_loss;
        // Strictly better only, so ties keep the earlier trial like the
        // search itself does.
        if best.as_ref().map_or(true, |(_, b, _)| val < b.report.best_val_loss) {
            best = Some((trial_id.to_string(), artifacts, run));
        }
        Ok(val)
    })?;

    let (best_id, artifacts, best_run) = best.expect("grid ran at least one trial");
    let ckpt_path = best_run.checkpoint_dir.join("train.ckpt");
    save_checkpoint(&artifacts.model, &ckpt_path)?;
    let mut report = artifacts.report;
    report.checkpoint_path = Some(ckpt_path.display().to_string());

    let body = json!({
        "command": "train",
        "config": resolved_echo(&best_run, &artifacts.prepared)?,
        "grid": outcome,
        "best_trial": best_id,
        "report": report,
    });
    emit(&best_run.report_dir.join("train.json"), &body)?;
    Ok(ExitCode::SUCCESS)
}

/// Base config with one grid point applied. Values land as TOML integers
/// when integral so counts like batch_size stay well-typed.
fn trial_config(
    loaded: &Loaded,
    point: &BTreeMap<String, f64>,
    trial_id: &str,
) -> Result<RunConfig, Error> {
    let mut value = loaded.value.clone();
    for (path, v) in point {
        let literal = if v.fract() == 0.0 && v.abs() < 9.0e15 {
            toml::Value::Integer(*v as i64)
        } else {
            toml::Value::Float(*v)
        };
        let mut spec_root = &mut value;
        let segments: Vec<&str> = path.split('.').collect();
        for seg in &segments[..segments.len() - 1] {
            let table = spec_root
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("grid axis {:?}: not a table", path)))?;
            spec_root = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        spec_root
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("grid axis {:?}: not a table", path)))?
            .insert(segments.last().unwrap().to_string(), literal);
    }
    let mut run = materialize(&value)?;
    run.train.grid = None;
    run.train.trial_id = Some(trial_id.to_string());
    Ok(run)
}

fn parse_mode(s: &str) -> Result<EvalMode, Error> {
    match s {
        "at_horizon" => Ok(EvalMode::AtHorizon),
        "over_sequence" => Ok(EvalMode::OverSequence),
        other => Err(Error::Config(format!(
            "unknown mode {:?}; expected at_horizon or over_sequence",
            other
        ))),
    }
}

/// Load a checkpoint and the prepared data it will score, refusing
/// incompatible pairs with a keyed diff.
fn load_for_inference(
    config: &Path,
    checkpoint: &Path,
    overrides: &[String],
) -> Result<(RunConfig, DeformTime, PreparedData), Error> {
    let loaded = load_config(config, overrides)?;
    let model = load_checkpoint(checkpoint)?;
    let prepared = prepare(&loaded.run)?;
    check_compatibility(&model, &loaded.run, &prepared)?;
    Ok((loaded.run, model, prepared))
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    split: &str,
    mode: Option<&str>,
    baseline: bool,
    overrides: &[String],
) -> Result<ExitCode, Error> {
    let (run, model, prepared) = load_for_inference(config, checkpoint, overrides)?;
    let which = SplitChoice::from_str(split)?;
    let mode = match mode {
        Some(s) => parse_mode(s)?,
        None => run.eval_mode,
    };
    ensure_dirs(&run)?;

    let body = if baseline {
        let cmp = compare_with_persistence(&model, &prepared, which, mode)?;
        json!({
            "command": "eval",
            "config": resolved_echo(&run, &prepared)?,
            "comparison": cmp,
        })
    } else {
        let report = evaluate_split(&model, &prepared, which, mode)?;
        json!({
            "command": "eval",
            "config": resolved_echo(&run, &prepared)?,
            "report": report,
        })
    };
    emit(&run.report_dir.join(format!("eval-{}.json", which.name())), &body)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_forecast(
    config: &Path,
    checkpoint: &Path,
    split: &str,
    out: Option<PathBuf>,
    overrides: &[String],
) -> Result<ExitCode, Error> {
    let (run, model, prepared) = load_for_inference(config, checkpoint, overrides)?;
    let which = SplitChoice::from_str(split)?;
    ensure_dirs(&run)?;
    let out = out.unwrap_or_else(|| run.report_dir.join(format!("forecast-{}.csv", which.name())));

    use std::io::Write;
    let mut file = fs::File::create(&out)?;
    writeln!(file, "anchor,t,step,actual,predicted")?;
    let mut rows = 0usize;
    for sample in prepared.split(which) {
        let pred = model.predict(&sample.z)?;
        for (i, p) in pred.iter().enumerate() {
            writeln!(
                file,
                "{},{},{},{},{}",
                sample.anchor,
                sample.anchor + 1 + i,
                i + 1,
                prepared.stats.denorm_target(sample.targets[i]),
                prepared.stats.denorm_target(*p),
            )?;
            rows += 1;
        }
    }
    println!("wrote {} forecast rows to {}", rows, out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(config: &Path, variant: &str, overrides: &[String]) -> Result<ExitCode, Error> {
    let variant = AblationVariant::from_str(variant)?;
    let loaded = load_config(config, overrides)?;
    let mut run = loaded.run;
    run.variant = variant;
    run_training(&run, &format!("ablate-{}", variant.name()))
}

fn cmd_gradcheck(
    config: &Path,
    threshold: f64,
    probes: usize,
    overrides: &[String],
) -> Result<ExitCode, Error> {
    let loaded = load_config(config, overrides)?;
    let run = &loaded.run;
    let prepared = prepare(run)?;
    let sample = prepared
        .train
        .first()
        .or_else(|| prepared.validation.first())
        .ok_or_else(|| Error::Data("no windows to probe; widen the data".into()))?;
    let cfg = resolved_model_config(run, &prepared)?;
    let mut model = DeformTime::init(cfg, run.variant, run.train.seed)?;
    // The raw initialisation samples exactly on grid nodes, where the
    // interpolants are not differentiable; probe a nudged point instead.
    nudge_offsets(&mut model, 0.25, run.train.seed.wrapping_add(1));
    let worst = model_grad_check(&model, sample, run.train.loss, probes, 1e-5)?;
    let pass = worst < threshold;
    let body = json!({
        "command": "gradcheck",
        "worst_rel_err": worst,
        "threshold": threshold,
        "probes_per_tensor": probes,
        "pass": pass,
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_opcount(config: &Path, overrides: &[String]) -> Result<ExitCode, Error> {
    let loaded = load_config(config, overrides)?;
    let (predicted, measured, ratio) = opcount_run(&loaded.run, None)?;
    let body = json!({
        "command": "opcount",
        "predicted": predicted,
        "measured": measured,
        "ratio": ratio,
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(ExitCode::SUCCESS)
}
