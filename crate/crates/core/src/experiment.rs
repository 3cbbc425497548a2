//! End-to-end run plumbing shared by the command-line tool and the test
//! suite: a file-backed run description, the data pipeline from CSV to
//! split window sets, and wrappers that train, evaluate and verify a model
//! against that data.

use crate::dataprep::{
    build_windows, load_csv, rank_by_correlation, select_features, standardize,
    standardize_window, validation_split, weekly_to_daily, NormStats, SplitPlan,
    TimeSeriesDataset, WindowSample,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalMode, ForecastReport, Forecaster, PersistenceBaseline};
use crate::model::{
    predicted_op_count, measured_op_count, AblationVariant, DeformTime, ForwardOptions,
    ModelConfig,
};
use crate::numerics::Tape;
use crate::training::{loss_graph, train, Loss, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv: PathBuf,
    /// Name of the target column in the CSV.
    pub target: String,
    /// Treat every column as weekly and interpolate to a daily grid.
    #[serde(default)]
    pub weekly_to_daily: bool,
    /// Weekday each weekly value represents, 0..=6.
    #[serde(default = "default_anchor")]
    pub anchor_offset: usize,
    /// Re-order exogenous columns by correlation with the target.
    #[serde(default = "default_true")]
    pub rank: bool,
    /// Keep only exogenous columns with correlation above this.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Additionally standardise each window by its own statistics.
    #[serde(default)]
    pub window_standardize: bool,
    /// First index of each season; the last season becomes the test range.
    #[serde(default)]
    pub season_starts: Option<Vec<usize>>,
    /// Epidemic-activity threshold for onset/outset detection.
    #[serde(default)]
    pub onset_threshold: Option<f64>,
    /// Fractional split sizes used when no seasons are given.
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
}

fn default_anchor() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_val_frac() -> f64 {
    0.15
}

fn default_test_frac() -> f64 {
    0.2
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_offset > 6 {
            return Err(Error::Config("anchor_offset must lie in 0..=6".into()));
        }
        if let Some(tau) = self.tau {
            if !(0.0..1.0).contains(&tau) {
                return Err(Error::Config(format!("tau {} must lie in [0, 1)", tau)));
            }
        }
        if self.season_starts.is_some() != self.onset_threshold.is_some() {
            return Err(Error::Config(
                "season_starts and onset_threshold must be given together".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.val_frac) || !(0.0..0.5).contains(&self.test_frac) {
            return Err(Error::Config("val_frac and test_frac must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one run needs, usually read from a single config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub variant: AblationVariant,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default = "default_run_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_run_dir")]
    pub report_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// The dataset after ranking, selection and normalisation, windowed and
/// assigned to splits. A window belongs to a split only when every index
/// it touches lies inside that split's range.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: TimeSeriesDataset,
    pub plan: SplitPlan,
    pub stats: NormStats,
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Exogenous columns kept, in their final order.
    pub columns: Vec<String>,
}

impl PreparedData {
    pub fn split(&self, which: SplitChoice) -> &[WindowSample] {
        match which {
            SplitChoice::Train => &self.train,
            SplitChoice::Validation => &self.validation,
            SplitChoice::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
}

impl SplitChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Validation => "validation",
            SplitChoice::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "validation" | "val" => Ok(SplitChoice::Validation),
            "test" => Ok(SplitChoice::Test),
            other => Err(Error::Config(format!("unknown split {:?}", other))),
        }
    }
}

/// Run the data pipeline: load, optionally interpolate weekly values,
/// plan the split, rank and select features against the pre-test span,
/// standardise with pre-test statistics, window, and assign windows to
/// splits by containment.
pub fn prepare(run: &RunConfig) -> Result<PreparedData> {
    run.data.validate()?;
    let mcfg = &run.model;
    let mut ds = load_csv(&run.data.csv, &run.data.target)?;

    if run.data.weekly_to_daily {
        let n = ds.len();
        ds.target = weekly_to_daily(&ds.target, run.data.anchor_offset)?;
        for col in ds.exog.iter_mut() {
            *col = weekly_to_daily(col, run.data.anchor_offset)?;
        }
        ds.timestamps = (0..7 * n as i64).collect();
    }

    let plan = match (&run.data.season_starts, run.data.onset_threshold) {
        (Some(starts), Some(threshold)) => validation_split(&ds.target, starts, threshold)?,
        _ => SplitPlan::from_fractions(ds.len(), run.data.val_frac, run.data.test_frac)?,
    };
    let fit = 0..plan.train_span_end();

    if run.data.rank {
        let perm = rank_by_correlation(&ds, fit.clone(), false)?;
        ds.reorder_exog(&perm)?;
    }
    if let Some(tau) = run.data.tau {
        ds = select_features(&ds, tau, fit.clone(), false)?;
    }
    let (ds, stats) = standardize(&ds, fit)?;

    let windows = build_windows(&ds, mcfg.l, mcfg.h, mcfg.delta)?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    let mut test_set = Vec::new();
    for mut w in windows {
        let (lo, hi) = w.span(mcfg.l, mcfg.h, mcfg.delta);
        let contained = |r: &std::ops::Range<usize>| r.start <= lo && hi < r.end;
        let bucket = if plan.train.iter().any(contained) {
            &mut train_set
        } else if plan.validation.iter().any(contained) {
            &mut val_set
        } else if contained(&plan.test) {
            &mut test_set
        } else {
            continue;
        };
        if run.data.window_standardize {
            standardize_window(&mut w.z);
        }
        bucket.push(w);
    }

    let columns = ds.exog_names.clone();
    Ok(PreparedData {
        dataset: ds,
        plan,
        stats,
        train: train_set,
        validation: val_set,
        test: test_set,
        columns,
    })
}

/// The model config with `c` resolved to the prepared column count.
pub fn resolved_model_config(run: &RunConfig, prepared: &PreparedData) -> Result<ModelConfig> {
    let mut cfg = run.model.clone();
    cfg.c = prepared.columns.len();
    cfg.validate()?;
    Ok(cfg)
}

pub struct RunArtifacts {
    pub model: DeformTime,
    pub report: TrainReport,
    pub prepared: PreparedData,
}

/// Prepare the data and train a fresh model on it.
pub fn train_run(
    run: &RunConfig,
    log: Option<&mut dyn std::io::Write>,
) -> Result<RunArtifacts> {
    run.train.validate()?;
    let prepared = prepare(run)?;
    if prepared.train.is_empty() || prepared.validation.is_empty() {
        return Err(Error::Data(format!(
            "split left train={} validation={} windows; widen the ranges",
            prepared.train.len(),
            prepared.validation.len()
        )));
    }
    let cfg = resolved_model_config(run, &prepared)?;
    let mut model = DeformTime::init(cfg, run.variant, run.train.seed)?;
    let report = train(&mut model, &prepared.train, &prepared.validation, &run.train, log)?;
    Ok(RunArtifacts {
        model,
        report,
        prepared,
    })
}

/// Check that a checkpoint fits the prepared data, naming every offending
/// key on mismatch.
pub fn check_compatibility(model: &DeformTime, run: &RunConfig, prepared: &PreparedData) -> Result<()> {
    let expected = resolved_model_config(run, prepared)?;
    let got = &model.config;
    let mut diffs = Vec::new();
    if got.l != expected.l {
        diffs.push(format!("l: checkpoint {} vs config {}", got.l, expected.l));
    }
    if got.h != expected.h {
        diffs.push(format!("h: checkpoint {} vs config {}", got.h, expected.h));
    }
    if got.delta != expected.delta {
        diffs.push(format!(
            "delta: checkpoint {} vs config {}",
            got.delta, expected.delta
        ));
    }
    if got.c != expected.c {
        diffs.push(format!(
            "c: checkpoint {} vs prepared data {}",
            got.c, expected.c
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint incompatible with this run: {}",
            diffs.join("; ")
        )))
    }
}

/// Evaluate a forecaster on one split of the prepared data, reporting in
/// original units.
pub fn evaluate_split(
    forecaster: &dyn Forecaster,
    prepared: &PreparedData,
    which: SplitChoice,
    mode: EvalMode,
) -> Result<ForecastReport> {
    evaluate(
        forecaster,
        prepared.split(which),
        Some(&prepared.stats),
        which.name(),
        mode,
    )
}

/// A model report next to the persistence baseline on the same samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: ForecastReport,
    pub persistence: ForecastReport,
    /// Relative headline-MAE reduction against persistence; positive means
    /// the model is better.
    pub mae_reduction: f64,
}

pub fn compare_with_persistence(
    forecaster: &dyn Forecaster,
    prepared: &PreparedData,
    which: SplitChoice,
    mode: EvalMode,
) -> Result<ComparisonReport> {
    let model_report = evaluate_split(forecaster, prepared, which, mode)?;
    let base_report = evaluate_split(&PersistenceBaseline, prepared, which, mode)?;
    let base_mae = base_report.headline().mae;
    let mae_reduction = if base_mae == 0.0 {
        0.0
    } else {
        (base_mae - model_report.headline().mae) / base_mae
    };
    Ok(ComparisonReport {
        model: model_report,
        persistence: base_report,
        mae_reduction,
    })
}

/// Shift every offset-head parameter by a small uniform draw.
///
/// A freshly initialised model deforms nothing, so each sampling position
/// sits exactly on a grid node where linear interpolation has a kink: the
/// analytic pass takes the one-sided slope while central differences
/// average both sides. Finite-difference checks should run at a nudged,
/// differentiable point instead.
pub fn nudge_offsets(model: &mut DeformTime, scale: f64, seed: u64) {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.iter_mut() {
        if !name.contains(".off.") {
            continue;
        }
        for x in t.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

/// Compare the analytic gradient of a one-sample loss against central
/// differences, probing up to `max_coords` evenly spaced coordinates per
/// parameter tensor. Returns the worst relative error.
///
/// Each coordinate is probed at `step` and at `step / 10`, keeping the
/// smaller disagreement. A probe window occasionally straddles an
/// activation kink (a relu preactivation within `step` of zero), which
/// poisons that step size alone; a genuinely wrong gradient disagrees at
/// every step, so the two-step minimum still catches it.
pub fn model_grad_check(
    model: &DeformTime,
    sample: &WindowSample,
    loss: Loss,
    max_coords: usize,
    step: f64,
) -> Result<f64> {
    if max_coords == 0 {
        return Err(Error::invalid("model_grad_check", "max_coords must be positive"));
    }
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &sample.z, &ForwardOptions::eval())?;
    let loss_id = loss_graph(&mut tape, pass.output, &sample.targets, loss)?;
    tape.backward(loss_id)?;

    let loss_at = |m: &DeformTime| -> Result<f64> {
        let mut t = Tape::new();
        let p = m.forward(&mut t, &sample.z, &ForwardOptions::eval())?;
        let l = loss_graph(&mut t, p.output, &sample.targets, loss)?;
        Ok(t.value(l).data()[0])
    };

    let mut work = model.clone();
    let mut worst = 0.0f64;
    for (name, id) in &pass.bound {
        let numel = model.params.get(name).expect("bound parameter").numel();
        let grad = tape.grad(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let probes = max_coords.min(numel);
        for j in 0..probes {
            let coord = j * numel / probes;
            let analytic = grad[coord];
            let original = work.params.get(name).unwrap().data()[coord];
            let mut best = f64::INFINITY;
            for h in [step, step / 10.0] {
                work.params.get_mut(name).unwrap().data_mut()[coord] = original + h;
                let up = loss_at(&work)?;
                work.params.get_mut(name).unwrap().data_mut()[coord] = original - h;
                let down = loss_at(&work)?;
                work.params.get_mut(name).unwrap().data_mut()[coord] = original;
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                best = best.min((analytic - numeric).abs() / denom);
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Closed-form and measured multiply counts for the run's model shape.
pub fn opcount_run(run: &RunConfig, prepared: Option<&PreparedData>) -> Result<(u64, u64, f64)> {
    let cfg = match prepared {
        Some(p) => resolved_model_config(run, p)?,
        None => {
            run.model.validate()?;
            run.model.clone()
        }
    };
    let model = DeformTime::init(cfg.clone(), run.variant, run.train.seed)?;
    let predicted = predicted_op_count(&cfg);
    let measured = measured_op_count(&model)?;
    let ratio = measured as f64 / predicted as f64;
    Ok((predicted, measured, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::{generate_synthetic, write_csv, SyntheticSpec};

    fn synth_csv(dir: &std::path::Path, t: usize) -> PathBuf {
        let spec = SyntheticSpec {
            t,
            c: 3,
            lags: vec![2, 4, 6],
            weights: vec![1.0, 0.6, 0.4],
            seasonal_period: 50,
            seasonal_amplitude: 0.5,
            noise_std: 0.05,
            seed: 11,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let path = dir.join("series.csv");
        write_csv(&ds, &path, &[]).unwrap();
        path
    }

    fn run_config(csv: PathBuf) -> RunConfig {
        RunConfig {
            data: DataConfig {
                csv,
                target: "y".into(),
                weekly_to_daily: false,
                anchor_offset: 3,
                rank: true,
                tau: None,
                window_standardize: false,
                season_starts: None,
                onset_threshold: None,
                val_frac: 0.15,
                test_frac: 0.2,
            },
            model: ModelConfig {
                l: 10,
                h: 3,
                delta: 1,
                c: 3,
                d: 8,
                g: 2,
                alpha: 2.0,
                k: 3,
                ell: 5,
                s: 5,
                r_per_layer: vec![1, 2],
                drop_rate: 0.0,
                leaky_slope: 0.01,
                learn_alpha: false,
            },
            train: TrainConfig {
                lr0: 1e-3,
                schedule: crate::training::Schedule::HalveEachEpoch,
                batch_size: 16,
                max_epochs: 2,
                patience: 5,
                loss: Loss::Mse,
                seed: 3,
                drop_rate: 0.0,
                target_train_loss: None,
                grid: None,
                trial_id: None,
            },
            variant: AblationVariant::Full,
            eval_mode: EvalMode::AtHorizon,
            checkpoint_dir: PathBuf::from("runs"),
            report_dir: PathBuf::from("runs"),
        }
    }

    #[test]
    fn prepare_partitions_without_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_config(synth_csv(dir.path(), 400));
        let prepared = prepare(&run).unwrap();
        let (l, h, delta) = (run.model.l, run.model.h, run.model.delta);

        assert!(!prepared.train.is_empty());
        assert!(!prepared.validation.is_empty());
        assert!(!prepared.test.is_empty());
        // Window count: every retained sample sits wholly inside one range.
        for (samples, ranges) in [
            (&prepared.train, prepared.plan.train.clone()),
            (&prepared.validation, prepared.plan.validation.clone()),
            (&prepared.test, vec![prepared.plan.test.clone()]),
        ] {
            for w in samples.iter() {
                let (lo, hi) = w.span(l, h, delta);
                assert!(
                    ranges.iter().any(|r| r.start <= lo && hi < r.end),
                    "window at {} leaks across a boundary",
                    w.anchor
                );
            }
        }
        // Columns were ranked: stored names are a permutation of the originals.
        let mut names = prepared.columns.clone();
        names.sort();
        assert_eq!(names, vec!["x0", "x1", "x2"]);
    }

    #[test]
    fn ranking_prefers_the_strong_driver() {
        // With a dominant weight and short lag, x0 should rank first.
        let dir = tempfile::tempdir().unwrap();
        let run = run_config(synth_csv(dir.path(), 400));
        let prepared = prepare(&run).unwrap();
        assert_eq!(prepared.columns[0], "x0");
    }

    #[test]
    fn resolved_config_follows_selection() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = run_config(synth_csv(dir.path(), 400));
        run.data.tau = Some(0.0);
        let prepared = prepare(&run).unwrap();
        let cfg = resolved_model_config(&run, &prepared).unwrap();
        assert_eq!(cfg.c, prepared.columns.len());
        assert!(cfg.c >= 1);
    }

    #[test]
    fn train_run_completes_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_config(synth_csv(dir.path(), 260));
        let mut log = Vec::new();
        let artifacts = train_run(&run, Some(&mut log)).unwrap();
        assert_eq!(artifacts.report.epochs.len(), 2);
        assert!(artifacts.report.best_epoch >= 1);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 1);
        assert!(first["val_loss"].is_number());
    }

    #[test]
    fn compatibility_diff_names_keys() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_config(synth_csv(dir.path(), 260));
        let prepared = prepare(&run).unwrap();
        let mut other = run.model.clone();
        other.c = prepared.columns.len();
        other.h = 5;
        other.l = 12;
        let model = DeformTime::init(other, AblationVariant::Full, 1).unwrap();
        let err = check_compatibility(&model, &run, &prepared).unwrap_err().to_string();
        assert!(err.contains("h:"), "{}", err);
        assert!(err.contains("l:"), "{}", err);
        assert!(!err.contains("delta:"), "{}", err);
    }

    #[test]
    fn persistence_comparison_is_zero_against_itself() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_config(synth_csv(dir.path(), 300));
        let prepared = prepare(&run).unwrap();
        let cmp = compare_with_persistence(
            &PersistenceBaseline,
            &prepared,
            SplitChoice::Test,
            EvalMode::AtHorizon,
        )
        .unwrap();
        assert!(cmp.mae_reduction.abs() < 1e-12);
    }
}
