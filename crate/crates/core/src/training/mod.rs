//! Optimisation: bias-corrected Adam, the two learning-rate schedules,
//! mini-batch training with early stopping on validation loss, and the
//! grid-search / ablation harness on top.

mod grid;

pub use grid::{grid_search, GridOutcome, GridTrial};

use crate::dataprep::WindowSample;
use crate::error::{Error, Result};
use crate::model::{AblationVariant, DeformTime, ForwardOptions, ModelConfig, ParameterStore};
use crate::numerics::{Tape, Tensor, TensorId};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearToZero,
    HalveEachEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Mae,
}

/// One axis of a hyperparameter grid; axes keep their declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub loss: Loss,
    pub seed: u64,
    #[serde(default)]
    pub drop_rate: f64,
    /// Stop as soon as the epoch train loss falls below this.
    #[serde(default)]
    pub target_train_loss: Option<f64>,
    /// Hyperparameter axes for grid search; ignored by plain training.
    #[serde(default)]
    pub grid: Option<Vec<GridAxis>>,
    #[serde(default)]
    pub trial_id: Option<String>,
}

fn default_patience() -> usize {
    5
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "drop_rate {} must lie in [0, 1)",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::LinearToZero => {
            let frac = 1.0 - epoch as f64 / cfg.max_epochs as f64;
            cfg.lr0 * frac.max(0.0)
        }
        Schedule::HalveEachEpoch => cfg.lr0 * 0.5f64.powi(epoch as i32),
    }
}

/// First and second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// see a zero gradient: their moments decay but the math is unchanged.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let corr1 = 1.0 - beta1.powi(t);
    let corr2 = 1.0 - beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let numel = tensor.numel();
        if let Some(g) = grads.get(name) {
            if g.len() != numel {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for {} has {} elements, parameter {}", name, g.len(), numel),
                ));
            }
        }
        let (m, v) = state
            .slots
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
        if m.len() != numel {
            return Err(Error::shape(
                "adam_step",
                format!("state for {} does not match parameter shape", name),
            ));
        }
        let zero = vec![0.0; numel];
        let g = grads.get(name).map(Vec::as_slice).unwrap_or(&zero);
        let data = tensor.data_mut();
        for i in 0..numel {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    TargetReached,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub trial_id: Option<String>,
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// One-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    /// Filled by callers that persist the best model.
    pub checkpoint_path: Option<String>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn drop_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    splitmix(splitmix(seed ^ (epoch as u64 + 1)) ^ (sample as u64 + 1))
}

/// Loss node comparing a forecast against its targets.
pub fn loss_graph(
    tape: &mut Tape,
    pred: TensorId,
    targets: &[f64],
    loss: Loss,
) -> Result<TensorId> {
    let t = tape.constant(Tensor::new(vec![targets.len()], targets.to_vec())?);
    let diff = tape.sub(pred, t)?;
    match loss {
        Loss::Mse => {
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        }
        Loss::Mae => {
            let a = tape.abs(diff)?;
            tape.mean(a)
        }
    }
}

fn plain_loss(pred: &[f64], targets: &[f64], loss: Loss) -> f64 {
    let n = pred.len() as f64;
    match loss {
        Loss::Mse => {
            pred.iter()
                .zip(targets)
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>()
                / n
        }
        Loss::Mae => pred.iter().zip(targets).map(|(p, a)| (p - a).abs()).sum::<f64>() / n,
    }
}

/// Mean loss of the model over a sample set, eval mode.
pub fn eval_loss(model: &DeformTime, samples: &[WindowSample], loss: Loss) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("eval_loss", "empty sample set"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.predict(&s.z)?;
        total += plain_loss(&pred, &s.targets, loss);
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch training with per-epoch learning-rate schedule and early
/// stopping once the validation loss has not set a new strict minimum for
/// `patience` consecutive epochs. On return the model holds the
/// best-validation parameters. Each epoch appends one JSON line to `log`
/// when given.
pub fn train(
    model: &mut DeformTime,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "train and validation sets must be non-empty"));
    }

    let mut adam = AdamState::default();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut since_best = 0usize;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for e in 0..cfg.max_epochs {
        let lr = lr_at(e, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(e as u64 + 1);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch: e + 1,
                batch: batch_idx,
                detail,
            };
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &si in batch {
                let sample = &train_set[si];
                let mut tape = Tape::new();
                let opts = ForwardOptions::train(cfg.drop_rate, drop_seed(cfg.seed, e, si));
                let pass = match model.forward(&mut tape, &sample.z, &opts) {
                    Ok(p) => p,
                    Err(Error::NonFinite { op }) => {
                        return Err(diverged(format!("non-finite value in {}", op)))
                    }
                    Err(other) => return Err(other),
                };
                let loss_id = loss_graph(&mut tape, pass.output, &sample.targets, cfg.loss)?;
                batch_loss += tape.value(loss_id).data()[0];
                tape.backward(loss_id)?;
                for (name, id) in &pass.bound {
                    if let Some(g) = tape.grad(*id) {
                        match grads.get_mut(name) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(g) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(name.clone(), g.to_vec());
                            }
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(diverged("non-finite batch loss".into()));
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam_step(&mut model.params, &grads, &mut adam, lr, 0.9, 0.999, 1e-8)?;
            loss_sum += batch_loss;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = eval_loss(model, val_set, cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: e + 1,
                batch: 0,
                detail: "non-finite validation loss".into(),
            });
        }
        let record = EpochRecord {
            trial_id: cfg.trial_id.clone(),
            epoch: e + 1,
            lr,
            train_loss,
            val_loss,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        records.push(record);

        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((e + 1, val_loss, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop = StopReason::EarlyStopped;
                break 'epochs;
            }
        }
        if let Some(target) = cfg.target_train_loss {
            if train_loss < target {
                stop = StopReason::TargetReached;
                break 'epochs;
            }
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_val_loss,
        stop,
        checkpoint_path: None,
    })
}

/// Build a model factory for an ablation variant by name.
pub fn ablate(
    variant: &str,
    cfg: &ModelConfig,
) -> Result<impl Fn(u64) -> Result<DeformTime>> {
    let variant: AblationVariant = variant.parse()?;
    let cfg = cfg.clone();
    Ok(move |seed: u64| DeformTime::init(cfg.clone(), variant, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> TrainConfig {
        TrainConfig {
            lr0: 1e-3,
            schedule: Schedule::HalveEachEpoch,
            batch_size: 4,
            max_epochs: 10,
            patience: 5,
            loss: Loss::Mse,
            seed: 1,
            drop_rate: 0.0,
            target_train_loss: None,
            grid: None,
            trial_id: None,
        }
    }

    #[test]
    fn schedule_values() {
        let mut cfg = base_cfg();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(1, &cfg), 5e-4);
        assert_eq!(lr_at(2, &cfg), 2.5e-4);
        cfg.schedule = Schedule::LinearToZero;
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(5, &cfg) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(10, &cfg), 0.0);
        assert_eq!(lr_at(11, &cfg), 0.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut params = ParameterStore::default();
        params.insert("x", Tensor::scalar(0.0).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![1.0]);
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        let x = params.get("x").unwrap().data()[0];
        // m_hat = 1, v_hat = 1: step is -lr / (1 + eps).
        assert!((x + 1e-3).abs() < 1e-9, "x = {}", x);
    }

    #[test]
    fn adam_zero_grad_first_step_leaves_parameters() {
        let mut params = ParameterStore::default();
        params.insert("x", Tensor::scalar(3.5).unwrap());
        let grads = BTreeMap::new();
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params.get("x").unwrap().data()[0], 3.5);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        // loss = sum((x - c)^2), minimised at c.
        let c = [1.0, -2.0, 0.5];
        let mut params = ParameterStore::default();
        params.insert("x", Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let mut state = AdamState::default();
        let loss_of = |params: &ParameterStore| -> f64 {
            params
                .get("x")
                .unwrap()
                .data()
                .iter()
                .zip(&c)
                .map(|(x, c)| (x - c) * (x - c))
                .sum()
        };
        let before = loss_of(&params);
        let g: Vec<f64> = params
            .get("x")
            .unwrap()
            .data()
            .iter()
            .zip(&c)
            .map(|(x, c)| 2.0 * (x - c))
            .collect();
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), g);
        adam_step(&mut params, &grads, &mut state, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        assert!(loss_of(&params) < before);
    }

    #[test]
    fn early_stopping_walkthrough() {
        // Validation curve [5,4,4,4,4,4,4] with patience 5 stops at epoch
        // 7 with best epoch 2. Replayed against the improvement rule.
        let vals = [5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 99.0, 99.0];
        let patience = 5;
        let mut best: Option<(usize, f64)> = None;
        let mut since = 0;
        let mut stopped_at = None;
        for (i, &v) in vals.iter().enumerate() {
            if best.map_or(true, |(_, b)| v < b) {
                best = Some((i + 1, v));
                since = 0;
            } else {
                since += 1;
                if since >= patience {
                    stopped_at = Some(i + 1);
                    break;
                }
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(best, Some((2, 4.0)));
    }

    #[test]
    fn shuffle_differs_by_epoch_and_repeats_by_seed() {
        let shuffled = |seed: u64, epoch: u64| {
            let mut v: Vec<usize> = (0..16).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch + 1);
            v.shuffle(&mut rng);
            v
        };
        assert_eq!(shuffled(7, 0), shuffled(7, 0));
        assert_ne!(shuffled(7, 0), shuffled(7, 1));
        assert_ne!(shuffled(7, 0), shuffled(8, 0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        assert!(base_cfg().validate().is_ok());
    }
}
