//! Forecast scoring: error metrics, the persistence baseline and report
//! assembly.

use crate::dataprep::{NormStats, WindowSample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mean absolute error over paired series.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    paired(actual, predicted)?;
    let n = actual.len() as f64;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(&a, &p)| (a - p).abs())
        .sum::<f64>()
        / n)
}

/// Symmetric mean absolute percentage error in percent:
/// `100/n * sum |p - a| / (0.5 * (|p| + |a|))`, with a zero term whenever
/// both values are exactly zero. Bounded by 200.
pub fn smape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    paired(actual, predicted)?;
    let n = actual.len() as f64;
    let total: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(&a, &p)| {
            let denom = 0.5 * (a.abs() + p.abs());
            if denom == 0.0 {
                0.0
            } else {
                (p - a).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * total / n)
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    pearson_flagged(a, b).0
}

/// Pearson correlation plus a flag marking the degenerate constant case.
pub fn pearson_flagged(a: &[f64], b: &[f64]) -> (f64, bool) {
    if a.len() != b.len() || a.is_empty() {
        return (0.0, true);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return (0.0, true);
    }
    (cov / (va.sqrt() * vb.sqrt()), false)
}

fn paired(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::invalid(
            "metric",
            format!("series lengths differ: {} vs {}", actual.len(), predicted.len()),
        ));
    }
    if actual.is_empty() {
        return Err(Error::invalid("metric", "empty series"));
    }
    Ok(())
}

/// Anything that maps a window to an `H`-step forecast in normalised units.
pub trait Forecaster {
    fn forecast(&self, sample: &WindowSample) -> Result<Vec<f64>>;
    fn name(&self) -> &str;
}

/// Repeats the last seen value of the delayed target column across the
/// whole horizon.
pub struct PersistenceBaseline;

impl Forecaster for PersistenceBaseline {
    fn forecast(&self, sample: &WindowSample) -> Result<Vec<f64>> {
        Ok(vec![sample.endo_last; sample.targets.len()])
    }

    fn name(&self) -> &str {
        "persistence"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Score only the final step `t+H` of each forecast.
    #[default]
    AtHorizon,
    /// Pool all `H` outputs of every anchor.
    OverSequence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub smape: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
}

/// Scored forecasts for one split, in original (de-normalised) units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastReport {
    pub forecaster: String,
    pub split: String,
    pub horizon: usize,
    pub mode: EvalMode,
    pub anchors: Vec<usize>,
    pub predicted: Vec<Vec<f64>>,
    pub actual: Vec<Vec<f64>>,
    pub at_horizon: Metrics,
    pub over_sequence: Metrics,
    /// Set when the at-horizon correlation was degenerate (constant input).
    pub pearson_degenerate: bool,
}

impl ForecastReport {
    pub fn headline(&self) -> &Metrics {
        match self.mode {
            EvalMode::AtHorizon => &self.at_horizon,
            EvalMode::OverSequence => &self.over_sequence,
        }
    }
}

/// Run a forecaster over samples and score it. Predictions and truths are
/// de-normalised with `stats` when given.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    samples: &[WindowSample],
    stats: Option<&NormStats>,
    split: &str,
    mode: EvalMode,
) -> Result<ForecastReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let horizon = samples[0].targets.len();
    let denorm = |v: f64| stats.map(|s| s.denorm_target(v)).unwrap_or(v);

    let mut anchors = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut actual = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.targets.len() != horizon {
            return Err(Error::invalid("evaluate", "inconsistent horizons"));
        }
        let raw = forecaster.forecast(sample)?;
        if raw.len() != horizon {
            return Err(Error::invalid(
                "evaluate",
                format!("forecast of {} steps, expected {}", raw.len(), horizon),
            ));
        }
        anchors.push(sample.anchor);
        predicted.push(raw.iter().map(|&v| denorm(v)).collect::<Vec<f64>>());
        actual.push(sample.targets.iter().map(|&v| denorm(v)).collect::<Vec<f64>>());
    }

    let last_pred: Vec<f64> = predicted.iter().map(|p| p[horizon - 1]).collect();
    let last_act: Vec<f64> = actual.iter().map(|a| a[horizon - 1]).collect();
    let (rho, degenerate) = pearson_flagged(&last_act, &last_pred);
    let at_horizon = Metrics {
        mae: mae(&last_act, &last_pred)?,
        smape: smape(&last_act, &last_pred)?,
        pearson: Some(rho),
    };

    let flat_pred: Vec<f64> = predicted.iter().flatten().copied().collect();
    let flat_act: Vec<f64> = actual.iter().flatten().copied().collect();
    let over_sequence = Metrics {
        mae: mae(&flat_act, &flat_pred)?,
        smape: smape(&flat_act, &flat_pred)?,
        pearson: None,
    };

    Ok(ForecastReport {
        forecaster: forecaster.name().to_string(),
        split: split.to_string(),
        horizon,
        mode,
        anchors,
        predicted,
        actual,
        at_horizon,
        over_sequence,
        pearson_degenerate: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn mae_hand_value() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smape_hand_values() {
        let v = smape(&[2.0], &[1.0]).unwrap();
        assert!((v - 200.0 / 3.0).abs() < 1e-10);
        let v = smape(&[1.0], &[3.0]).unwrap();
        assert!((v - 100.0).abs() < 1e-12);
        // Both zero contributes nothing.
        assert_eq!(smape(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        // Opposite signs hit the upper bound.
        assert_eq!(smape(&[1.0], &[-1.0]).unwrap(), 200.0);
    }

    #[test]
    fn pearson_known_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = a.iter().map(|v| 3.0 * v + 1.0).collect();
        let down: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &up) - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &down) + 1.0).abs() < 1e-12);
        let (r, flag) = pearson_flagged(&a, &[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(r, 0.0);
        assert!(flag);
    }

    fn sample(anchor: usize, endo_last: f64, targets: Vec<f64>) -> WindowSample {
        WindowSample {
            anchor,
            z: Tensor::matrix(1, 1, vec![endo_last]).unwrap(),
            endo_last,
            targets,
        }
    }

    #[test]
    fn persistence_repeats_last_endo() {
        let s = sample(9, 4.2, vec![0.0, 0.0, 0.0]);
        let got = PersistenceBaseline.forecast(&s).unwrap();
        assert_eq!(got, vec![4.2, 4.2, 4.2]);
    }

    #[test]
    fn evaluate_two_anchor_hand_case() {
        // Two anchors, H = 2. At-horizon uses the two second entries; the
        // pooled block uses all four.
        let samples = vec![sample(5, 1.0, vec![2.0, 4.0]), sample(6, 2.0, vec![3.0, 6.0])];
        let report = evaluate(
            &PersistenceBaseline,
            &samples,
            None,
            "test",
            EvalMode::AtHorizon,
        )
        .unwrap();
        // Persistence predicts [1,1] and [2,2].
        assert_eq!(report.at_horizon.mae, (3.0 + 4.0) / 2.0);
        assert_eq!(report.over_sequence.mae, (1.0 + 3.0 + 1.0 + 4.0) / 4.0);
        assert_eq!(report.anchors, vec![5, 6]);
        assert!(!report.pearson_degenerate);
    }
}
