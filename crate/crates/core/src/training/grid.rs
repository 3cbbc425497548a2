//! Exhaustive (or budget-capped) grid search over declared hyperparameter
//! axes. Points enumerate like nested loops in declaration order, so a
//! budget always cuts a reproducible prefix.

use super::GridAxis;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTrial {
    pub trial_id: String,
    pub point: BTreeMap<String, f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_index: usize,
    pub trials: Vec<GridTrial>,
}

impl GridOutcome {
    pub fn best(&self) -> &GridTrial {
        &self.trials[self.best_index]
    }
}

/// Run `run` on every grid point (first axis slowest), keeping the lowest
/// validation loss; ties go to the earlier point.
pub fn grid_search(
    axes: &[GridAxis],
    budget: Option<usize>,
    mut run: impl FnMut(&str, &BTreeMap<String, f64>) -> Result<f64>,
) -> Result<GridOutcome> {
    if axes.is_empty() {
        return Err(Error::invalid("grid_search", "no axes declared"));
    }
    for axis in axes {
        if axis.values.is_empty() {
            return Err(Error::invalid(
                "grid_search",
                format!("axis {:?} has no candidate values", axis.param),
            ));
        }
    }
    let total: usize = axes.iter().map(|a| a.values.len()).product();
    let cap = budget.map_or(total, |b| b.min(total));
    if cap == 0 {
        return Err(Error::invalid("grid_search", "budget allows no trials"));
    }

    let mut trials = Vec::with_capacity(cap);
    let mut best_index = 0usize;
    let mut indices = vec![0usize; axes.len()];
    for trial in 0..cap {
        let mut point = BTreeMap::new();
        for (axis, &i) in axes.iter().zip(&indices) {
            point.insert(axis.param.clone(), axis.values[i]);
        }
        let trial_id = format!("trial-{:03}", trial);
        let val_loss = run(&trial_id, &point)?;
        trials.push(GridTrial {
            trial_id,
            point,
            val_loss,
        });
        if val_loss < trials[best_index].val_loss {
            best_index = trial;
        }

        // Odometer with the last axis fastest.
        for pos in (0..axes.len()).rev() {
            indices[pos] += 1;
            if indices[pos] < axes[pos].values.len() {
                break;
            }
            indices[pos] = 0;
        }
    }
    Ok(GridOutcome { best_index, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes() -> Vec<GridAxis> {
        vec![
            GridAxis {
                param: "lr0".into(),
                values: vec![0.1, 0.2],
            },
            GridAxis {
                param: "d".into(),
                values: vec![8.0, 16.0, 32.0],
            },
        ]
    }

    #[test]
    fn enumerates_in_declaration_order() {
        let mut seen = Vec::new();
        grid_search(&axes(), None, |_, p| {
            seen.push((p["lr0"], p["d"]));
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(
            seen,
            vec![
                (0.1, 8.0),
                (0.1, 16.0),
                (0.1, 32.0),
                (0.2, 8.0),
                (0.2, 16.0),
                (0.2, 32.0)
            ]
        );
    }

    #[test]
    fn budget_cuts_a_prefix() {
        let mut seen = Vec::new();
        let out = grid_search(&axes(), Some(4), |_, p| {
            seen.push(p["d"]);
            Ok(seen.len() as f64)
        })
        .unwrap();
        assert_eq!(seen, vec![8.0, 16.0, 32.0, 8.0]);
        assert_eq!(out.trials.len(), 4);
        assert_eq!(out.best().trial_id, "trial-000");
    }

    #[test]
    fn picks_minimum_with_earlier_tie() {
        let losses = [3.0, 1.0, 1.0, 0.5, 0.5, 2.0];
        let mut i = 0;
        let out = grid_search(&axes(), None, |_, _| {
            let l = losses[i];
            i += 1;
            Ok(l)
        })
        .unwrap();
        assert_eq!(out.best_index, 3);
        assert_eq!(out.best().val_loss, 0.5);
    }

    #[test]
    fn single_point_grid_selects_it() {
        let one = vec![GridAxis {
            param: "alpha".into(),
            values: vec![3.0],
        }];
        let out = grid_search(&one, None, |_, p| Ok(p["alpha"])).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best().point["alpha"], 3.0);
    }

    #[test]
    fn rejects_empty_declarations() {
        assert!(grid_search(&[], None, |_, _| Ok(0.0)).is_err());
        let empty_axis = vec![GridAxis {
            param: "x".into(),
            values: vec![],
        }];
        assert!(grid_search(&empty_axis, None, |_, _| Ok(0.0)).is_err());
    }
}
