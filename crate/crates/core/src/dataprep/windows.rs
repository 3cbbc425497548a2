//! Supervised look-back windows.

use super::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One supervised sample anchored at step `t`: an `L x (C+1)` input whose
/// exogenous columns cover `t-L+1..=t` and whose last column holds the target
/// delayed by `delta` (rows `t-delta-L+1..=t-delta`), plus the `H` future
/// target values.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub anchor: usize,
    pub z: Tensor,
    /// Last value of the delayed target column, captured before any
    /// per-window rescaling so baselines read the series scale.
    pub endo_last: f64,
    pub targets: Vec<f64>,
}

impl WindowSample {
    /// First and last series index this sample touches (inclusive).
    pub fn span(&self, l: usize, h: usize, delta: usize) -> (usize, usize) {
        (self.anchor + 1 - l - delta, self.anchor + h)
    }
}

/// Enumerate every anchor for which the full input window, the delayed
/// target column and all `H` outputs exist. Produces exactly
/// `T - H - L - delta + 1` samples when that is positive.
pub fn build_windows(
    ds: &TimeSeriesDataset,
    l: usize,
    h: usize,
    delta: usize,
) -> Result<Vec<WindowSample>> {
    if l == 0 || h == 0 {
        return Err(Error::Data("window and horizon must be positive".into()));
    }
    let t_len = ds.len();
    let c = ds.n_exog();
    let first = l + delta - 1;
    if t_len < first + h + 1 {
        return Err(Error::Data(format!(
            "series of {} steps too short for L={}, H={}, delta={}",
            t_len, l, h, delta
        )));
    }
    let mut out = Vec::with_capacity(t_len - h - l - delta + 1);
    for anchor in first..=(t_len - 1 - h) {
        let mut data = Vec::with_capacity(l * (c + 1));
        for i in 0..l {
            let row_t = anchor + 1 - l + i;
            for col in &ds.exog {
                data.push(col[row_t]);
            }
            data.push(ds.target[row_t - delta]);
        }
        let targets = ds.target[anchor + 1..=anchor + h].to_vec();
        out.push(WindowSample {
            anchor,
            z: Tensor::matrix(l, c + 1, data)?,
            endo_last: ds.target[anchor - delta],
            targets,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: usize) -> TimeSeriesDataset {
        TimeSeriesDataset {
            timestamps: (0..t as i64).collect(),
            exog: vec![(0..t).map(|i| 100.0 + i as f64).collect()],
            exog_names: vec!["x".into()],
            target: (0..t).map(|i| i as f64).collect(),
            target_name: "y".into(),
            norm: None,
        }
    }

    #[test]
    fn window_count_matches_formula() {
        let ds = toy(20);
        let (l, h, delta) = (4, 2, 3);
        let ws = build_windows(&ds, l, h, delta).unwrap();
        assert_eq!(ws.len(), 20 - h - l - delta + 1);
        assert_eq!(ws.first().unwrap().anchor, l + delta - 1);
        assert_eq!(ws.last().unwrap().anchor, 20 - 1 - h);
    }

    #[test]
    fn window_contents_align() {
        let ds = toy(20);
        let ws = build_windows(&ds, 3, 2, 4).unwrap();
        let s = &ws[0]; // anchor 6
        assert_eq!(s.anchor, 6);
        // Exogenous rows cover 4..=6.
        assert_eq!(s.z.at(0, 0), 104.0);
        assert_eq!(s.z.at(2, 0), 106.0);
        // Delayed target column covers 0..=2.
        assert_eq!(s.z.at(0, 1), 0.0);
        assert_eq!(s.z.at(2, 1), 2.0);
        assert_eq!(s.targets, vec![7.0, 8.0]);
        assert_eq!(s.span(3, 2, 4), (0, 8));
    }

    #[test]
    fn too_short_series_errors() {
        let ds = toy(8);
        assert!(build_windows(&ds, 5, 3, 2).is_err());
    }
}
