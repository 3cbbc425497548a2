//! CSV ingestion, normalisation, feature ranking and window construction.

mod split;
mod synth;
mod windows;

pub use split::{validation_split, SplitPlan};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use windows::{build_windows, WindowSample};

use crate::error::{Error, Result};
use crate::evaluation::pearson;
use chrono::Datelike;
use std::path::Path;

/// A fully ingested multivariable series: exogenous columns plus the target,
/// sampled on consecutive integer steps with no missing values.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub timestamps: Vec<i64>,
    /// Column-major exogenous variables, each of length `len()`.
    pub exog: Vec<Vec<f64>>,
    pub exog_names: Vec<String>,
    pub target: Vec<f64>,
    pub target_name: String,
    /// Present after [`standardize`] has run.
    pub norm: Option<NormStats>,
}

/// Per-column mean and population standard deviation fitted on a training
/// range; used to normalise inputs and de-normalise predictions.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub exog: Vec<(f64, f64)>,
    pub target: (f64, f64),
}

impl NormStats {
    pub fn denorm_target(&self, v: f64) -> f64 {
        let (mean, std) = self.target;
        if std < STD_FLOOR {
            mean
        } else {
            v * std + mean
        }
    }
}

const STD_FLOOR: f64 = 1e-12;

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_exog(&self) -> usize {
        self.exog.len()
    }

    /// Reorder the exogenous columns by the given permutation.
    pub fn reorder_exog(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.exog.len() {
            return Err(Error::Data(format!(
                "permutation of length {} for {} columns",
                perm.len(),
                self.exog.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Data("invalid permutation".into()));
            }
            seen[p] = true;
        }
        self.exog = perm.iter().map(|&p| self.exog[p].clone()).collect();
        self.exog_names = perm.iter().map(|&p| self.exog_names[p].clone()).collect();
        Ok(())
    }
}

fn parse_timestamp(raw: &str, row: usize) -> Result<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(date) = chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(i64::from(date.num_days_from_ce()));
    }
    Err(Error::Data(format!(
        "row {}: timestamp {:?} is neither an integer nor a YYYY-MM-DD date",
        row, raw
    )))
}

/// Load a CSV with a header row, a leading timestamp column and one numeric
/// column per variable. Steps must be consecutive: gaps, duplicates and
/// missing cells are rejected. Lines starting with `#` are skipped.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot open {:?}: {}", path.as_ref(), e)))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header: {}", e)))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 {
        return Err(Error::Data(
            "need a timestamp column and at least one variable".into(),
        ));
    }
    let names = &headers[1..];
    let target_pos = names
        .iter()
        .position(|n| n == target_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "target column {:?} not found among {:?}",
                target_column, names
            ))
        })?;

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {}", i + 2, e)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {}: expected {} fields, got {}",
                i + 2,
                headers.len(),
                record.len()
            )));
        }
        let ts = parse_timestamp(&record[0], i + 2)?;
        if let Some(&prev) = timestamps.last() {
            if ts != prev + 1 {
                return Err(Error::Data(format!(
                    "row {}: timestamp {} does not follow {} (steps must be consecutive)",
                    i + 2,
                    ts,
                    prev
                )));
            }
        }
        timestamps.push(ts);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "row {}, column {:?}: cannot parse {:?} as a number",
                    i + 2,
                    names[j],
                    field
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {}, column {:?}: non-finite value",
                    i + 2,
                    names[j]
                )));
            }
            columns[j].push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let target = columns.remove(target_pos);
    let mut exog_names = names.to_vec();
    let target_name = exog_names.remove(target_pos);
    Ok(TimeSeriesDataset {
        timestamps,
        exog: columns,
        exog_names,
        target,
        target_name,
        norm: None,
    })
}

/// Write a dataset back out as CSV, with optional `#` comment lines first.
pub fn write_csv(
    ds: &TimeSeriesDataset,
    path: impl AsRef<Path>,
    comments: &[String],
) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path.as_ref())?;
    for line in comments {
        writeln!(file, "# {}", line)?;
    }
    let mut header = vec!["t".to_string()];
    header.extend(ds.exog_names.iter().cloned());
    header.push(ds.target_name.clone());
    writeln!(file, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields = vec![ds.timestamps[i].to_string()];
        for col in &ds.exog {
            fields.push(format!("{}", col[i]));
        }
        fields.push(format!("{}", ds.target[i]));
        writeln!(file, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Expand weekly values to a daily series. Week `i` anchors at day
/// `7*i + anchor_offset`; days between anchors interpolate linearly and days
/// outside the anchored span hold the nearest anchor value.
pub fn weekly_to_daily(weekly: &[f64], anchor_offset: usize) -> Result<Vec<f64>> {
    if anchor_offset > 6 {
        return Err(Error::Data("anchor_offset must lie in 0..=6".into()));
    }
    if weekly.is_empty() {
        return Err(Error::Data("empty weekly series".into()));
    }
    let n = weekly.len();
    let days = 7 * n;
    let mut out = Vec::with_capacity(days);
    let anchor = |k: usize| (7 * k + anchor_offset) as f64;
    for d in 0..days {
        let d = d as f64;
        let v = if d <= anchor(0) {
            weekly[0]
        } else if d >= anchor(n - 1) {
            weekly[n - 1]
        } else {
            let k = ((d - anchor_offset as f64) / 7.0).floor() as usize;
            let f = (d - anchor(k)) / 7.0;
            weekly[k] * (1.0 - f) + weekly[k + 1] * f
        };
        out.push(v);
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardise every column with mean and population standard deviation
/// fitted on `fit`, applied over the whole series. A column that is constant
/// on the fit range maps to zeros.
pub fn standardize(
    ds: &TimeSeriesDataset,
    fit: std::ops::Range<usize>,
) -> Result<(TimeSeriesDataset, NormStats)> {
    if fit.start >= fit.end || fit.end > ds.len() {
        return Err(Error::Data(format!(
            "fit range {:?} invalid for {} steps",
            fit,
            ds.len()
        )));
    }
    let apply = |col: &[f64]| -> (Vec<f64>, (f64, f64)) {
        let (mean, std) = mean_std(&col[fit.clone()]);
        let out = if std < STD_FLOOR {
            vec![0.0; col.len()]
        } else {
            col.iter().map(|&v| (v - mean) / std).collect()
        };
        (out, (mean, std))
    };
    let mut out = ds.clone();
    let mut exog_stats = Vec::with_capacity(ds.exog.len());
    for (col_out, col_in) in out.exog.iter_mut().zip(&ds.exog) {
        let (vals, stats) = apply(col_in);
        *col_out = vals;
        exog_stats.push(stats);
    }
    let (target_vals, target_stats) = apply(&ds.target);
    out.target = target_vals;
    let stats = NormStats {
        exog: exog_stats,
        target: target_stats,
    };
    out.norm = Some(stats.clone());
    Ok((out, stats))
}

/// Standardise each column of a window matrix in place using statistics from
/// the window itself. Applying it twice is a no-op up to rounding.
pub fn standardize_window(z: &mut crate::numerics::Tensor) {
    let (rows, cols) = (z.rows(), z.cols());
    let data = z.data_mut();
    for j in 0..cols {
        let column: Vec<f64> = (0..rows).map(|i| data[i * cols + j]).collect();
        let (mean, std) = mean_std(&column);
        for i in 0..rows {
            let v = &mut data[i * cols + j];
            *v = if std < STD_FLOOR { 0.0 } else { (*v - mean) / std };
        }
    }
}

/// Pearson correlation of each exogenous column against the target over
/// `range`, returned as a ranking permutation (strongest first, ties by
/// original position). With `absolute`, magnitude decides the order.
pub fn rank_by_correlation(
    ds: &TimeSeriesDataset,
    range: std::ops::Range<usize>,
    absolute: bool,
) -> Result<Vec<usize>> {
    if range.start >= range.end || range.end > ds.len() {
        return Err(Error::Data(format!(
            "alignment range {:?} invalid for {} steps",
            range,
            ds.len()
        )));
    }
    let y = &ds.target[range.clone()];
    let mut keyed: Vec<(usize, f64)> = ds
        .exog
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let r = pearson(&col[range.clone()], y);
            (i, if absolute { r.abs() } else { r })
        })
        .collect();
    keyed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(keyed.into_iter().map(|(i, _)| i).collect())
}

/// Drop exogenous columns whose correlation with the target over `range`
/// does not exceed `tau`, keeping the current column order.
pub fn select_features(
    ds: &TimeSeriesDataset,
    tau: f64,
    range: std::ops::Range<usize>,
    absolute: bool,
) -> Result<TimeSeriesDataset> {
    if range.start >= range.end || range.end > ds.len() {
        return Err(Error::Data(format!(
            "alignment range {:?} invalid for {} steps",
            range,
            ds.len()
        )));
    }
    let y = &ds.target[range.clone()];
    let keep: Vec<usize> = ds
        .exog
        .iter()
        .enumerate()
        .filter(|(_, col)| {
            let r = pearson(&col[range.clone()], y);
            (if absolute { r.abs() } else { r }) > tau
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(format!(
            "no exogenous column passes the correlation threshold {}; lower tau",
            tau
        )));
    }
    let mut out = ds.clone();
    out.exog = keep.iter().map(|&i| ds.exog[i].clone()).collect();
    out.exog_names = keep.iter().map(|&i| ds.exog_names[i].clone()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_csv_round_trip() {
        let f = write_temp("t,a,y,b\n0,1.0,10.0,5.0\n1,2.0,11.0,6.0\n2,3.0,12.0,7.0\n");
        let ds = load_csv(f.path(), "y").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.exog_names, vec!["a", "b"]);
        assert_eq!(ds.target, vec![10.0, 11.0, 12.0]);
        assert_eq!(ds.exog[1], vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn load_csv_rejects_gap() {
        let f = write_temp("t,y\n0,1.0\n2,2.0\n");
        assert!(load_csv(f.path(), "y").is_err());
    }

    #[test]
    fn load_csv_rejects_duplicate_and_reverse() {
        let f = write_temp("t,y\n0,1.0\n0,2.0\n");
        assert!(load_csv(f.path(), "y").is_err());
        let f = write_temp("t,y\n3,1.0\n2,2.0\n");
        assert!(load_csv(f.path(), "y").is_err());
    }

    #[test]
    fn load_csv_rejects_missing_cell() {
        let f = write_temp("t,a,y\n0,1.0,2.0\n1,,3.0\n");
        assert!(load_csv(f.path(), "y").is_err());
    }

    #[test]
    fn load_csv_parses_dates() {
        let f = write_temp("t,y\n2024-03-01,1.0\n2024-03-02,2.0\n");
        let ds = load_csv(f.path(), "y").unwrap();
        assert_eq!(ds.len(), 2);
        let f = write_temp("t,y\n2024-03-01,1.0\n2024-03-03,2.0\n");
        assert!(load_csv(f.path(), "y").is_err());
    }

    #[test]
    fn load_csv_skips_comments() {
        let f = write_temp("# generated\nt,y\n0,1.0\n1,2.0\n");
        let ds = load_csv(f.path(), "y").unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn weekly_to_daily_interpolates() {
        let daily = weekly_to_daily(&[10.0, 17.0], 3).unwrap();
        assert_eq!(daily.len(), 14);
        assert_eq!(daily[3], 10.0);
        assert_eq!(daily[10], 17.0);
        assert!((daily[5] - 12.0).abs() < 1e-12);
        // Before the first anchor and after the last, hold the anchor value.
        assert_eq!(daily[0], 10.0);
        assert_eq!(daily[13], 17.0);
    }

    #[test]
    fn standardize_population_convention() {
        let ds = TimeSeriesDataset {
            timestamps: vec![0, 1, 2],
            exog: vec![vec![1.0, 2.0, 3.0], vec![4.0, 4.0, 4.0]],
            exog_names: vec!["a".into(), "b".into()],
            target: vec![1.0, 2.0, 3.0],
            target_name: "y".into(),
            norm: None,
        };
        let (out, stats) = standardize(&ds, 0..3).unwrap();
        // Population std of [1,2,3] is sqrt(2/3) = 0.8165.
        let std = (2.0f64 / 3.0).sqrt();
        for (i, v) in out.target.iter().enumerate() {
            let want = ((i + 1) as f64 - 2.0) / std;
            assert!((v - want).abs() < 1e-12);
        }
        assert!((out.target[0] + 1.224_744_871_391_589).abs() < 1e-12);
        // Constant column maps to zeros.
        assert_eq!(out.exog[1], vec![0.0, 0.0, 0.0]);
        assert!((stats.denorm_target(out.target[2]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_window_idempotent() {
        let mut z = crate::numerics::Tensor::matrix(3, 2, vec![1.0, 9.0, 2.0, 9.5, 6.0, 8.0])
            .unwrap();
        standardize_window(&mut z);
        let once = z.data().to_vec();
        standardize_window(&mut z);
        for (a, b) in once.iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ranking_orders_by_correlation() {
        let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ds = TimeSeriesDataset {
            timestamps: (0..50).collect(),
            exog: vec![
                t.iter().map(|v| -v).collect(),          // r = -1
                t.iter().map(|v| v * 2.0 + 1.0).collect(), // r = 1
                vec![3.0; 50],                            // constant, r = 0
            ],
            exog_names: vec!["neg".into(), "pos".into(), "flat".into()],
            target: t.clone(),
            target_name: "y".into(),
            norm: None,
        };
        assert_eq!(rank_by_correlation(&ds, 0..50, false).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_by_correlation(&ds, 0..50, true).unwrap(), vec![0, 1, 2]);

        let kept = select_features(&ds, 0.5, 0..50, false).unwrap();
        assert_eq!(kept.exog_names, vec!["pos"]);
        assert!(select_features(&ds, 1.5, 0..50, false).is_err());
    }
}
