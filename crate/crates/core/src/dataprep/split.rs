//! Train/validation/test partitioning.

use crate::error::{Error, Result};
use std::ops::Range;

/// Two weeks of daily steps: the run length used by the onset and outset
/// rules.
const EVENT_RUN: usize = 14;
/// Validation segments are 60 steps centred so their event is the 30th
/// element.
const SEGMENT_LEN: usize = 60;
const EVENT_OFFSET: usize = 29;

/// Index ranges assigned to each split. A window sample belongs to a split
/// only if every series index it touches lies inside one of that split's
/// ranges, so samples never straddle a boundary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub train: Vec<Range<usize>>,
    pub validation: Vec<Range<usize>>,
    pub test: Range<usize>,
    /// Human-readable notes about fallbacks taken while planning.
    pub flags: Vec<String>,
}

impl SplitPlan {
    /// Plain contiguous split: the last `test_frac` of the series is the
    /// test range, the `val_frac` before it validation, the rest training.
    pub fn from_fractions(t_len: usize, val_frac: f64, test_frac: f64) -> Result<SplitPlan> {
        if !(0.0..1.0).contains(&val_frac)
            || !(0.0..1.0).contains(&test_frac)
            || val_frac + test_frac >= 1.0
        {
            return Err(Error::Data(format!(
                "invalid split fractions val={}, test={}",
                val_frac, test_frac
            )));
        }
        let test_len = (t_len as f64 * test_frac).round() as usize;
        let val_len = (t_len as f64 * val_frac).round() as usize;
        let test_start = t_len - test_len;
        let val_start = test_start - val_len;
        Ok(SplitPlan {
            train: vec![0..val_start],
            validation: vec![val_start..test_start],
            test: test_start..t_len,
            flags: Vec::new(),
        })
    }

    pub fn train_span_end(&self) -> usize {
        self.test.start
    }
}

fn clip(range: Range<isize>, bounds: &Range<usize>) -> Range<usize> {
    let start = range.start.max(bounds.start as isize) as usize;
    let end = (range.end.min(bounds.end as isize)).max(start as isize) as usize;
    start..end
}

fn segment_around(event: usize, bounds: &Range<usize>) -> Range<usize> {
    let start = event as isize - EVENT_OFFSET as isize;
    clip(start..start + SEGMENT_LEN as isize, bounds)
}

/// First step in `season` from which the target stays above `threshold` for
/// two consecutive weeks.
fn find_onset(target: &[f64], season: &Range<usize>, threshold: f64) -> Option<usize> {
    if season.end - season.start < EVENT_RUN {
        return None;
    }
    (season.start..=season.end - EVENT_RUN)
        .find(|&t| target[t..t + EVENT_RUN].iter().all(|&v| v > threshold))
}

/// Last step in `season` up to which the target stayed above `threshold`
/// for two consecutive weeks; the reverse of the onset rule.
fn find_outset(target: &[f64], season: &Range<usize>, threshold: f64) -> Option<usize> {
    if season.end - season.start < EVENT_RUN {
        return None;
    }
    (season.start + EVENT_RUN - 1..season.end)
        .rev()
        .find(|&t| target[t + 1 - EVENT_RUN..=t].iter().all(|&v| v > threshold))
}

fn argmax(target: &[f64], season: &Range<usize>) -> usize {
    let mut best = season.start;
    for t in season.clone() {
        if target[t] > target[best] {
            best = t;
        }
    }
    best
}

/// Build a seasonal split plan. `season_starts` lists the first index of
/// each season in increasing order; the final season is the test range and
/// everything before it the training span. Three 60-step validation
/// segments are carved out of the training span, centred on:
///
/// * the outset of the third-to-last training season,
/// * the peak of the penultimate training season,
/// * the onset of the last training season,
///
/// each event sitting at the segment's 30th element. When an onset or outset
/// cannot be found the season midpoint is used and the fallback is flagged.
pub fn validation_split(
    target: &[f64],
    season_starts: &[usize],
    onset_threshold: f64,
) -> Result<SplitPlan> {
    let t_len = target.len();
    if season_starts.len() < 4 {
        return Err(Error::Data(
            "need at least four seasons: three for training, one for testing".into(),
        ));
    }
    if season_starts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("season starts must be strictly increasing".into()));
    }
    if *season_starts.last().unwrap() >= t_len {
        return Err(Error::Data("season start beyond the series".into()));
    }

    let mut seasons: Vec<Range<usize>> = season_starts
        .windows(2)
        .map(|w| w[0]..w[1])
        .collect();
    seasons.push(*season_starts.last().unwrap()..t_len);

    let test = seasons.last().unwrap().clone();
    let train_bounds = 0..test.start;
    let m = seasons.len() - 1; // index of the test season
    let onset_season = &seasons[m - 1];
    let peak_season = &seasons[m - 2];
    let outset_season = &seasons[m - 3];

    let mut flags = Vec::new();
    let event = |name: &str,
                     season: &Range<usize>,
                     found: Option<usize>,
                     flags: &mut Vec<String>| {
        found.unwrap_or_else(|| {
            flags.push(format!(
                "{} not found in season {}..{}; using its midpoint",
                name, season.start, season.end
            ));
            season.start + (season.end - season.start) / 2
        })
    };

    let outset_event = event(
        "outset",
        outset_season,
        find_outset(target, outset_season, onset_threshold),
        &mut flags,
    );
    let peak_event = argmax(target, peak_season);
    let onset_event = event(
        "onset",
        onset_season,
        find_onset(target, onset_season, onset_threshold),
        &mut flags,
    );

    let validation = vec![
        segment_around(outset_event, &train_bounds),
        segment_around(peak_event, &train_bounds),
        segment_around(onset_event, &train_bounds),
    ];

    // Training keeps whatever part of the span the validation segments do
    // not cover.
    let mut cut: Vec<Range<usize>> = validation.clone();
    cut.sort_by_key(|r| r.start);
    let mut merged: Vec<Range<usize>> = Vec::new();
    for r in cut {
        if let Some(last) = merged.last_mut() {
            if r.start <= last.end {
                last.end = last.end.max(r.end);
                continue;
            }
        }
        merged.push(r);
    }
    let mut train = Vec::new();
    let mut cursor = 0;
    for r in &merged {
        if r.start > cursor {
            train.push(cursor..r.start);
        }
        cursor = cursor.max(r.end);
    }
    if cursor < train_bounds.end {
        train.push(cursor..train_bounds.end);
    }

    Ok(SplitPlan {
        train,
        validation,
        test,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Four seasons of 100 steps; the target rises above 1.0 at a known day
    /// within each season and falls back before its end.
    fn seasonal_series(onset_day: usize) -> Vec<f64> {
        let mut y = vec![0.0; 400];
        for s in 0..4 {
            let base = s * 100;
            for d in 0..100 {
                let t = base + d;
                y[t] = if (onset_day..onset_day + 40).contains(&d) {
                    2.0
                } else {
                    0.5
                };
            }
        }
        y
    }

    #[test]
    fn onset_segment_centres_event() {
        let y = seasonal_series(35);
        let plan = validation_split(&y, &[0, 100, 200, 300], 1.0).unwrap();
        assert!(plan.flags.is_empty());
        // Onset season is 200..300, onset at day 235, segment [206, 266).
        assert_eq!(plan.validation[2], 206..266);
        // Peak season 100..200: argmax is the first maximal step, 135.
        assert_eq!(plan.validation[1], 106..166);
        // Outset season 0..100: last step with 14 preceding days above
        // threshold is day 74 (run 35..75). The segment is clipped to the
        // training span, not the season, so it may reach into the next one.
        assert_eq!(plan.validation[0], 45..105);
        assert_eq!(plan.test, 300..400);
    }

    #[test]
    fn fallback_is_flagged() {
        let y = vec![0.0; 400];
        let plan = validation_split(&y, &[0, 100, 200, 300], 1.0).unwrap();
        assert_eq!(plan.flags.len(), 2);
        // Midpoint fallbacks still produce three segments.
        assert_eq!(plan.validation.len(), 3);
    }

    #[test]
    fn train_ranges_exclude_validation() {
        let y = seasonal_series(35);
        let plan = validation_split(&y, &[0, 100, 200, 300], 1.0).unwrap();
        for r in &plan.train {
            for v in &plan.validation {
                assert!(r.end <= v.start || r.start >= v.end);
            }
            assert!(r.end <= plan.test.start);
        }
        let covered: usize = plan
            .train
            .iter()
            .chain(plan.validation.iter())
            .map(|r| r.len())
            .sum();
        // Segments may overlap in general, but not in this construction.
        assert_eq!(covered, plan.test.start);
    }

    #[test]
    fn needs_four_seasons() {
        let y = vec![0.0; 300];
        assert!(validation_split(&y, &[0, 100, 200], 1.0).is_err());
    }

    #[test]
    fn from_fractions_partitions() {
        let plan = SplitPlan::from_fractions(100, 0.15, 0.2).unwrap();
        assert_eq!(plan.train, vec![0..65]);
        assert_eq!(plan.validation, vec![65..80]);
        assert_eq!(plan.test, 80..100);
    }
}
