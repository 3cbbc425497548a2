//! Randomised invariants over the numeric kernels, the data pipeline, and
//! the checkpoint format.

use deformtime::dataprep::{build_windows, standardize, TimeSeriesDataset};
use deformtime::evaluation::{mae, pearson_flagged, smape};
use deformtime::model::{
    read_checkpoint_bytes, write_checkpoint_bytes, AblationVariant, DeformTime, ModelConfig,
};
use deformtime::numerics::{bilinear_at, Tape, Tensor};
use deformtime::training::{lr_at, Loss, Schedule, TrainConfig};
use proptest::prelude::*;

fn series(target: Vec<f64>) -> TimeSeriesDataset {
    let n = target.len();
    TimeSeriesDataset {
        timestamps: (0..n as i64).collect(),
        exog: vec![(0..n).map(|i| i as f64 * 0.5 - 3.0).collect()],
        exog_names: vec!["x0".into()],
        target,
        target_name: "y".into(),
        norm: None,
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1..6usize,
        cols in 1..6usize,
        raw in prop::collection::vec(-30.0..30.0f64, 36),
    ) {
        let data = raw[..rows * cols].to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        for i in 0..rows {
            let row = &out[i * cols..(i + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn window_count_matches_closed_form(
        t in 1..80usize,
        l in 1..12usize,
        h in 1..6usize,
        delta in 0..15usize,
    ) {
        let ds = series((0..t).map(|i| i as f64).collect());
        match build_windows(&ds, l, h, delta) {
            Err(_) => prop_assert!(t < l + h + delta),
            Ok(ws) => {
                prop_assert_eq!(ws.len() as isize, t as isize - l as isize - h as isize - delta as isize + 1);
                for w in &ws {
                    let (lo, hi) = w.span(l, h, delta);
                    prop_assert!(lo <= hi && hi < t);
                }
            }
        }
    }

    #[test]
    fn metric_ranges_hold(
        pair in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..30),
    ) {
        let a: Vec<f64> = pair.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pair.iter().map(|p| p.1).collect();
        prop_assert!(mae(&a, &b).unwrap() >= 0.0);
        let s = smape(&a, &b).unwrap();
        prop_assert!((0.0..=200.0).contains(&s));
        let (rho, degenerate) = pearson_flagged(&a, &b);
        if !degenerate {
            prop_assert!(rho.abs() <= 1.0 + 1e-12);
        }

        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(smape(&a, &a).unwrap(), 0.0);
        let (self_rho, self_degenerate) = pearson_flagged(&a, &a);
        if !self_degenerate {
            prop_assert!((self_rho - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_inside_the_grid_is_a_convex_blend(
        rows in 1..6usize,
        cols in 1..6usize,
        raw in prop::collection::vec(-10.0..10.0f64, 36),
        rf in 0.0..1.0f64,
        cf in 0.0..1.0f64,
    ) {
        let data = raw[..rows * cols].to_vec();
        let grid = Tensor::matrix(rows, cols, data.clone()).unwrap();
        let row = rf * (rows - 1) as f64;
        let col = cf * (cols - 1) as f64;
        let v = bilinear_at(&grid, row, col);
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn standardize_then_denorm_recovers_the_target(
        target in prop::collection::vec(-50.0..50.0f64, 4..40),
    ) {
        let ds = series(target.clone());
        let (scaled, stats) = standardize(&ds, 0..ds.len()).unwrap();
        for (orig, z) in target.iter().zip(&scaled.target) {
            let back = stats.denorm_target(*z);
            prop_assert!((back - orig).abs() < 1e-8 * orig.abs().max(1.0));
        }
    }

    #[test]
    fn learning_rate_schedules_decay_to_nothing(
        lr0 in 1e-5..1.0f64,
        max_epochs in 1..50usize,
        halve in proptest::bool::ANY,
    ) {
        let cfg = TrainConfig {
            lr0,
            schedule: if halve { Schedule::HalveEachEpoch } else { Schedule::LinearToZero },
            batch_size: 8,
            max_epochs,
            patience: 3,
            loss: Loss::Mse,
            seed: 0,
            drop_rate: 0.0,
            target_train_loss: None,
            grid: None,
            trial_id: None,
        };
        let mut prev = f64::INFINITY;
        for epoch in 0..max_epochs + 2 {
            let lr = lr_at(epoch, &cfg);
            prop_assert!(lr >= 0.0 && lr <= lr0);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip(
        seed in prop::num::u64::ANY,
        variant_idx in 0..5usize,
        d_choice in 0..2usize,
    ) {
        let cfg = ModelConfig {
            l: 9,
            h: 2,
            delta: 1,
            c: 2,
            d: if d_choice == 0 { 8 } else { 12 },
            g: 2,
            alpha: 1.5,
            k: 3,
            ell: 4,
            s: 4,
            r_per_layer: vec![1, 2],
            drop_rate: 0.0,
            leaky_slope: 0.01,
            learn_alpha: false,
        };
        let variant = AblationVariant::ALL[variant_idx];
        let model = DeformTime::init(cfg, variant, seed).unwrap();
        let bytes = write_checkpoint_bytes(&model).unwrap();
        let reread = read_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(write_checkpoint_bytes(&reread).unwrap(), bytes);
    }
}
