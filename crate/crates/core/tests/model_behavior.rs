//! Behavioural checks of the assembled model: output shapes, dropout
//! semantics, gradient connectivity, and the offset trace.

use deformtime::model::{AblationVariant, DeformTime, ForwardOptions, ModelConfig};
use deformtime::numerics::{Tape, Tensor};
use deformtime::training::{loss_graph, Loss};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(learn_alpha: bool) -> ModelConfig {
    ModelConfig {
        l: 10,
        h: 3,
        delta: 1,
        c: 3,
        d: 8,
        g: 2,
        alpha: 2.0,
        k: 3,
        ell: 4,
        s: 3,
        r_per_layer: vec![1, 2],
        drop_rate: 0.0,
        leaky_slope: 0.01,
        learn_alpha,
    }
}

fn random_window(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.l * (cfg.c + 1))
        .map(|_| r.gen_range(-1.5..1.5))
        .collect();
    Tensor::matrix(cfg.l, cfg.c + 1, data).unwrap()
}

#[test]
fn forward_output_shape_and_determinism() {
    let cfg = small_config(false);
    let model = DeformTime::init(cfg.clone(), AblationVariant::Full, 9).unwrap();
    let window = random_window(&cfg, 1);

    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, &window, &ForwardOptions::eval())
        .unwrap();
    assert_eq!(tape.value(pass.output).shape(), &[cfg.h]);

    let first = model.predict(&window).unwrap();
    let second = model.predict(&window).unwrap();
    assert_eq!(first.len(), cfg.h);
    assert_eq!(first, second);
    assert!(first.iter().all(|v| v.is_finite()));
}

#[test]
fn train_mode_at_zero_rate_matches_eval() {
    let cfg = small_config(false);
    let model = DeformTime::init(cfg.clone(), AblationVariant::Full, 10).unwrap();
    let window = random_window(&cfg, 2);

    let mut tape = Tape::new();
    let eval_pass = model
        .forward(&mut tape, &window, &ForwardOptions::eval())
        .unwrap();
    let eval_out = tape.value(eval_pass.output).data().to_vec();

    let mut tape = Tape::new();
    let train_pass = model
        .forward(&mut tape, &window, &ForwardOptions::train(0.0, 77))
        .unwrap();
    let train_out = tape.value(train_pass.output).data().to_vec();

    assert_eq!(eval_out, train_out);
}

#[test]
fn saturated_drop_collapses_layers_to_identity() {
    // With only one branch per layer, a dropped branch returns its input
    // unchanged, so at a drop rate of nearly one every layer becomes the
    // identity and the embedded input reaches the decoder untouched.
    let cfg = small_config(false);
    let model = DeformTime::init(cfg.clone(), AblationVariant::NoTdab, 11).unwrap();
    let window = random_window(&cfg, 3);

    let mut tape = Tape::new();
    let mut opts = ForwardOptions::train(1.0 - 1e-12, 5);
    opts.trace = true;
    let pass = model.forward(&mut tape, &window, &opts).unwrap();
    let trace = pass.trace.expect("trace requested");
    let z_e = trace.z_e.expect("embedding recorded");
    for layer in &trace.layers {
        let out = layer.output.as_ref().expect("layer output recorded");
        assert_eq!(out.data(), z_e.data());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small_config(true);
    let mut model = DeformTime::init(cfg.clone(), AblationVariant::Full, 12).unwrap();
    // At initialization the offset heads output exactly zero, which leaves
    // their upstream convolutions with structurally zero gradients; move
    // every parameter off that special point first.
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
    }
    let window = random_window(&cfg, 4);
    let targets: Vec<f64> = (0..cfg.h).map(|_| r.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, &window, &ForwardOptions::eval())
        .unwrap();
    let loss = loss_graph(&mut tape, pass.output, &targets, Loss::Mse).unwrap();
    tape.backward(loss).unwrap();

    for (name, id) in &pass.bound {
        let grad = tape
            .grad(*id)
            .unwrap_or_else(|| panic!("no gradient slot for {}", name));
        assert!(
            grad.iter().any(|v| *v != 0.0),
            "parameter {} received an all-zero gradient",
            name
        );
    }
}

#[test]
fn trace_records_offset_fields_per_patch_and_group() {
    let cfg = small_config(false);
    let model = DeformTime::init(cfg.clone(), AblationVariant::Full, 13).unwrap();
    let window = random_window(&cfg, 6);

    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, &window, &ForwardOptions::traced())
        .unwrap();
    let trace = pass.trace.expect("trace requested");
    assert_eq!(trace.layers.len(), cfg.n_layers());
    for (j, layer) in trace.layers.iter().enumerate() {
        assert_eq!(layer.vdab_row_offsets.len(), cfg.n_patches());
        assert_eq!(layer.vdab_col_offsets.len(), cfg.n_patches());
        for t in layer.vdab_row_offsets.iter().chain(&layer.vdab_col_offsets) {
            assert_eq!(t.shape(), &[cfg.ell, cfg.d]);
        }
        assert_eq!(layer.tdab_offsets.len(), cfg.r_per_layer[j]);
        for per_patch in &layer.tdab_offsets {
            assert_eq!(per_patch.len(), cfg.g);
            for t in per_patch {
                assert_eq!(t.numel(), cfg.kappa(j));
            }
        }
        assert!(layer.output.is_some());
    }
}

#[test]
fn all_variants_forward_and_differ() {
    let cfg = small_config(false);
    let window = random_window(&cfg, 7);
    let mut outputs = Vec::new();
    for variant in AblationVariant::ALL {
        let model = DeformTime::init(cfg.clone(), variant, 21).unwrap();
        let out = model.predict(&window).unwrap();
        assert_eq!(out.len(), cfg.h, "{}", variant.name());
        assert!(out.iter().all(|v| v.is_finite()), "{}", variant.name());
        outputs.push((variant.name(), out));
    }
    // The two single-branch variants drop different halves of each layer,
    // so with shared init seeds their predictions must not coincide.
    let no_vdab = &outputs.iter().find(|(n, _)| *n == "no_vdab").unwrap().1;
    let no_tdab = &outputs.iter().find(|(n, _)| *n == "no_tdab").unwrap().1;
    assert_ne!(no_vdab, no_tdab);
}
