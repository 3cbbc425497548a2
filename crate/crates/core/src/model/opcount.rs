//! Closed-form multiply count for one forward pass, next to the measured
//! count from the tape's instrumentation. The closed form tracks the
//! dominant projection, attention and sampling terms; biases, activations
//! and the recurrent gates fall under its slack.

use super::{DeformTime, ForwardOptions, ModelConfig};
use crate::error::Result;
use crate::numerics::{Tape, Tensor};

/// Expected multiplies for one forward pass of `cfg`.
///
/// Per layer the count is `n[(k²+1)ℓd + 3ℓd² + 3ℓ²d + nℓdL]` for the
/// variable branch plus `r[(k+1)κd + 3κd² + 3κ²d]` for the temporal one,
/// plus `2d + 6d²L` of merge and perceptron work; embedding adds
/// `(C+1)dL + d` and the decoder `2d²L`. Layers contribute with their own
/// `r` and `κ`, which reduces to the doubled shared-`r` form when both
/// layers use the same dilation.
pub fn predicted_op_count(cfg: &ModelConfig) -> u64 {
    let (l, d, k, ell) = (cfg.l as u64, cfg.d as u64, cfg.k as u64, cfg.ell as u64);
    let c1 = cfg.c as u64 + 1;
    let n = cfg.n_patches() as u64;

    let nae = c1 * d * l + d;
    let decoder = 2 * d * d * l;
    let mut encoder = 0;
    for (j, &r) in cfg.r_per_layer.iter().enumerate() {
        let r = r as u64;
        let kappa = cfg.kappa(j) as u64;
        let v = n * ((k * k + 1) * ell * d + 3 * ell * d * d + 3 * ell * ell * d + n * ell * d * l);
        let t = r * ((k + 1) * kappa * d + 3 * kappa * d * d + 3 * kappa * kappa * d);
        encoder += v + t + 2 * d + 6 * d * d * l;
    }
    nae + decoder + encoder
}

/// Multiplies actually executed by one eval-mode forward pass.
pub fn measured_op_count(model: &DeformTime) -> Result<u64> {
    let cfg = &model.config;
    let window = Tensor::zeros(vec![cfg.l, cfg.c + 1]);
    let mut tape = Tape::new();
    model.forward(&mut tape, &window, &ForwardOptions::eval())?;
    Ok(tape.multiplies())
}
