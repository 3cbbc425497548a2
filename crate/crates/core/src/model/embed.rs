//! Neighbourhood-aware embedding: variables are split into contiguous
//! groups, each group projected to `d/g` channels, and the concatenated
//! result is layer-normed after adding a sinusoidal positional term.

use super::{AblationVariant, Fwd};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, TensorId};

/// Fixed sine/cosine position table, `len x d`. Width must be even so the
/// sine/cosine pairs line up.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::invalid(
            "sinusoidal_pe",
            format!("width {} must be even", d),
        ));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Embed the raw window `l x (c+1)` into `l x d`.
pub fn nae(fwd: &mut Fwd, input: TensorId) -> Result<TensorId> {
    let cfg = fwd.cfg;
    let (l, width, d, g) = (cfg.l, cfg.c + 1, cfg.d, cfg.g);

    let projected = if fwd.variant == AblationVariant::NoNae {
        let w = fwd.p("nae.w")?;
        let b = fwd.p("nae.b")?;
        let xw = fwd.tape.matmul(input, w)?;
        fwd.tape.add_row(xw, b)?
    } else {
        // Zero-pad the variable axis so the groups divide evenly.
        let padded = g * width.div_ceil(g);
        let per_group = padded / g;
        let mut parts = Vec::with_capacity(g);
        for gi in 0..g {
            let mut index = Vec::with_capacity(l * per_group);
            for row in 0..l {
                for col in 0..per_group {
                    let src_col = gi * per_group + col;
                    index.push((src_col < width).then(|| row * width + src_col));
                }
            }
            let slice = fwd.tape.gather(input, index, vec![l, per_group])?;
            let w = fwd.p(&format!("nae.g{}.w", gi))?;
            let b = fwd.p(&format!("nae.g{}.b", gi))?;
            let xw = fwd.tape.matmul(slice, w)?;
            parts.push(fwd.tape.add_row(xw, b)?);
        }
        fwd.tape.concat_cols(parts)?
    };

    let with_pos = if fwd.variant == AblationVariant::NoPn {
        projected
    } else {
        let table = fwd.tape.constant(sinusoidal_pe(l, d)?);
        fwd.tape.add(projected, table)?
    };

    let gamma = fwd.p("nae.ln.gamma")?;
    let beta = fwd.p("nae.ln.beta")?;
    fwd.tape.layer_norm(with_pos, gamma, beta, 1e-5)
}
