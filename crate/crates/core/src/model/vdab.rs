//! Deformable attention across variables. The embedded window is cut into
//! overlapping `ell x d` patches along time; inside each patch an offset
//! head bends a regular sampling lattice in both axes, keys and values are
//! read off the bent lattice bilinearly, and standard scaled dot-product
//! attention runs per patch before a fully connected map restores the
//! `l x d` layout.

use super::Fwd;
use crate::error::Result;
use crate::numerics::{Tensor, TensorId};

pub fn vdab(fwd: &mut Fwd, layer: usize, z: TensorId) -> Result<TensorId> {
    let cfg = fwd.cfg;
    let (l, d, ell, s) = (cfg.l, cfg.d, cfg.ell, cfg.s);
    let n = cfg.n_patches();
    let p = |name: &str| format!("enc{}.vdab.{}", layer, name);

    let w_q = fwd.p(&p("w_q"))?;
    let w_k = fwd.p(&p("w_k"))?;
    let w_val = fwd.p(&p("w_val"))?;
    let w_i = fwd.p(&p("w_i"))?;
    let w_out = fwd.p(&p("w_out"))?;
    let kernel = fwd.p(&p("off.kernel"))?;
    let kbias = fwd.p(&p("off.bias"))?;
    let w_row = fwd.p(&p("off.w_row"))?;
    let b_row = fwd.p(&p("off.b_row"))?;
    let w_col = fwd.p(&p("off.w_col"))?;
    let b_col = fwd.p(&p("off.b_col"))?;
    let p_v = fwd.bound.get(&p("p_v")).copied();
    let alpha = fwd.alpha()?;

    // Reference lattice shared by every patch: position (i, j) sits at
    // row i, column j of its patch.
    let base_rows = {
        let mut data = vec![0.0; ell * d];
        for (e, v) in data.iter_mut().enumerate() {
            *v = (e / d) as f64;
        }
        fwd.tape.constant(Tensor::new(vec![ell, d], data)?)
    };
    let base_cols = {
        let mut data = vec![0.0; ell * d];
        for (e, v) in data.iter_mut().enumerate() {
            *v = (e % d) as f64;
        }
        fwd.tape.constant(Tensor::new(vec![ell, d], data)?)
    };

    let scale = 1.0 / (d as f64).sqrt();
    let mut patch_outputs = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * s;
        let index: Vec<Option<usize>> = (0..ell * d)
            .map(|e| {
                let row = start + e / d;
                (row < l).then(|| row * d + e % d)
            })
            .collect();
        let patch = fwd.tape.gather(z, index, vec![ell, d])?;
        let q = fwd.tape.matmul(patch, w_q)?;

        let hidden = fwd.tape.conv2d_same(q, kernel, kbias)?;
        let offset_axis = |fwd: &mut Fwd, w: TensorId, b: TensorId| -> Result<TensorId> {
            let scaled = fwd.tape.mul_scalar_t(hidden, w)?;
            let shifted = fwd.tape.add_scalar_t(scaled, b)?;
            let squashed = fwd.tape.tanh(shifted)?;
            alpha.scale(fwd.tape, squashed)
        };
        let d_row = offset_axis(fwd, w_row, b_row)?;
        let d_col = offset_axis(fwd, w_col, b_col)?;
        if let Some(trace) = fwd.trace.as_mut() {
            let layers = &mut trace.layers;
            while layers.len() <= layer {
                layers.push(Default::default());
            }
        }
        if fwd.trace.is_some() {
            let row_t = fwd.tape.value(d_row).clone();
            let col_t = fwd.tape.value(d_col).clone();
            let trace = fwd.trace.as_mut().unwrap();
            trace.layers[layer].vdab_row_offsets.push(row_t);
            trace.layers[layer].vdab_col_offsets.push(col_t);
        }

        let rows = fwd.tape.add(base_rows, d_row)?;
        let cols = fwd.tape.add(base_cols, d_col)?;
        let z_d = fwd.tape.bilinear_sample(patch, rows, cols)?;

        let k_d = fwd.tape.matmul(z_d, w_k)?;
        let mut v_d = fwd.tape.matmul(z_d, w_val)?;
        if let Some(pv) = p_v {
            v_d = fwd.tape.add(v_d, pv)?;
        }
        let kt = fwd.tape.transpose(k_d)?;
        let logits = fwd.tape.matmul(q, kt)?;
        let scaled = fwd.tape.scalar_mul(logits, scale)?;
        let att = fwd.tape.softmax_rows(scaled)?;
        let mixed = fwd.tape.matmul(att, v_d)?;
        patch_outputs.push(fwd.tape.matmul(mixed, w_i)?);
    }

    let stacked = fwd.tape.concat_rows(patch_outputs)?;
    let w_out_t = fwd.tape.transpose(w_out)?;
    fwd.tape.matmul(w_out_t, stacked)
}
