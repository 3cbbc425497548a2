//! Deformable attention across time. The sequence is thinned into `r`
//! interleaved patches (every r-th step), so each patch holds
//! `kappa = ceil(l/r)` rows; an offset head shared across groups and
//! patches bends a per-group temporal lattice, rows are re-read by linear
//! interpolation, and grouped multi-head attention mixes the result.

use super::Fwd;
use crate::error::Result;
use crate::numerics::{Tensor, TensorId};

fn col_block(rows: usize, cols: usize, start: usize, width: usize) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(rows * width);
    for row in 0..rows {
        for c in 0..width {
            index.push(Some(row * cols + start + c));
        }
    }
    index
}

pub fn tdab(fwd: &mut Fwd, layer: usize, z: TensorId) -> Result<TensorId> {
    let cfg = fwd.cfg;
    let (l, d, g) = (cfg.l, cfg.d, cfg.g);
    let r = cfg.r_per_layer[layer];
    let kappa = cfg.kappa(layer);
    let dg = d / g;
    let p = |name: &str| format!("enc{}.tdab.{}", layer, name);

    let u_q = fwd.p(&p("u_q"))?;
    let u_k = fwd.p(&p("u_k"))?;
    let u_v = fwd.p(&p("u_v"))?;
    let w_i = fwd.p(&p("w_i"))?;
    let kernel = fwd.p(&p("off.kernel"))?;
    let kbias = fwd.p(&p("off.bias"))?;
    let w1 = fwd.p(&p("off.w1"))?;
    let b1 = fwd.p(&p("off.b1"))?;
    let p_t = fwd.bound.get(&p("p_t")).copied();
    let alpha = fwd.alpha()?;

    let base_pos = {
        let data = (0..kappa).map(|i| i as f64).collect();
        fwd.tape.constant(Tensor::new(vec![kappa, 1], data)?)
    };

    if let Some(trace) = fwd.trace.as_mut() {
        while trace.layers.len() <= layer {
            trace.layers.push(Default::default());
        }
    }

    let scale = 1.0 / (dg as f64).sqrt();
    let mut patch_outputs = Vec::with_capacity(r);
    for j in 0..r {
        // Rows j, j+r, j+2r, ...; past the end the last row repeats.
        let i_max = (l - 1 - j) / r;
        let index: Vec<Option<usize>> = (0..kappa * d)
            .map(|e| {
                let i = (e / d).min(i_max);
                Some((j + i * r) * d + e % d)
            })
            .collect();
        let z_r = fwd.tape.gather(z, index, vec![kappa, d])?;
        let q_r = fwd.tape.matmul(z_r, u_q)?;

        let q_groups: Vec<TensorId> = (0..g)
            .map(|gi| {
                fwd.tape
                    .gather(q_r, col_block(kappa, d, gi * dg, dg), vec![kappa, dg])
            })
            .collect::<Result<_>>()?;

        let mut sampled = Vec::with_capacity(g);
        let mut patch_trace = Vec::with_capacity(g);
        for (gi, &q_g) in q_groups.iter().enumerate() {
            let hidden = fwd.tape.conv1d_same(q_g, kernel, kbias)?;
            let pooled = fwd.tape.matmul(hidden, w1)?;
            let raw = fwd.tape.add_row(pooled, b1)?;
            let squashed = fwd.tape.tanh(raw)?;
            let dp = alpha.scale(fwd.tape, squashed)?;
            if fwd.trace.is_some() {
                patch_trace.push(fwd.tape.value(dp).clone());
            }
            let pos = fwd.tape.add(base_pos, dp)?;
            let z_g = fwd
                .tape
                .gather(z_r, col_block(kappa, d, gi * dg, dg), vec![kappa, dg])?;
            sampled.push(fwd.tape.linear_sample_cols(z_g, pos)?);
        }
        if let Some(trace) = fwd.trace.as_mut() {
            trace.layers[layer].tdab_offsets.push(patch_trace);
        }

        let z_s = fwd.tape.concat_cols(sampled)?;
        let k_s = fwd.tape.matmul(z_s, u_k)?;
        let mut v_s = fwd.tape.matmul(z_s, u_v)?;
        if let Some(pt) = p_t {
            v_s = fwd.tape.add(v_s, pt)?;
        }

        let mut heads = Vec::with_capacity(g);
        for (gi, &q_g) in q_groups.iter().enumerate() {
            let block = col_block(kappa, d, gi * dg, dg);
            let k_g = fwd.tape.gather(k_s, block.clone(), vec![kappa, dg])?;
            let v_g = fwd.tape.gather(v_s, block, vec![kappa, dg])?;
            let kt = fwd.tape.transpose(k_g)?;
            let logits = fwd.tape.matmul(q_g, kt)?;
            let scaled = fwd.tape.scalar_mul(logits, scale)?;
            let att = fwd.tape.softmax_rows(scaled)?;
            heads.push(fwd.tape.matmul(att, v_g)?);
        }
        let mixed = fwd.tape.concat_cols(heads)?;
        patch_outputs.push(fwd.tape.matmul(mixed, w_i)?);
    }

    // Stack patches then interleave back to time order: output row t came
    // from patch t % r, row t / r.
    let stacked = fwd.tape.concat_rows(patch_outputs)?;
    let index: Vec<Option<usize>> = (0..l * d)
        .map(|e| {
            let (t, col) = (e / d, e % d);
            Some(((t % r) * kappa + t / r) * d + col)
        })
        .collect();
    fwd.tape.gather(stacked, index, vec![l, d])
}
