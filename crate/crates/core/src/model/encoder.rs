//! One encoder layer: each attention branch sits inside two stochastic
//! residual steps (attention, then a layer-normed two-layer perceptron),
//! both adding the layer input back; when both branches run, their outputs
//! concatenate and a learned affine map merges them back to width `d`.

use super::{tdab::tdab, vdab::vdab, AblationVariant, Fwd};
use crate::error::Result;
use crate::numerics::TensorId;

enum Branch {
    Variable,
    Temporal,
}

fn residual_branch(fwd: &mut Fwd, layer: usize, z_in: TensorId, which: Branch) -> Result<TensorId> {
    // Both residual steps add the layer input, so a drop at the second
    // site collapses the whole branch to the identity; draw both
    // decisions up front to keep the stream aligned, then skip whatever
    // cannot reach the output.
    let drop_attn = fwd.take_drop();
    let drop_mlp = fwd.take_drop();
    if drop_mlp {
        return Ok(z_in);
    }
    let prefix = match which {
        Branch::Variable => format!("enc{}.v", layer),
        Branch::Temporal => format!("enc{}.t", layer),
    };
    let z_i = if drop_attn {
        z_in
    } else {
        let a = match which {
            Branch::Variable => vdab(fwd, layer, z_in)?,
            Branch::Temporal => tdab(fwd, layer, z_in)?,
        };
        fwd.tape.add(a, z_in)?
    };
    let gamma = fwd.p(&format!("{}.ln.gamma", prefix))?;
    let beta = fwd.p(&format!("{}.ln.beta", prefix))?;
    let w1 = fwd.p(&format!("{}.mlp.w1", prefix))?;
    let b1 = fwd.p(&format!("{}.mlp.b1", prefix))?;
    let w2 = fwd.p(&format!("{}.mlp.w2", prefix))?;
    let b2 = fwd.p(&format!("{}.mlp.b2", prefix))?;
    let normed = fwd.tape.layer_norm(z_i, gamma, beta, 1e-5)?;
    let h = fwd.tape.matmul(normed, w1)?;
    let h = fwd.tape.add_row(h, b1)?;
    let h = fwd.tape.relu(h)?;
    let h = fwd.tape.matmul(h, w2)?;
    let h = fwd.tape.add_row(h, b2)?;
    fwd.tape.add(h, z_in)
}

pub fn encoder_layer(fwd: &mut Fwd, layer: usize, z_in: TensorId) -> Result<TensorId> {
    let out = match fwd.variant {
        AblationVariant::NoVdab => residual_branch(fwd, layer, z_in, Branch::Temporal)?,
        AblationVariant::NoTdab => residual_branch(fwd, layer, z_in, Branch::Variable)?,
        _ => {
            let zv = residual_branch(fwd, layer, z_in, Branch::Variable)?;
            let zt = residual_branch(fwd, layer, z_in, Branch::Temporal)?;
            let cat = fwd.tape.concat_cols(vec![zv, zt])?;
            let w = fwd.p(&format!("enc{}.merge.w", layer))?;
            let b = fwd.p(&format!("enc{}.merge.b", layer))?;
            let merged = fwd.tape.matmul(cat, w)?;
            fwd.tape.add_row(merged, b)?
        }
    };
    if let Some(trace) = fwd.trace.as_mut() {
        while trace.layers.len() <= layer {
            trace.layers.push(Default::default());
        }
    }
    if fwd.trace.is_some() {
        let t = fwd.tape.value(out).clone();
        fwd.trace.as_mut().unwrap().layers[layer].output = Some(t);
    }
    Ok(out)
}
