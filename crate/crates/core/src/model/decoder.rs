//! Decoder: two stacked recurrent layers walk the encoded sequence while
//! keeping its `l x d` shape, then a two-layer perceptron squeezes the
//! temporal axis from `l` to `h` and a final affine map drops the channel
//! axis, leaving the `h`-step forecast.

use super::Fwd;
use crate::error::Result;
use crate::numerics::TensorId;

/// One gated recurrent layer over the rows of `input` (`l x d`), zero
/// initial state, returning the stacked hidden states.
fn gru_layer(fwd: &mut Fwd, layer: usize, input: TensorId) -> Result<TensorId> {
    let (l, d) = (fwd.cfg.l, fwd.cfg.d);
    let p = |s: &str| format!("dec.gru{}.{}", layer, s);
    let w_z = fwd.p(&p("w_z"))?;
    let u_z = fwd.p(&p("u_z"))?;
    let b_z = fwd.p(&p("b_z"))?;
    let w_r = fwd.p(&p("w_r"))?;
    let u_r = fwd.p(&p("u_r"))?;
    let b_r = fwd.p(&p("b_r"))?;
    let w_h = fwd.p(&p("w_h"))?;
    let u_h = fwd.p(&p("u_h"))?;
    let b_h = fwd.p(&p("b_h"))?;

    let mut h = fwd.tape.constant(crate::numerics::Tensor::zeros(vec![1, d]));
    let mut states = Vec::with_capacity(l);
    for t in 0..l {
        let index = (t * d..(t + 1) * d).map(Some).collect();
        let x_t = fwd.tape.gather(input, index, vec![1, d])?;

        let gate = |fwd: &mut Fwd, w, u, b, state| -> Result<TensorId> {
            let xw = fwd.tape.matmul(x_t, w)?;
            let hu = fwd.tape.matmul(state, u)?;
            let s = fwd.tape.add(xw, hu)?;
            fwd.tape.add_row(s, b)
        };
        let z_t = {
            let pre = gate(fwd, w_z, u_z, b_z, h)?;
            fwd.tape.sigmoid(pre)?
        };
        let r_t = {
            let pre = gate(fwd, w_r, u_r, b_r, h)?;
            fwd.tape.sigmoid(pre)?
        };
        let cand = {
            let gated = fwd.tape.mul(r_t, h)?;
            let pre = gate(fwd, w_h, u_h, b_h, gated)?;
            fwd.tape.tanh(pre)?
        };
        // h' = (1 - z) * h + z * cand
        let neg_z = fwd.tape.scalar_mul(z_t, -1.0)?;
        let one_minus_z = fwd.tape.add_const(neg_z, 1.0)?;
        let keep = fwd.tape.mul(one_minus_z, h)?;
        let write = fwd.tape.mul(z_t, cand)?;
        h = fwd.tape.add(keep, write)?;
        states.push(h);
    }
    fwd.tape.concat_rows(states)
}

pub fn decode(fwd: &mut Fwd, z: TensorId) -> Result<TensorId> {
    let h_len = fwd.cfg.h;
    let slope = fwd.cfg.leaky_slope;

    let s1 = gru_layer(fwd, 0, z)?;
    let s2 = gru_layer(fwd, 1, s1)?;

    // Project time: rows become channels, columns time steps.
    let zt = fwd.tape.transpose(s2)?; // d x l
    let w1 = fwd.p("head.w1")?;
    let b1 = fwd.p("head.b1")?;
    let w2 = fwd.p("head.w2")?;
    let b2 = fwd.p("head.b2")?;
    let t1 = fwd.tape.matmul(zt, w1)?;
    let t1 = fwd.tape.add_row(t1, b1)?;
    let t1 = fwd.tape.leaky_relu(t1, slope)?;
    let t2 = fwd.tape.matmul(t1, w2)?;
    let t2 = fwd.tape.add_row(t2, b2)?; // d x h

    let per_step = fwd.tape.transpose(t2)?; // h x d
    let w_out = fwd.p("head.out.w")?;
    let b_out = fwd.p("head.out.b")?;
    let y = fwd.tape.matmul(per_step, w_out)?;
    let y = fwd.tape.add_row(y, b_out)?;
    fwd.tape.reshape(y, vec![h_len])
}
