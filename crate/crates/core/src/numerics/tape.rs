//! Operation recording and reverse-mode differentiation.

use super::{OpCounter, Tensor, TensorId};
use crate::error::{Error, Result};

/// A recorded operation. Inputs are tape node ids; auxiliary values needed by
/// the backward rule are stored inline.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddRow { a: TensorId, bias: TensorId },
    AddConst { a: TensorId },
    ScalarMul { a: TensorId, c: f64 },
    MulScalarT { a: TensorId, s: TensorId },
    AddScalarT { a: TensorId, s: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    LeakyRelu { a: TensorId, slope: f64 },
    Abs { a: TensorId },
    SoftmaxRows { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Concat { parts: Vec<TensorId>, axis: usize },
    Reshape { a: TensorId },
    Transpose { a: TensorId },
    Gather { a: TensorId, index: Vec<Option<usize>> },
    Conv2dSame { x: TensorId, kernel: TensorId, bias: TensorId },
    Conv1dSame { x: TensorId, kernel: TensorId, bias: TensorId },
    BilinearSample { grid: TensorId, rows: TensorId, cols: TensorId },
    LinearSampleCols { a: TensorId, pos: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list: nodes in execution order, each holding its value, the
/// operation that produced it and a flag marking whether any differentiable
/// leaf feeds it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: OpCounter,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward multiplies recorded so far.
    pub fn multiplies(&self) -> u64 {
        self.counter.multiplies()
    }

    pub fn reset_multiplies(&mut self) {
        self.counter.reset();
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Record a leaf. Its `requires_grad` flag decides whether gradients are
    /// tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn want_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let t = self.value(id);
        if !t.is_matrix() {
            return Err(Error::shape(op, format!("expected 2-d tensor, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    // ── elementwise and linear algebra ──────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (v, u) = self.want_matrix("matmul", a)?;
        let (u2, w) = self.want_matrix("matmul", b)?;
        if u != u2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {}x{} vs {}x{}", v, u, u2, w),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), v, u, w);
        self.counter.add((v * u * w) as u64);
        let needs = self.needs(&[a, b]);
        self.push("matmul", vec![v, w], out, Op::Matmul { a, b }, needs)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        mul_cost: bool,
    ) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!(
                    "operands differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        if mul_cost {
            self.counter.add(data.len() as u64);
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        self.push(name, shape, data, op, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b }, false)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b }, false)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b }, true)
    }

    /// Broadcast a length-`w` bias over every row of a `v x w` matrix.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (v, w) = self.want_matrix("add_row", a)?;
        let bt = self.value(bias);
        if bt.shape().len() != 1 || bt.numel() != w {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not match {} columns", bt.shape(), w),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        let bias_data = self.value(bias).data();
        for i in 0..v {
            for j in 0..w {
                data[i * w + j] += bias_data[j];
            }
        }
        let needs = self.needs(&[a, bias]);
        self.push("add_row", vec![v, w], data, Op::AddRow { a, bias }, needs)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        self.push("add_const", shape, data, Op::AddConst { a }, needs)
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| c * x).collect();
        self.counter.add(data.len() as u64);
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        self.push("scalar_mul", shape, data, Op::ScalarMul { a, c }, needs)
    }

    /// Multiply by a learnable one-element tensor.
    pub fn mul_scalar_t(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar_t", "scale must hold one element"));
        }
        let c = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| c * x).collect();
        self.counter.add(data.len() as u64);
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, s]);
        self.push("mul_scalar_t", shape, data, Op::MulScalarT { a, s }, needs)
    }

    /// Add a learnable one-element tensor to every element.
    pub fn add_scalar_t(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("add_scalar_t", "shift must hold one element"));
        }
        let c = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, s]);
        self.push("add_scalar_t", shape, data, Op::AddScalarT { a, s }, needs)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
        cost_per_elem: u64,
    ) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.counter.add(cost_per_elem * data.len() as u64);
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(name, shape, data, op, needs)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a }, 0)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a }, 1)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu { a }, 0)
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId> {
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu { a, slope },
            1,
        )
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("abs", a, f64::abs, Op::Abs { a }, 0)
    }

    /// Row-wise softmax with max-shift stabilisation.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (v, w) = self.want_matrix("softmax_rows", a)?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..v {
            let row = &mut data[i * w..(i + 1) * w];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.counter.add((v * w) as u64);
        let needs = self.needs(&[a]);
        self.push("softmax_rows", vec![v, w], data, Op::SoftmaxRows { a }, needs)
    }

    /// Row-wise layer normalisation with learnable gain and shift.
    /// Variance uses the population convention.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (v, w) = self.want_matrix("layer_norm", x)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(id);
            if t.shape().len() != 1 || t.numel() != w {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{} {:?} does not match {} columns", name, t.shape(), w),
                ));
            }
        }
        let mut data = self.value(x).data().to_vec();
        let gamma_data = self.value(gamma).data().to_vec();
        let beta_data = self.value(beta).data().to_vec();
        for i in 0..v {
            let row = &mut data[i * w..(i + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv * gamma_data[j] + beta_data[j];
            }
        }
        self.counter.add(3 * (v * w) as u64);
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            vec![v, w],
            data,
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
        )
    }

    // ── structure ───────────────────────────────────────────────────────

    fn concat(&mut self, parts: Vec<TensorId>, axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no parts"));
        }
        let (r0, c0) = self.want_matrix("concat", parts[0])?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.want_matrix("concat", p)?;
            match axis {
                0 if c == c0 => rows += r,
                1 if r == r0 => cols += c,
                _ => {
                    return Err(Error::shape(
                        "concat",
                        format!("part {:?} incompatible on axis {}", self.value(p).shape(), axis),
                    ))
                }
            }
        }
        let data = match axis {
            0 => {
                let mut data = Vec::with_capacity(rows * cols);
                for &p in &parts {
                    data.extend_from_slice(self.value(p).data());
                }
                data
            }
            1 => {
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for &p in &parts {
                        let w = self.value(p).cols();
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                data
            }
            _ => return Err(Error::invalid("concat", "axis must be 0 or 1")),
        };
        let needs = self.needs(&parts);
        self.push("concat", vec![rows, cols], data, Op::Concat { parts, axis }, needs)
    }

    pub fn concat_rows(&mut self, parts: Vec<TensorId>) -> Result<TensorId> {
        self.concat(parts, 0)
    }

    pub fn concat_cols(&mut self, parts: Vec<TensorId>) -> Result<TensorId> {
        self.concat(parts, 1)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.value(a).shape(), shape),
            ));
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(&[a]);
        self.push("reshape", shape, data, Op::Reshape { a }, needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (v, w) = self.want_matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; v * w];
        for i in 0..v {
            for j in 0..w {
                data[j * v + i] = src[i * w + j];
            }
        }
        let needs = self.needs(&[a]);
        self.push("transpose", vec![w, v], data, Op::Transpose { a }, needs)
    }

    /// Rearrange elements by a flat index map; `None` entries read as zero.
    /// Duplicate sources are allowed, and backward scatter-adds.
    pub fn gather(
        &mut self,
        a: TensorId,
        index: Vec<Option<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(
                "gather",
                format!("index len {} vs output shape {:?}", index.len(), out_shape),
            ));
        }
        let src = self.value(a);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.numel()) {
            return Err(Error::invalid(
                "gather",
                format!("index {} out of range for {} elements", bad, src.numel()),
            ));
        }
        let data: Vec<f64> = index
            .iter()
            .map(|ix| ix.map(|i| src.data()[i]).unwrap_or(0.0))
            .collect();
        let needs = self.needs(&[a]);
        self.push("gather", out_shape, data, Op::Gather { a, index }, needs)
    }

    // ── convolutions for the offset heads ───────────────────────────────

    /// Same-padded single-channel 2-d convolution with a scalar bias.
    pub fn conv2d_same(&mut self, x: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let (h, w) = self.want_matrix("conv2d_same", x)?;
        let (kh, kw) = self.want_matrix("conv2d_same", kernel)?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d_same",
                format!("kernel must be square with odd side, got {}x{}", kh, kw),
            ));
        }
        if self.value(bias).numel() != 1 {
            return Err(Error::shape("conv2d_same", "bias must hold one element"));
        }
        let pad = (kh / 2) as isize;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let b = self.value(bias).data()[0];
        let mut data = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = b;
                for u in 0..kh as isize {
                    for v in 0..kh as isize {
                        let xi = i + u - pad;
                        let xj = j + v - pad;
                        if xi >= 0 && xi < h as isize && xj >= 0 && xj < w as isize {
                            acc += ks[(u * kh as isize + v) as usize]
                                * xs[(xi * w as isize + xj) as usize];
                        }
                    }
                }
                data[(i * w as isize + j) as usize] = acc;
            }
        }
        self.counter.add((h * w * kh * kh) as u64);
        let needs = self.needs(&[x, kernel, bias]);
        self.push(
            "conv2d_same",
            vec![h, w],
            data,
            Op::Conv2dSame { x, kernel, bias },
            needs,
        )
    }

    /// Same-padded 1-d convolution over `len x c_in`, kernel `[c_out, c_in, k]`.
    pub fn conv1d_same(&mut self, x: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let (len, cin) = self.want_matrix("conv1d_same", x)?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 3 || kshape[1] != cin || kshape[2] % 2 == 0 {
            return Err(Error::shape(
                "conv1d_same",
                format!("kernel {:?} must be [c_out, {}, odd k]", kshape, cin),
            ));
        }
        let (cout, k) = (kshape[0], kshape[2]);
        let bt = self.value(bias);
        if bt.shape().len() != 1 || bt.numel() != cout {
            return Err(Error::shape(
                "conv1d_same",
                format!("bias {:?} does not match {} output channels", bt.shape(), cout),
            ));
        }
        let pad = (k / 2) as isize;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let bs = self.value(bias).data();
        let mut data = vec![0.0; len * cout];
        for i in 0..len as isize {
            for o in 0..cout {
                let mut acc = bs[o];
                for c in 0..cin {
                    for t in 0..k as isize {
                        let xi = i + t - pad;
                        if xi >= 0 && xi < len as isize {
                            acc += ks[(o * cin + c) * k + t as usize]
                                * xs[xi as usize * cin + c];
                        }
                    }
                }
                data[i as usize * cout + o] = acc;
            }
        }
        self.counter.add((len * cout * cin * k) as u64);
        let needs = self.needs(&[x, kernel, bias]);
        self.push(
            "conv1d_same",
            vec![len, cout],
            data,
            Op::Conv1dSame { x, kernel, bias },
            needs,
        )
    }

    // ── interpolating samplers ──────────────────────────────────────────

    /// Sample `grid` at fractional positions `(rows[e], cols[e])` per element.
    /// Lattice corners outside the grid contribute zero; at integer
    /// positions the derivative is taken from the cell on the increasing
    /// side.
    pub fn bilinear_sample(
        &mut self,
        grid: TensorId,
        rows: TensorId,
        cols: TensorId,
    ) -> Result<TensorId> {
        let (h, w) = self.want_matrix("bilinear_sample", grid)?;
        if self.value(rows).shape() != self.value(cols).shape() {
            return Err(Error::shape(
                "bilinear_sample",
                format!(
                    "row and column position shapes differ: {:?} vs {:?}",
                    self.value(rows).shape(),
                    self.value(cols).shape()
                ),
            ));
        }
        let g = self.value(grid).data();
        let rs = self.value(rows).data();
        let cs = self.value(cols).data();
        let mut data = vec![0.0; rs.len()];
        for e in 0..rs.len() {
            data[e] = bilinear_raw(g, h, w, rs[e], cs[e]).0;
        }
        self.counter.add(8 * data.len() as u64);
        let shape = self.value(rows).shape().to_vec();
        let needs = self.needs(&[grid, rows, cols]);
        self.push(
            "bilinear_sample",
            shape,
            data,
            Op::BilinearSample { grid, rows, cols },
            needs,
        )
    }

    /// Sample every column of `a` at per-row fractional positions `pos`,
    /// producing `pos.numel() x cols` output. Neighbours outside the column
    /// contribute zero.
    pub fn linear_sample_cols(&mut self, a: TensorId, pos: TensorId) -> Result<TensorId> {
        let (len, w) = self.want_matrix("linear_sample_cols", a)?;
        let n = self.value(pos).numel();
        let src = self.value(a).data();
        let ps = self.value(pos).data();
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            let p = ps[i];
            let p0 = p.floor();
            let f = p - p0;
            let p0 = p0 as isize;
            for j in 0..w {
                let lo = fetch(src, len, w, p0, j);
                let hi = fetch(src, len, w, p0 + 1, j);
                data[i * w + j] = (1.0 - f) * lo + f * hi;
            }
        }
        self.counter.add(2 * (n * w) as u64);
        let needs = self.needs(&[a, pos]);
        self.push(
            "linear_sample_cols",
            vec![n, w],
            data,
            Op::LinearSampleCols { a, pos },
            needs,
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.counter.add(1);
        let needs = self.needs(&[a]);
        self.push("mean", vec![1], vec![s], Op::Mean { a }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Gradients accumulate into the
    /// `grad` buffers of differentiable leaves; repeated calls keep
    /// accumulating until [`Tape::reset_grads`].
    pub fn backward(&mut self, out: TensorId) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "output id not on this tape"));
        }
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: self.nodes[out.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[out.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&self.nodes, id, &g, &mut grads);
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Clear accumulated leaf gradients.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.reset_grad();
        }
    }
}

fn fetch(data: &[f64], len: usize, w: usize, i: isize, j: usize) -> f64 {
    if i < 0 || i >= len as isize {
        0.0
    } else {
        data[i as usize * w + j]
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], v: usize, u: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; v * w];
    for i in 0..v {
        for p in 0..u {
            let aip = a[i * u + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * w..(p + 1) * w];
            let orow = &mut out[i * w..(i + 1) * w];
            for j in 0..w {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Value and the four corner weights used at `(row, col)`.
fn bilinear_raw(g: &[f64], h: usize, w: usize, row: f64, col: f64) -> (f64, [(isize, isize, f64); 4]) {
    let r0f = row.floor();
    let c0f = col.floor();
    let fr = row - r0f;
    let fc = col - c0f;
    let (r0, c0) = (r0f as isize, c0f as isize);
    let corners = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ];
    let mut val = 0.0;
    for &(r, c, wt) in &corners {
        if r >= 0 && r < h as isize && c >= 0 && c < w as isize {
            val += wt * g[r as usize * w + c as usize];
        }
    }
    (val, corners)
}

fn grid_at(g: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r < 0 || r >= h as isize || c < 0 || c >= w as isize {
        0.0
    } else {
        g[r as usize * w + c as usize]
    }
}

/// Add `delta` into the gradient buffer of `id` if that node tracks grads.
fn acc(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: TensorId,
    write: impl FnOnce(&mut [f64]),
) {
    if !nodes[id.0].needs_grad {
        return;
    }
    let numel = nodes[id.0].value.numel();
    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
    write(buf);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out_val = &nodes[id].value;
    match nodes[id].op.clone() {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (v, u) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let w = nodes[b.0].value.cols();
            let a_data = nodes[a.0].value.data();
            let b_data = nodes[b.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..v {
                    for j in 0..w {
                        let gij = g[i * w + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..u {
                            ga[i * u + p] += gij * b_data[p * w + j];
                        }
                    }
                }
            });
            acc(nodes, grads, b, |gb| {
                for i in 0..v {
                    for p in 0..u {
                        let aip = a_data[i * u + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..w {
                            gb[p * w + j] += aip * g[i * w + j];
                        }
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, b, |gb| add_into(gb, g));
        }
        Op::Sub { a, b } => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, b, |gb| {
                for (x, &d) in gb.iter_mut().zip(g) {
                    *x -= d;
                }
            });
        }
        Op::Mul { a, b } => {
            let a_data = nodes[a.0].value.data();
            let b_data = nodes[b.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * b_data[i];
                }
            });
            acc(nodes, grads, b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * a_data[i];
                }
            });
        }
        Op::AddRow { a, bias } => {
            let w = nodes[a.0].value.cols();
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, bias, |gb| {
                for (i, &d) in g.iter().enumerate() {
                    gb[i % w] += d;
                }
            });
        }
        Op::AddConst { a } => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
        }
        Op::ScalarMul { a, c } => {
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += c * g[i];
                }
            });
        }
        Op::MulScalarT { a, s } => {
            let c = nodes[s.0].value.data()[0];
            let a_data = nodes[a.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += c * g[i];
                }
            });
            acc(nodes, grads, s, |gs| {
                gs[0] += g.iter().zip(a_data).map(|(&d, &x)| d * x).sum::<f64>();
            });
        }
        Op::AddScalarT { a, s } => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, s, |gs| {
                gs[0] += g.iter().sum::<f64>();
            });
        }
        Op::Tanh { a } => {
            let y = out_val.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = out_val.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Relu { a } => {
            let x = nodes[a.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::LeakyRelu { a, slope } => {
            let x = nodes[a.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * if x[i] > 0.0 { 1.0 } else { slope };
                }
            });
        }
        Op::Abs { a } => {
            let x = nodes[a.0].value.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * x[i].signum() * if x[i] == 0.0 { 0.0 } else { 1.0 };
                }
            });
        }
        Op::SoftmaxRows { a } => {
            let (v, w) = (out_val.rows(), out_val.cols());
            let y = out_val.data();
            acc(nodes, grads, a, |ga| {
                for i in 0..v {
                    let yr = &y[i * w..(i + 1) * w];
                    let gr = &g[i * w..(i + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(&s, &d)| s * d).sum();
                    for j in 0..w {
                        ga[i * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (v, w) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
            let xs = nodes[x.0].value.data();
            let gs = nodes[gamma.0].value.data();
            for i in 0..v {
                let row = &xs[i * w..(i + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv).collect();
                let gr = &g[i * w..(i + 1) * w];
                let dxhat: Vec<f64> = gr.iter().zip(gs).map(|(&d, &gm)| d * gm).collect();
                let m1 = dxhat.iter().sum::<f64>() / w as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(&d, &xh)| d * xh).sum::<f64>() / w as f64;
                acc(nodes, grads, x, |gx| {
                    for j in 0..w {
                        gx[i * w + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                });
                acc(nodes, grads, gamma, |gg| {
                    for j in 0..w {
                        gg[j] += gr[j] * xhat[j];
                    }
                });
                acc(nodes, grads, beta, |gb| {
                    for j in 0..w {
                        gb[j] += gr[j];
                    }
                });
            }
        }
        Op::Concat { parts, axis } => match axis {
            0 => {
                let mut offset = 0;
                for &p in &parts {
                    let numel = nodes[p.0].value.numel();
                    acc(nodes, grads, p, |gp| {
                        add_into(gp, &g[offset..offset + numel]);
                    });
                    offset += numel;
                }
            }
            _ => {
                let rows = out_val.rows();
                let total = out_val.cols();
                let mut col0 = 0;
                for &p in &parts {
                    let w = nodes[p.0].value.cols();
                    acc(nodes, grads, p, |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + col0 + j];
                            }
                        }
                    });
                    col0 += w;
                }
            }
        },
        Op::Reshape { a } => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
        }
        Op::Transpose { a } => {
            let (v, w) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            acc(nodes, grads, a, |ga| {
                for i in 0..v {
                    for j in 0..w {
                        ga[i * w + j] += g[j * v + i];
                    }
                }
            });
        }
        Op::Gather { a, index } => {
            acc(nodes, grads, a, |ga| {
                for (k, ix) in index.iter().enumerate() {
                    if let Some(src) = ix {
                        ga[*src] += g[k];
                    }
                }
            });
        }
        Op::Conv2dSame { x, kernel, bias } => {
            let (h, w) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
            let k = nodes[kernel.0].value.rows();
            let pad = (k / 2) as isize;
            let xs = nodes[x.0].value.data();
            let ks = nodes[kernel.0].value.data();
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let gij = g[(i * w as isize + j) as usize];
                    if gij == 0.0 {
                        continue;
                    }
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let xi = i + u - pad;
                            let xj = j + v - pad;
                            if xi >= 0 && xi < h as isize && xj >= 0 && xj < w as isize {
                                let xidx = (xi * w as isize + xj) as usize;
                                let kidx = (u * k as isize + v) as usize;
                                acc(nodes, grads, x, |gx| gx[xidx] += gij * ks[kidx]);
                                acc(nodes, grads, kernel, |gk| gk[kidx] += gij * xs[xidx]);
                            }
                        }
                    }
                }
            }
            acc(nodes, grads, bias, |gb| gb[0] += g.iter().sum::<f64>());
        }
        Op::Conv1dSame { x, kernel, bias } => {
            let (len, cin) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
            let kshape = nodes[kernel.0].value.shape().to_vec();
            let (cout, k) = (kshape[0], kshape[2]);
            let pad = (k / 2) as isize;
            let xs = nodes[x.0].value.data();
            let ks = nodes[kernel.0].value.data();
            for i in 0..len as isize {
                for o in 0..cout {
                    let gio = g[i as usize * cout + o];
                    if gio == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        for t in 0..k as isize {
                            let xi = i + t - pad;
                            if xi >= 0 && xi < len as isize {
                                let xidx = xi as usize * cin + c;
                                let kidx = (o * cin + c) * k + t as usize;
                                acc(nodes, grads, x, |gx| gx[xidx] += gio * ks[kidx]);
                                acc(nodes, grads, kernel, |gk| gk[kidx] += gio * xs[xidx]);
                            }
                        }
                    }
                    acc(nodes, grads, bias, |gb| gb[o] += gio);
                }
            }
        }
        Op::BilinearSample { grid, rows, cols } => {
            let (h, w) = (nodes[grid.0].value.rows(), nodes[grid.0].value.cols());
            let gdata = nodes[grid.0].value.data();
            let rdata = nodes[rows.0].value.data();
            let cdata = nodes[cols.0].value.data();
            for e in 0..g.len() {
                let ge = g[e];
                if ge == 0.0 {
                    continue;
                }
                let (_, corners) = bilinear_raw(gdata, h, w, rdata[e], cdata[e]);
                acc(nodes, grads, grid, |gg| {
                    for &(r, c, wt) in &corners {
                        if r >= 0 && r < h as isize && c >= 0 && c < w as isize {
                            gg[r as usize * w + c as usize] += ge * wt;
                        }
                    }
                });
                let r0 = rdata[e].floor() as isize;
                let c0 = cdata[e].floor() as isize;
                let fr = rdata[e] - rdata[e].floor();
                let fc = cdata[e] - cdata[e].floor();
                let g00 = grid_at(gdata, h, w, r0, c0);
                let g01 = grid_at(gdata, h, w, r0, c0 + 1);
                let g10 = grid_at(gdata, h, w, r0 + 1, c0);
                let g11 = grid_at(gdata, h, w, r0 + 1, c0 + 1);
                acc(nodes, grads, rows, |gr| {
                    let top = (1.0 - fc) * g00 + fc * g01;
                    let bottom = (1.0 - fc) * g10 + fc * g11;
                    gr[e] += ge * (bottom - top);
                });
                acc(nodes, grads, cols, |gc| {
                    let left = (1.0 - fr) * g00 + fr * g10;
                    let right = (1.0 - fr) * g01 + fr * g11;
                    gc[e] += ge * (right - left);
                });
            }
        }
        Op::LinearSampleCols { a, pos } => {
            let (len, w) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let src = nodes[a.0].value.data();
            let ps = nodes[pos.0].value.data();
            let n = ps.len();
            for i in 0..n {
                let p = ps[i];
                let p0f = p.floor();
                let f = p - p0f;
                let p0 = p0f as isize;
                let p1 = p0 + 1;
                for j in 0..w {
                    let ge = g[i * w + j];
                    if ge == 0.0 {
                        continue;
                    }
                    acc(nodes, grads, a, |ga| {
                        if p0 >= 0 && p0 < len as isize {
                            ga[p0 as usize * w + j] += ge * (1.0 - f);
                        }
                        if p1 >= 0 && p1 < len as isize {
                            ga[p1 as usize * w + j] += ge * f;
                        }
                    });
                    acc(nodes, grads, pos, |gp| {
                        let lo = fetch(src, len, w, p0, j);
                        let hi = fetch(src, len, w, p1, j);
                        gp[i] += ge * (hi - lo);
                    });
                }
            }
        }
        Op::Sum { a } => {
            acc(nodes, grads, a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            });
        }
        Op::Mean { a } => {
            let n = nodes[a.0].value.numel() as f64;
            acc(nodes, grads, a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0] / n;
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
