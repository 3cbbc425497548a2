//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! All model arithmetic runs in `f64`. A [`Tape`] records every operation of
//! a forward pass; [`Tape::backward`] replays the record in reverse to
//! accumulate gradients into the leaf tensors. A tape is single-threaded;
//! independent tapes may live on different threads.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_coords};
pub use tape::{Op, Tape};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Dense row-major tensor of `f64` values.
///
/// Stored values are always finite; constructors and every tape kernel
/// reject NaN and infinity instead of letting them propagate silently.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor_new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, present on leaves after a backward pass.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn reset_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Forward multiply counter carried by a tape.
///
/// Every kernel adds the floating multiplies (and divides) it performs; a
/// `matmul` of `v x u` by `u x w` adds exactly `v*u*w`.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpCounter {
    multiplies: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        OpCounter { multiplies: 0 }
    }

    pub fn add(&mut self, n: u64) {
        self.multiplies += n;
    }

    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn reset(&mut self) {
        self.multiplies = 0;
    }
}

/// Interpolate a 2-d grid at fractional `(row, col)`; lattice corners outside
/// the grid contribute zero.
pub fn bilinear_at(grid: &Tensor, row: f64, col: f64) -> f64 {
    let (h, w) = (grid.rows() as isize, grid.cols() as isize);
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let corner = |r: isize, c: isize| -> f64 {
        if r < 0 || r >= h || c < 0 || c >= w {
            0.0
        } else {
            grid.data[(r as usize) * (w as usize) + c as usize]
        }
    };
    (1.0 - fr) * (1.0 - fc) * corner(r0, c0)
        + (1.0 - fr) * fc * corner(r0, c0 + 1)
        + fr * (1.0 - fc) * corner(r0 + 1, c0)
        + fr * fc * corner(r0 + 1, c0 + 1)
}

/// Interpolate a 1-d sequence at a fractional position; neighbours outside
/// the sequence contribute zero.
pub fn linear_at(z: &[f64], pos: f64) -> f64 {
    let n = z.len() as isize;
    let p0 = pos.floor();
    let f = pos - p0;
    let p0 = p0 as isize;
    let take = |p: isize| -> f64 {
        if p < 0 || p >= n {
            0.0
        } else {
            z[p as usize]
        }
    };
    (1.0 - f) * take(p0) + f * take(p0 + 1)
}
