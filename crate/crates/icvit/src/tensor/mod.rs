//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: shape plus a flat row-major buffer.
//! Gradient tracking lives entirely in [`Tape`], which is rebuilt for
//! every training step (define-by-run). All kernels are single-threaded
//! and accumulate in a fixed order, so gradients are bitwise reproducible.

mod adamw;
mod tape;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use tape::{finite_diff_rel_err, Gradients, Op, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional f32 array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Truncated normal init (±2σ resample), the usual transformer choice.
    pub fn trunc_normal(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            // Box-Muller; depends only on the rng stream, not the platform.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            for z in [r * theta.cos(), r * theta.sin()] {
                if z.abs() <= 2.0 && data.len() < numel {
                    data.push(z as f32 * std);
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (the "feature" axis for 2-D matrices).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite values in {context}")))
        }
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────
//
// Loop orders are chosen for sequential access on the accumulated row;
// the compiler vectorizes the inner axpy/dot loops.

/// c[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul_kernel(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_bt_kernel(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_at_kernel(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// In-place row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(data: &mut [f32], width: usize) {
    debug_assert!(width >= 1);
    for row in data.chunks_mut(width) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub(crate) const GELU_A: f32 = 0.797_884_56; // sqrt(2/pi)
pub(crate) const GELU_B: f32 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}
