//! Dense building blocks: a row-major matrix, trainable parameters, the
//! handful of kernels the backbone needs, and an AdamW optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stack `parts` vertically. All parts must share the column count.
    pub fn vstack(cols: usize, parts: &[&Matrix<T>]) -> Self {
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Self { rows, cols, data }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }
}

/// A trainable tensor together with its gradient buffer and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(rows: usize, cols: usize, value: Vec<T>) -> Self {
        assert_eq!(value.len(), rows * cols);
        let n = value.len();
        Self {
            rows,
            cols,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, x: T) -> Self {
        Self::new(rows, cols, vec![x; rows * cols])
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let value = (0..rows * cols)
            .map(|_| T::of((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Self::new(rows, cols, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn grad_is_zero(&self) -> bool {
        self.grad.iter().all(|g| *g == T::zero())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    /// Fail if any gradient entry is NaN or infinite.
    pub fn check_finite<T: Scalar>(name: &str, p: &Param<T>) -> Result<()> {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}[{i}]"),
            });
        }
        Ok(())
    }

    /// One decoupled-weight-decay Adam step; clears the gradient afterwards.
    /// A parameter whose gradient is exactly zero was not used in this step
    /// and is skipped entirely (no moment decay, no weight decay), so prompts
    /// that were not routed to keep their values.
    pub fn step<T: Scalar>(&self, p: &mut Param<T>) {
        if p.grad_is_zero() {
            return;
        }
        p.steps += 1;
        let t = p.steps as i32;
        let lr = T::of(self.lr);
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = one - T::of(self.beta1.powi(t));
        let bc2 = one - T::of(self.beta2.powi(t));
        let eps = T::of(self.eps);
        let decay = one - lr * T::of(self.weight_decay);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let mhat = p.m[i] / bc1;
            let vhat = p.v[i] / bc2;
            p.value[i] = p.value[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            p.grad[i] = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels. All matrices are row-major slices; `acc` variants add into `out`.
// ---------------------------------------------------------------------------

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[k×n] += aᵀ · b, with a[m×k] and b[m×n].
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a · bᵀ, with a[m×k] and b[n×k].
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            m.data[pos * dim + i] = T::of(v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
        // a · b via a_bt with bᵀ
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_a_bt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // aᵀ·c: 3x4
        let mut d = vec![0.0; 12];
        matmul_at_b_acc(&a, &c, &mut d, 2, 3, 4);
        assert_eq!(d[0], 0.0 * c[0] + 3.0 * c[4]);
    }

    #[test]
    fn softmax_sums_to_one_and_argmax_breaks_ties_low() {
        let mut r = vec![1.0f64, 3.0, 3.0, -2.0];
        assert_eq!(argmax(&r), 1);
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn adamw_zero_grad_and_zero_lr_are_fixed_points() {
        let mut p = Param::<f64>::new(1, 3, vec![1.0, -2.0, 0.5]);
        let before = p.value.clone();
        AdamW::default().step(&mut p);
        assert_eq!(p.value, before);

        p.grad = vec![0.3, -0.1, 2.0];
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut p);
        assert_eq!(p.value, before);
        assert!(p.grad_is_zero());
    }

    #[test]
    fn adamw_decreases_scalar_quadratic() {
        // f(x) = (x - 3)^2, starting at 0.
        let mut p = Param::<f64>::new(1, 1, vec![0.0]);
        let opt = AdamW {
            lr: 0.01,
            ..AdamW::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let x = p.value[0];
            let loss = (x - 3.0) * (x - 3.0);
            assert!(loss < prev);
            prev = loss;
            p.grad[0] = 2.0 * (x - 3.0);
            opt.step(&mut p);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Param::<f32>::zeros(1, 2);
        p.grad[1] = f32::NAN;
        assert!(AdamW::check_finite("w", &p).is_err());
    }
}
