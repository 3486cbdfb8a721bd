//! Dense row-major matrix kernels, seeded randomness and a central-difference
//! gradient checker.
//!
//! Everything here is generic over [`Scalar`], implemented for `f32` and
//! `f64`. Training code runs on `f64`; `f32` exists for the storage format and
//! for callers that want to evaluate a trained model cheaply.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

/// Floating point element type accepted by every kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; finite inputs always succeed.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Mat { rows, cols, data };
        m.ensure_finite("from_vec")?;
        Ok(m)
    }

    /// Builds a matrix from nested rows. Panics on ragged or non-finite input;
    /// intended for literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend(r.as_ref().iter().map(|&x| T::of(x)));
        }
        Self::from_vec(rows.len(), cols, data).expect("finite literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && self.rows != 0 && other.rows != 0 {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let cols = if self.rows == 0 {
            other.cols
        } else {
            self.cols
        };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite entry")))
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("axpy", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Column sums as a 1×cols matrix.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.data[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(&bias.data)
            {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

/// Matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out.data[i * m + j] = dot(arow, b.row(j));
        }
    }
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m) = (a.cols, b.cols);
    let mut out = Mat::zeros(k, m);
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out.data[i * m..(i + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh_map<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(|v| v.tanh())
}

pub fn hadamard<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let out = a.zip_map(b, "hadamard", |x, y| x * y)?;
    out.ensure_finite("hadamard")?;
    Ok(out)
}

/// Squared Frobenius norm, `Tr(MᵀM)`.
pub fn frob_sq<T: Scalar>(a: &Mat<T>) -> T {
    a.as_slice().iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// Entrywise sign with `sign(0) = +1`.
pub fn sign_quantize<T: Scalar>(u: &Mat<T>) -> Mat<T> {
    u.map(|x| if x < T::zero() { -T::one() } else { T::one() })
}

/// Compares an analytic gradient against central differences of `f` at `at`.
///
/// Returns the maximum over entries of
/// `|g_num - g_ana| / max(1, |g_num|, |g_ana|)`.
pub fn finite_diff_check<T, F>(f: F, grad: &Mat<T>, at: &Mat<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Mat<T>) -> Result<T>,
{
    if grad.shape() != at.shape() {
        return Err(Error::shape("finite_diff_check", grad.shape(), at.shape()));
    }
    if !(h > T::zero()) {
        return Err(Error::Config(
            "finite difference step must be positive".into(),
        ));
    }
    let two = T::of(2.0);
    let mut probe = at.clone();
    let mut worst = T::zero();
    for idx in 0..at.data.len() {
        let x0 = at.data[idx];
        probe.data[idx] = x0 + h;
        let fp = f(&probe)?;
        probe.data[idx] = x0 - h;
        let fm = f(&probe)?;
        probe.data[idx] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at perturbed entry {idx}"
            )));
        }
        let num = (fp - fm) / (two * h);
        let ana = grad.data[idx];
        let denom = T::one().max(num.abs()).max(ana.abs());
        worst = worst.max((num - ana).abs() / denom);
    }
    Ok(worst)
}

/// Deterministic random source: xoshiro256** seeded through splitmix64.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle driven by [`SeededRng::below`].
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Mat<T> {
        Mat::from_fn(rows, cols, |_, _| T::of(self.normal()))
    }

    /// Glorot-uniform initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Mat<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Mat::from_fn(fan_in, fan_out, |_, _| T::of(self.uniform_range(-a, a)))
    }
}
