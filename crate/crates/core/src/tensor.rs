//! Dense row-major tensors of rank 1 to 4.
//!
//! Activations are `(N, C, H, W)`, kernels `(Cout, Cin, Kh, Kw)` and
//! per-channel vectors `(C)`. `f32` is the working precision; `f64` tensors
//! exist for gradient checking.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{reject, Error, Result};

/// Scalar types a tensor can hold.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn from_f64(v: f64) -> Self;

    /// `c = alpha * a * b + beta * c` for strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );
}

/// A borrowed matrix with explicit row and column strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

fn check_extent<T>(m: usize, k: usize, a: &MatRef<'_, T>) {
    if m == 0 || k == 0 {
        return;
    }
    let last = (m as isize - 1) * a.rs + (k as isize - 1) * a.cs;
    assert!(last >= 0 && (last as usize) < a.data.len(), "gemm operand out of bounds");
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: MatRef<'_, f32>,
        b: MatRef<'_, f32>,
        beta: f32,
        c: &mut [f32],
    ) {
        check_extent(m, k, &a);
        check_extent(k, n, &b);
        assert!(c.len() >= m * n);
        // SAFETY: operand extents were bounds-checked above and `c` is an
        // exclusively borrowed dense m x n buffer.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: MatRef<'_, f64>,
        b: MatRef<'_, f64>,
        beta: f64,
        c: &mut [f64],
    ) {
        check_extent(m, k, &a);
        check_extent(k, n, &b);
        assert!(c.len() >= m * n);
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorT<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub type Tensor = TensorT<f32>;
pub type Tensor64 = TensorT<f64>;

impl<T: Real> TensorT<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            reject!("tensor rank must be 1..=4, got {}", shape.len());
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            reject!("shape {:?} holds {} elements, data has {}", shape, n, data.len());
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "tensor rank must be 1..=4");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<T>) -> Result<()> {
        if g.len() != self.data.len() {
            reject!("gradient length {} does not match tensor length {}", g.len(), self.data.len());
        }
        self.grad = Some(g);
        Ok(())
    }

    /// Adds into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        match &mut self.grad {
            Some(acc) if acc.len() == g.len() => {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                Ok(())
            }
            Some(acc) => reject!("gradient length {} does not match {}", g.len(), acc.len()),
            None => self.set_grad(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_and_data_mut(&mut self) -> (Option<&[T]>, &mut [T]) {
        (self.grad.as_deref(), &mut self.data)
    }

    /// Shape as `(N, C, H, W)`; rejects any other rank.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => reject!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            reject!("cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite value")))
        }
    }

    pub fn cast<U: Real>(&self) -> TensorT<U> {
        TensorT {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
            grad: None,
        }
    }

    /// Bitwise equality of data and shape; gradient slots are ignored.
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: BitRepr,
    {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}
