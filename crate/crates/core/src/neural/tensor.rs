//! Dense row-major matrices and the scalar trait shared by every model.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the models are generic over.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a · b + beta * c` on strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the asserts above bound every strided access for the
                // contiguous row-major layouts this module produces.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn to_f64(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }

    pub fn from_f64(m: &Mat<f64>) -> Self {
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a · b`, `a · bᵀ` or `aᵀ · b` depending on the transpose flags.
    pub fn matmul(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool) -> Mat<T> {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, kb, "matmul inner dims {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
        let mut out = Mat::zeros(m, n);
        Self::gemm_into(a, ta, b, tb, &mut out, T::zero());
        out
    }

    /// `out = a' · b' + beta * out`.
    pub fn gemm_into(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, out: &mut Mat<T>, beta: T) {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if tb { b.rows } else { b.cols };
        debug_assert_eq!(out.shape(), (m, n));
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        if k == 0 {
            out.scale(beta);
            return;
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data,
            rsa,
            csa,
            &b.data,
            rsb,
            csb,
            beta,
            &mut out.data,
            out.cols as isize,
            1,
        );
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    if xs.is_empty() {
        return Vec::new();
    }
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    xs.iter().map(|&x| x - lse).collect()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
