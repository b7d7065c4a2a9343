//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is plain immutable-by-convention data. Differentiable values
//! live on a [`Tape`] and are addressed through [`Var`] handles; every
//! differentiable operation records exactly one tape node.

mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use ops::{gelu, gelu_grad, sigmoid, softplus, Binary, Reduce, Unary};
pub use tape::{BackwardFn, Gradients, NodeId, Tape, Var};

/// Scalar type of the tensor core. `f32` is the compute precision; `f64`
/// exists for gradient checks.
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
    /// `c ← alpha·a·b + beta·c` over raw strided storage.
    ///
    /// # Safety
    /// All pointers must address storage covering the strided extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// `1 − eˣ`, accurate near zero.
    fn one_minus_exp(self) -> Self {
        -self.exp_m1()
    }

    /// `eˣ` on the hot elementwise paths. The `f32` version is branch-free
    /// so loops over it vectorize.
    fn fast_exp(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    /// Taylor series on `[-0.5, 0.5]` (error below 1e-8 relative), which is
    /// several times cheaper than `expm1f`.
    fn one_minus_exp(self) -> f32 {
        if self.abs() <= 0.5 {
            let x = self;
            let mut p = 1.0 / 362_880.0;
            for d in [40_320.0f32, 5_040.0, 720.0, 120.0, 24.0, 6.0, 2.0, 1.0] {
                p = p * x + 1.0 / d;
            }
            -x * p
        } else {
            1.0 - self.fast_exp()
        }
    }

    /// Cephes-style range reduction `x = n·ln2 + r` and a degree-6
    /// polynomial for `eʳ`; within 2 ulp of `expf`. Inputs are clamped to the
    /// normal range, so large negative arguments give ~1e-38 rather than 0.
    #[inline]
    fn fast_exp(self) -> f32 {
        const ROUND: f32 = 12_582_912.0; // 1.5·2²³
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4f32;
        for c in [
            1.398_199_9e-3,
            8.333_452e-3,
            4.166_579_6e-2,
            0.166_666_65,
            0.5,
        ] {
            p = p * r + c;
        }
        let e = p * r * r + r + 1.0;
        e * f32::from_bits(((n as i32 + 127) << 23) as u32)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided 2-D view into a slice, used to describe gemm operands.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, S> MatRef<'a, S> {
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view over the same storage.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c ← a·b + beta·c`, with `c` a row-major `[a.rows, b.cols]` block of
/// row stride `ldc`.
pub fn gemm<S: Real>(a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, c: &mut [S], ldc: usize) {
    gemm_strided(a, b, beta, c, ldc, 1);
}

/// [`gemm`] with an arbitrary output layout: element `(i, j)` of `c` lives at
/// `i·rsc + j·csc`.
pub fn gemm_strided<S: Real>(
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    beta: S,
    c: &mut [S],
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = *v * beta;
            }
        }
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// n-dimensional row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{:?}, {:?}, ..]",
                self.shape, self.data[0], self.data[1]
            )
        }
    }
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(
            [n, n],
            |i| if i / n == i % n { S::one() } else { S::zero() },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::lit(x.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Explicitly tile this tensor up to `shape` under the broadcast rule.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, shape
            )));
        }
        let idx = BroadcastIndex::new(&self.shape, shape);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|i| self.data[idx.map(i)])
                .collect(),
        })
    }
}

/// Broadcast shape of two operands: trailing axes are aligned, and a
/// missing or size-1 axis repeats.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast shapes {a:?} and {b:?}"
                )));
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output to flat indices of one operand.
pub(crate) struct BroadcastIndex {
    out_strides: Vec<usize>,
    in_strides: Vec<usize>,
}

impl BroadcastIndex {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let mut in_strides = vec![0; rank];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            let oi = i + rank - input.len();
            in_strides[oi] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        let mut out_strides = vec![0; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            out_strides[i] = s;
            s *= out[i];
        }
        BroadcastIndex {
            out_strides,
            in_strides,
        }
    }

    pub(crate) fn map(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for (os, is) in self.out_strides.iter().zip(&self.in_strides) {
            let q = flat / os;
            flat -= q * os;
            idx += q * is;
        }
        idx
    }
}

/// Sum `grad` (of broadcast shape `out`) back down to `target` shape.
pub(crate) fn unbroadcast<S: Real>(grad: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if grad.shape() == target {
        return grad.clone();
    }
    let n: usize = target.iter().product();
    let mut data = vec![S::zero(); n];
    if is_suffix(target, grad.shape()) {
        for chunk in grad.data().chunks(n.max(1)) {
            for (d, &g) in data.iter_mut().zip(chunk) {
                *d += g;
            }
        }
    } else {
        let idx = BroadcastIndex::new(target, grad.shape());
        for (i, &g) in grad.data().iter().enumerate() {
            data[idx.map(i)] += g;
        }
    }
    Tensor {
        shape: target.to_vec(),
        data,
    }
}

/// True when `small` equals the trailing axes of `big` (after dropping
/// leading size-1 axes of `small`).
pub(crate) fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let small = &small[lead..];
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}
