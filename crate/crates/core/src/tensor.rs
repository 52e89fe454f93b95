//! Dense row-major tensors over `f32`/`f64` with per-thread allocation
//! tracking, plus the handful of GEMM entry points the model needs.

use std::fmt::{Debug, Display};

use crate::error::{Error, Result};

/// Element type of every tensor in the lab. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    /// Width in bytes; also the dtype tag in checkpoints.
    const BYTES: usize;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

macro_rules! impl_float {
    ($t:ty, $bytes:expr, $gemm:path) => {
        impl Float for $t {
            const BYTES: usize = $bytes;

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
                assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs too short");
                assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs too short");
                assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: out too short");
                // SAFETY: the three extents were bounds-checked above and the
                // output does not alias the inputs (distinct borrows).
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

impl_float!(f32, 4, matrixmultiply::sgemm);
impl_float!(f64, 8, matrixmultiply::dgemm);

/// Per-thread accounting of tensor bytes, read by the resource meter.
pub mod arena {
    use std::cell::Cell;

    thread_local! {
        static CURRENT: Cell<i64> = const { Cell::new(0) };
        static PEAK: Cell<i64> = const { Cell::new(0) };
    }

    pub(crate) fn alloc(bytes: usize) {
        CURRENT.with(|c| {
            let now = c.get() + bytes as i64;
            c.set(now);
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now)
                }
            });
        });
    }

    pub(crate) fn free(bytes: usize) {
        CURRENT.with(|c| c.set(c.get() - bytes as i64));
    }

    /// Bytes currently held by live tensors created on this thread.
    pub fn current_bytes() -> i64 {
        CURRENT.with(|c| c.get())
    }

    /// Highest value of [`current_bytes`] since the last [`reset_peak`].
    pub fn peak_bytes() -> i64 {
        PEAK.with(|p| p.get())
    }

    /// Restarts peak tracking from the current level and returns the old peak.
    pub fn reset_peak() -> i64 {
        let now = current_bytes();
        PEAK.with(|p| p.replace(now))
    }

    /// Raises the peak to at least `value` (used to restore an outer meter).
    pub fn raise_peak(value: i64) {
        PEAK.with(|p| {
            if value > p.get() {
                p.set(value)
            }
        });
    }
}

/// A dense row-major tensor of rank 1 or 2.
pub struct Tensor<T: Float> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        arena::alloc(data.len() * T::BYTES);
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        arena::alloc(len * T::BYTES);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, x)| *x = f(i));
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

    /// Number of rows of a matrix (the first dimension; 1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Row length (the last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Transposed copy of a matrix.
    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Elementwise conversion to another float width.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|x| U::lit(x.as_f64())).collect();
        Tensor::new(self.shape.clone(), data).expect("same shape")
    }
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        arena::alloc(self.data.len() * T::BYTES);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl<T: Float> Drop for Tensor<T> {
    fn drop(&mut self) {
        arena::free(self.data.len() * T::BYTES);
    }
}

impl<T: Float> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Float> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, all row-major; `accumulate` adds into `out`.
pub fn matmul<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}

/// `out (m×n) = a (m×k) · bᵀ` where `b` is stored row-major as (n×k).
pub fn matmul_bt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        out,
        n as isize,
        1,
    );
}

/// `out (m×n) = aᵀ · b` where `a` is stored row-major as (k×m) and `b` as (k×n).
pub fn matmul_at<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}
