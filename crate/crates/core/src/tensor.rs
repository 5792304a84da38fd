//! Dense activation tensors and the scalar abstraction shared by the network code.
//!
//! Activations are stored channel-major as `(C, N, H, W)`: every channel is a
//! contiguous run covering the whole batch. With that layout a convolution over
//! a batch is a single GEMM, channel concatenation is buffer concatenation, and
//! per-channel statistics (batch norm) read one contiguous slice.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the network. Implemented for `f32`
/// (training) and `f64` (gradient checking).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_raw(
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
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: out too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: all three operands were bounds checked against their
                // strided extents above and the output does not alias the inputs
                // (it is a distinct &mut borrow).
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

/// Row-major matrix operand view for [`gemm`].
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    /// `data` is a row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major.
pub fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    T::gemm_raw(m, k, n, T::one(), a.data, rsa, csa, b.data, rsb, csb, beta, out, n as isize, 1);
}

/// Channel-major activation tensor with shape `(C, N, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length mismatch");
        Tensor { shape, data }
    }

    /// Build a batch from per-sample `(C, H, W)` row-major buffers.
    pub fn from_samples<S: AsRef<[T]>>(samples: &[S], channels: usize, height: usize, width: usize) -> Self {
        let batch = samples.len();
        let plane = height * width;
        let mut out = Self::zeros([channels, batch, height, width]);
        for (b, s) in samples.iter().enumerate() {
            let s = s.as_ref();
            assert_eq!(s.len(), channels * plane, "sample length mismatch");
            for c in 0..channels {
                let dst = (c * batch + b) * plane;
                out.data[dst..dst + plane].copy_from_slice(&s[c * plane..(c + 1) * plane]);
            }
        }
        out
    }

    /// Sample `b` as a `(C, H, W)` row-major buffer.
    pub fn sample(&self, b: usize) -> Vec<T> {
        let [c, n, h, w] = self.shape;
        assert!(b < n);
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let start = (ch * n + b) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn batch(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per channel (N * H * W).
    pub fn channel_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Concatenate along the channel axis. All parts must agree on (N, H, W).
    pub fn concat_channels(parts: &[Tensor<T>]) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let [_, n, h, w] = parts[0].shape;
        let mut channels = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            assert_eq!(&p.shape[1..], &[n, h, w], "concat shape mismatch");
            channels += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: [channels, n, h, w], data }
    }

    /// Split along the channel axis into equally sized parts.
    pub fn split_channels(&self, parts: usize) -> Vec<Tensor<T>> {
        assert!(parts > 0 && self.shape[0] % parts == 0, "channel split must be exact");
        let per = self.shape[0] / parts;
        let len = per * self.channel_len();
        self.data
            .chunks(len)
            .map(|chunk| Tensor { shape: [per, self.shape[1], self.shape[2], self.shape[3]], data: chunk.to_vec() })
            .collect()
    }

    /// Keep batch entries `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let [c, n, h, w] = self.shape;
        assert!(start + len <= n);
        let plane = h * w;
        let mut data = Vec::with_capacity(c * len * plane);
        for ch in 0..c {
            let base = (ch * n + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor { shape: [c, len, h, w], data }
    }

    /// Convert element type (used to run an f32 model in f64 and back).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }
}
