use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::tensor::{gemm, Mat, Real, Tensor};

use super::Param;

/// Kernel, stride and zero padding of a 2-D convolution. One-dimensional
/// signals use a height of 1 with a `1 x k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Geometry {
    pub fn taps(&self) -> usize {
        self.kernel[0] * self.kernel[1]
    }

    /// Output extent of a strided convolution over an `h x w` input.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |x: usize, i: usize| {
            let padded = x + 2 * self.padding[i];
            padded.checked_sub(self.kernel[i]).map(|v| v / self.stride[i] + 1)
        };
        Some((dim(h, 0)?, dim(w, 1)?))
    }

    /// Output extent of a transposed convolution that exactly inverts the
    /// spatial reduction of `conv_out` (`out = in * stride`).
    pub fn conv_t_out(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.stride[0], w * self.stride[1])
    }
}

/// Unfold `x` (shape `(c, n, h, w)`) into `cols`, a row-major
/// `(c * kh * kw) x (n * oh * ow)` matrix of receptive-field samples.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    [c, n, h, w]: [usize; 4],
    g: &Geometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let ncols = n * oh * ow;
    assert_eq!(cols.len(), c * kh * kw * ncols);
    par::for_each_chunk_mut(Execution::default(), cols, ncols, |row, dst_row| {
        let kx = row % kw;
        let ky = (row / kw) % kh;
        let ci = row / (kh * kw);
        for b in 0..n {
            let src = &x[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
            for oy in 0..oh {
                let dst = &mut dst_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let line = &src[iy as usize * w..(iy as usize + 1) * w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    *d = if ix >= 0 && ix < w as isize { line[ix as usize] } else { T::zero() };
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x` (which is not cleared).
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    [c, n, h, w]: [usize; 4],
    g: &Geometry,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let ncols = n * oh * ow;
    assert_eq!(cols.len(), c * kh * kw * ncols);
    assert_eq!(x.len(), c * n * h * w);
    par::for_each_chunk_mut(Execution::default(), x, n * h * w, |ci, dst_ch| {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * ncols..((ci * kh + ky) * kw + kx + 1) * ncols];
                for b in 0..n {
                    let dst = &mut dst_ch[b * h * w..(b + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    });
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], per_channel: usize) {
    par::for_each_chunk_mut(Execution::default(), y, per_channel, |c, row| {
        let b = bias[c];
        row.iter_mut().for_each(|v| *v += b);
    });
}

fn accumulate_bias_grad<T: Real>(grad: &mut [T], dy: &Tensor<T>) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy.channel(c).iter().copied().sum::<T>();
    }
}

/// Strided convolution. Weight layout `(C_out, C_in, kh, kw)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.geometry.conv_out(h, w).expect("kernel larger than padded input")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [c, n, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let k = c * self.geometry.taps();
        let ncols = n * oh * ow;
        let mut cols = vec![T::zero(); k * ncols];
        im2col(x.data(), x.shape(), &self.geometry, oh, ow, &mut cols);
        let mut y = Tensor::zeros([self.out_channels, n, oh, ow]);
        gemm(
            Mat::new(&self.weight.value, self.out_channels, k),
            Mat::new(&cols, k, ncols),
            T::zero(),
            y.data_mut(),
        );
        if let Some(b) = &self.bias {
            add_bias(y.data_mut(), &b.value, ncols);
        }
        y
    }

    /// Accumulate parameter gradients and optionally return the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let [c, n, _, _] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let k = c * self.geometry.taps();
        let ncols = n * oh * ow;
        let mut cols = vec![T::zero(); k * ncols];
        im2col(x.data(), x.shape(), &self.geometry, oh, ow, &mut cols);
        gemm(
            Mat::new(dy.data(), self.out_channels, ncols),
            Mat::new(&cols, k, ncols).t(),
            T::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(&mut b.grad, dy);
        }
        if !input_grad {
            return None;
        }
        gemm(
            Mat::new(&self.weight.value, self.out_channels, k).t(),
            Mat::new(dy.data(), self.out_channels, ncols),
            T::zero(),
            &mut cols,
        );
        let mut dx = Tensor::zeros(x.shape());
        col2im(&cols, x.shape(), &self.geometry, oh, ow, dx.data_mut());
        Some(dx)
    }
}

/// Cached effective weight of a weight-normalized layer.
#[derive(Clone, Debug)]
pub struct WeightNormCache<T> {
    pub effective: Vec<T>,
    pub norms: Vec<T>,
}

/// Transposed (fractionally strided) convolution. Weight layout
/// `(C_in, C_out, kh, kw)`. With `gain` set the layer is weight normalized:
/// the effective weight of output channel `o` is `gain[o] * v_o / |v_o|`
/// where `v` is the stored `weight` (the direction).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub gain: Option<Param<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    fn direction_norms(&self) -> Vec<T> {
        let taps = self.geometry.taps();
        let mut sq = vec![T::zero(); self.out_channels];
        for ci in 0..self.in_channels {
            for co in 0..self.out_channels {
                let base = (ci * self.out_channels + co) * taps;
                sq[co] += self.weight.value[base..base + taps].iter().map(|&v| v * v).sum::<T>();
            }
        }
        sq.into_iter().map(|s| s.sqrt()).collect()
    }

    /// The weight actually applied in the forward pass.
    pub fn effective_weight(&self) -> WeightNormCache<T> {
        match &self.gain {
            None => WeightNormCache { effective: self.weight.value.clone(), norms: Vec::new() },
            Some(gain) => {
                let norms = self.direction_norms();
                let taps = self.geometry.taps();
                let mut effective = self.weight.value.clone();
                for (i, chunk) in effective.chunks_mut(taps).enumerate() {
                    let co = i % self.out_channels;
                    let scale = gain.value[co] / norms[co];
                    chunk.iter_mut().for_each(|v| *v *= scale);
                }
                WeightNormCache { effective, norms }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, WeightNormCache<T>) {
        let [c, n, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "transposed conv input channel mismatch");
        let (oh, ow) = self.geometry.conv_t_out(h, w);
        let wn = self.effective_weight();
        let k = self.out_channels * self.geometry.taps();
        let ncols = n * h * w;
        let mut cols = vec![T::zero(); k * ncols];
        gemm(
            Mat::new(&wn.effective, self.in_channels, k).t(),
            Mat::new(x.data(), c, ncols),
            T::zero(),
            &mut cols,
        );
        let mut y = Tensor::zeros([self.out_channels, n, oh, ow]);
        col2im(&cols, y.shape(), &self.geometry, h, w, y.data_mut());
        if let Some(b) = &self.bias {
            add_bias(y.data_mut(), &b.value, n * oh * ow);
        }
        (y, wn)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        wn: &WeightNormCache<T>,
        dy: &Tensor<T>,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [c, n, h, w] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let k = self.out_channels * self.geometry.taps();
        let ncols = n * h * w;
        let mut cols = vec![T::zero(); k * ncols];
        im2col(dy.data(), dy.shape(), &self.geometry, h, w, &mut cols);
        debug_assert_eq!((oh, ow), self.geometry.conv_t_out(h, w));

        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(&mut b.grad, dy);
        }
        match &mut self.gain {
            None => gemm(
                Mat::new(x.data(), c, ncols),
                Mat::new(&cols, k, ncols).t(),
                T::one(),
                &mut self.weight.grad,
            ),
            Some(gain) => {
                let mut d_eff = vec![T::zero(); c * k];
                gemm(Mat::new(x.data(), c, ncols), Mat::new(&cols, k, ncols).t(), T::zero(), &mut d_eff);
                let taps = self.geometry.taps();
                let co_count = self.out_channels;
                // d gain_o = <dW_o, v_o> / |v_o|
                let mut dgain = vec![T::zero(); co_count];
                for (i, (dw, v)) in d_eff.chunks(taps).zip(self.weight.value.chunks(taps)).enumerate() {
                    let co = i % co_count;
                    dgain[co] += dw.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>() / wn.norms[co];
                }
                // d v = (g/|v|) dW - (g * dgain / |v|^2) v
                for (i, ((gv, dw), v)) in self
                    .weight
                    .grad
                    .chunks_mut(taps)
                    .zip(d_eff.chunks(taps))
                    .zip(self.weight.value.chunks(taps))
                    .enumerate()
                {
                    let co = i % co_count;
                    let norm = wn.norms[co];
                    let a = gain.value[co] / norm;
                    let b = gain.value[co] * dgain[co] / (norm * norm);
                    for ((g, &d), &vv) in gv.iter_mut().zip(dw).zip(v) {
                        *g += a * d - b * vv;
                    }
                }
                for (g, d) in gain.grad.iter_mut().zip(dgain) {
                    *g += d;
                }
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            Mat::new(&wn.effective, self.in_channels, k),
            Mat::new(&cols, k, ncols),
            T::zero(),
            dx.data_mut(),
        );
        Some(dx)
    }
}
