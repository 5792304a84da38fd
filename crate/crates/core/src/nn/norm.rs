use crate::par::{self, Execution};
use crate::tensor::{Real, Tensor};

use super::{Mode, Param};

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Normalized activations and per-statistic inverse standard deviations,
/// kept from the forward pass for backprop.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![T::one(); channels], vec![channels]),
            beta: Param::new(vec![T::zero(); channels], vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Per-channel batch mean and biased variance.
    pub fn batch_stats(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
        let m = x.channel_len();
        let mf = T::from_usize(m).unwrap();
        par::map_indexed(Execution::default(), x.channels(), |ch| {
            let row = x.channel(ch);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            (mean, var)
        })
        .into_iter()
        .unzip()
    }

    /// Exponential moving average update of the running statistics; the
    /// running variance uses the unbiased estimate.
    pub fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        let unbias = if count > 1 { T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap() } else { T::one() };
        for ch in 0..mean.len() {
            self.running_mean[ch] = (T::one() - momentum) * self.running_mean[ch] + momentum * mean[ch];
            self.running_var[ch] = (T::one() - momentum) * self.running_var[ch] + momentum * var[ch] * unbias;
        }
    }

    /// Normalize with training (batch) or inference (running) statistics
    /// without touching the running statistics.
    pub fn apply(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, NormCache<T>) {
        match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                self.normalize(x, &mean, &var)
            }
            Mode::Eval => self.normalize(x, &self.running_mean, &self.running_var),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, NormCache<T>) {
        match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                self.update_running(&mean, &var, x.channel_len());
                self.normalize(x, &mean, &var)
            }
            Mode::Eval => self.apply(x, mode),
        }
    }

    pub(crate) fn normalize(&self, x: &Tensor<T>, mean: &[T], var: &[T]) -> (Tensor<T>, NormCache<T>) {
        let m = x.channel_len();
        let eps = T::from_f64_lossy(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        par::zip_chunks_mut(Execution::default(), xhat.data_mut(), x.data(), m, m, |ch, out, row| {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        });
        par::zip_chunks_mut(Execution::default(), y.data_mut(), xhat.data(), m, m, |ch, out, row| {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = g * v + b;
            }
        });
        (y, NormCache { xhat, inv_std })
    }

    /// Backward through the training-mode (batch statistics) transform.
    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>, frozen_affine: bool) -> Tensor<T> {
        let c = dy.channels();
        let m = dy.channel_len();
        let mf = T::from_usize(m).unwrap();
        let sums = par::map_indexed(Execution::default(), c, |ch| {
            let d = dy.channel(ch);
            let xh = cache.xhat.channel(ch);
            let sum_dy: T = d.iter().copied().sum();
            let sum_dy_xhat: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            (sum_dy, sum_dy_xhat)
        });
        if !frozen_affine {
            for (ch, &(s, sx)) in sums.iter().enumerate() {
                self.gamma.grad[ch] += sx;
                self.beta.grad[ch] += s;
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        par::zip_chunks_mut(Execution::default(), dx.data_mut(), dy.data(), m, m, |ch, out, d| {
            let (s, sx) = sums[ch];
            let k = self.gamma.value[ch] * cache.inv_std[ch] / mf;
            let xh = cache.xhat.channel(ch);
            for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(xh) {
                *o = k * (mf * dv - s - xv * sx);
            }
        });
        dx
    }

    /// Backward through the inference-mode (running statistics) transform.
    pub fn backward_eval(&mut self, cache: &NormCache<T>, dy: &Tensor<T>, frozen_affine: bool) -> Tensor<T> {
        let m = dy.channel_len();
        if !frozen_affine {
            for ch in 0..dy.channels() {
                let d = dy.channel(ch);
                self.gamma.grad[ch] += d.iter().zip(cache.xhat.channel(ch)).map(|(&a, &b)| a * b).sum::<T>();
                self.beta.grad[ch] += d.iter().copied().sum::<T>();
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        par::zip_chunks_mut(Execution::default(), dx.data_mut(), dy.data(), m, m, |ch, out, d| {
            let k = self.gamma.value[ch] * cache.inv_std[ch];
            out.iter_mut().zip(d).for_each(|(o, &v)| *o = k * v);
        });
        dx
    }
}

/// Group normalization: each sample's channels are split into `groups`
/// contiguous groups, each normalized over its channels and spatial extent.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "group count must divide channels");
        GroupNorm {
            groups,
            gamma: Param::new(vec![T::one(); channels], vec![channels]),
            beta: Param::new(vec![T::zero(); channels], vec![channels]),
        }
    }

    /// Statistics index for (sample b, group g) is `b * groups + g`.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let [c, n, h, w] = x.shape();
        let plane = h * w;
        let per_group = c / self.groups;
        let count = T::from_usize(per_group * plane).unwrap();
        let eps = T::from_f64_lossy(NORM_EPS);
        let data = x.data();
        let stats = par::map_indexed(Execution::default(), n * self.groups, |idx| {
            let (b, g) = (idx / self.groups, idx % self.groups);
            let segs = (g * per_group..(g + 1) * per_group).map(|ch| &data[(ch * n + b) * plane..(ch * n + b + 1) * plane]);
            let mean = segs.clone().flat_map(|s| s.iter().copied()).sum::<T>() / count;
            let var = segs.flat_map(|s| s.iter().map(move |&v| (v - mean) * (v - mean))).sum::<T>() / count;
            (mean, T::one() / (var + eps).sqrt())
        });
        let mut xhat = Tensor::zeros(x.shape());
        par::zip_chunks_mut(Execution::default(), xhat.data_mut(), data, n * plane, n * plane, |ch, out, row| {
            let g = ch / per_group;
            for b in 0..n {
                let (mean, inv) = stats[b * self.groups + g];
                for (o, &v) in out[b * plane..(b + 1) * plane].iter_mut().zip(&row[b * plane..(b + 1) * plane]) {
                    *o = (v - mean) * inv;
                }
            }
        });
        let mut y = Tensor::zeros(x.shape());
        par::zip_chunks_mut(Execution::default(), y.data_mut(), xhat.data(), n * plane, n * plane, |ch, out, row| {
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = gm * v + bt);
        });
        let inv_std = stats.into_iter().map(|(_, inv)| inv).collect();
        (y, NormCache { xhat, inv_std })
    }

    /// With `frozen_affine` the scale and shift receive no gradient; the
    /// input gradient still flows through them.
    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>, frozen_affine: bool) -> Tensor<T> {
        let [c, n, h, w] = dy.shape();
        let plane = h * w;
        let per_group = c / self.groups;
        let count = T::from_usize(per_group * plane).unwrap();
        if !frozen_affine {
            for ch in 0..c {
                let d = dy.channel(ch);
                self.gamma.grad[ch] += d.iter().zip(cache.xhat.channel(ch)).map(|(&a, &b)| a * b).sum::<T>();
                self.beta.grad[ch] += d.iter().copied().sum::<T>();
            }
        }
        let gamma = &self.gamma.value;
        // Per (sample, group): sum of dxhat and of dxhat * xhat.
        let sums = par::map_indexed(Execution::default(), n * self.groups, |idx| {
            let (b, g) = (idx / self.groups, idx % self.groups);
            let mut s = T::zero();
            let mut sx = T::zero();
            for ch in g * per_group..(g + 1) * per_group {
                let range = (ch * n + b) * plane..(ch * n + b + 1) * plane;
                for (&d, &xh) in dy.data()[range.clone()].iter().zip(&cache.xhat.data()[range]) {
                    let dxh = d * gamma[ch];
                    s += dxh;
                    sx += dxh * xh;
                }
            }
            (s, sx)
        });
        let mut dx = Tensor::zeros(dy.shape());
        par::zip_chunks_mut(Execution::default(), dx.data_mut(), dy.data(), n * plane, n * plane, |ch, out, d| {
            let g = ch / per_group;
            let xh = cache.xhat.channel(ch);
            for b in 0..n {
                let idx = b * self.groups + g;
                let (s, sx) = sums[idx];
                let k = cache.inv_std[idx] / count;
                for i in b * plane..(b + 1) * plane {
                    out[i] = k * (count * d[i] * gamma[ch] - s - xh[i] * sx);
                }
            }
        });
        dx
    }
}
