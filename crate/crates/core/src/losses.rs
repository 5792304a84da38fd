//! Training objectives.
//!
//! Every term is returned *before* its weight; [`total_loss`] applies each
//! weight exactly once. The `*_grad` helpers accumulate `scale * dL/dθ` into
//! the model's parameter gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sigmoid_scalar, Model};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no encodings given")]
    EmptyEncodings,
    #[error("encoding {index} has shape {got:?}, expected {expected:?}")]
    EncodingShape { index: usize, expected: [usize; 4], got: [usize; 4] },
    #[error("{what} = {value} is not divisible by N = {n}")]
    Divisibility { what: &'static str, value: usize, n: usize },
    #[error("reconstruction target value {0} outside [0, 1]")]
    TargetRange(f64),
    #[error("prediction/target shape mismatch ({0} vs {1} elements)")]
    Shape(usize, usize),
    #[error("loss term `{term}` is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
}

/// Per-block scaling of the pathway penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaScheme {
    /// Reciprocal of the block size.
    #[default]
    Uniform,
    /// Block size times a row-position factor: `N - i` above the diagonal,
    /// `i` below it.
    Positional,
}

impl std::str::FromStr for AlphaScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(AlphaScheme::Uniform),
            "positional" => Ok(AlphaScheme::Positional),
            other => Err(format!("unknown alpha scheme `{other}` (expected uniform|positional)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_pathway: f64,
    pub lambda_zero_recon: f64,
    pub lambda_z: f64,
    pub alpha_scheme: AlphaScheme,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_pathway: 0.5, lambda_zero_recon: 1e-2, lambda_z: 1e-2, alpha_scheme: AlphaScheme::Uniform }
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub pathway: f64,
    pub zero_reconstruction: f64,
    pub encoding: f64,
}

/// Mean binary cross-entropy between probabilities `x_hat` and targets `x`.
/// Log terms are clamped at -100 so saturated predictions stay finite.
pub fn bce(x_hat: &[f64], x: &[f64]) -> Result<f64, LossError> {
    if x_hat.len() != x.len() {
        return Err(LossError::Shape(x_hat.len(), x.len()));
    }
    if let Some(&bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(LossError::TargetRange(bad));
    }
    let total: f64 = x_hat
        .iter()
        .zip(x)
        .map(|(&p, &t)| -(t * p.ln().max(-100.0) + (1.0 - t) * (1.0 - p).ln().max(-100.0)))
        .sum();
    Ok(total / x.len().max(1) as f64)
}

/// Mean BCE of `sigmoid(logits)` against `target`, and its gradient w.r.t. the logits.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(logits.shape(), target.shape(), "bce shape mismatch");
    let count = logits.len() as f64;
    let inv = T::from_f64_lossy(1.0 / count);
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &a), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        let af = a.to_f64().unwrap();
        let tf = t.to_f64().unwrap();
        total += af.max(0.0) - af * tf + (-af.abs()).exp().ln_1p();
        *g = (sigmoid_scalar(a) - t) * inv;
    }
    (total / count, grad)
}

/// `(1 / (N h)) * sum_n |z^n|^2`, averaged over the batch, where `h` is the
/// number of elements of one sample's code.
pub fn encoding_l2<T: Real>(z: &[Tensor<T>]) -> Result<f64, LossError> {
    Ok(encoding_l2_grad(z, 0.0)?.0)
}

/// Loss value and `scale * dL/dz^n` for every code.
pub fn encoding_l2_grad<T: Real>(z: &[Tensor<T>], scale: f64) -> Result<(f64, Vec<Tensor<T>>), LossError> {
    let first = z.first().ok_or(LossError::EmptyEncodings)?;
    for (index, part) in z.iter().enumerate() {
        if part.shape() != first.shape() {
            return Err(LossError::EncodingShape { index, expected: first.shape(), got: part.shape() });
        }
    }
    let batch = first.batch();
    let h = first.len() / batch.max(1);
    let denom = (z.len() * h * batch) as f64;
    let total: f64 = z.iter().map(|t| t.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>()).sum();
    let k = T::from_f64_lossy(2.0 * scale / denom);
    let grads = z.iter().map(|t| t.map(|v| k * v)).collect();
    Ok((total / denom, grads))
}

/// Block structure of a weight with `(C_in, C_out, taps)` layout: an `N x N`
/// grid whose block `(i, j)` holds input channels `i*C_in/N ..` and output
/// channels `j*C_out/N ..`, with every kernel tap of those channel pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
    pub n: usize,
}

impl BlockPartition {
    pub fn block_in(&self) -> usize {
        self.c_in / self.n
    }

    pub fn block_out(&self) -> usize {
        self.c_out / self.n
    }

    /// Number of weight entries in one block.
    pub fn block_len(&self) -> usize {
        self.block_in() * self.block_out() * self.taps
    }

    /// Flat indices of block `(i, j)` into the weight buffer.
    pub fn indices(&self, i: usize, j: usize) -> impl Iterator<Item = usize> + '_ {
        let (bi, bo, taps, c_out) = (self.block_in(), self.block_out(), self.taps, self.c_out);
        (i * bi..(i + 1) * bi).flat_map(move |ci| {
            let start = (ci * c_out + j * bo) * taps;
            start..start + bo * taps
        })
    }

    /// Copy of block `(i, j)` in index order.
    pub fn block<T: Copy>(&self, weight: &[T], i: usize, j: usize) -> Vec<T> {
        self.indices(i, j).map(|k| weight[k]).collect()
    }
}

pub fn partition(c_in: usize, c_out: usize, taps: usize, n: usize) -> Result<BlockPartition, LossError> {
    if n == 0 || c_in % n != 0 {
        return Err(LossError::Divisibility { what: "C_in", value: c_in, n });
    }
    if c_out % n != 0 {
        return Err(LossError::Divisibility { what: "C_out", value: c_out, n });
    }
    Ok(BlockPartition { c_in, c_out, taps, n })
}

/// Scaling of off-diagonal block `(i, j)`, `i != j`.
///
/// The positional factor treats the channel block size (C_in/N)(C_out/N) as the
/// normalizer, matching the uniform scheme when the factor is 1. Kernel taps
/// are not part of the normalizer.
pub fn alpha(scheme: AlphaScheme, p: &BlockPartition, i: usize, j: usize) -> f64 {
    let size = (p.block_in() * p.block_out()) as f64;
    match scheme {
        AlphaScheme::Uniform => 1.0 / size,
        AlphaScheme::Positional => {
            let n = p.n as f64;
            let factor = if j > i { n - i as f64 } else { n - (n - i as f64) };
            1.0 / (factor * size)
        }
    }
}

/// Sum over weights and off-diagonal blocks of `alpha * |B_ij|_1`.
pub fn pathway_separation<T: Real>(
    weights: &[(&[T], BlockPartition)],
    scheme: AlphaScheme,
) -> f64 {
    let mut total = 0.0;
    for (w, p) in weights {
        for i in 0..p.n {
            for j in (0..p.n).filter(|&j| j != i) {
                let a = alpha(scheme, p, i, j);
                let l1: f64 = p.indices(i, j).map(|k| w[k].to_f64().unwrap().abs()).sum();
                total += a * l1;
            }
        }
    }
    total
}

/// Partitions of the decoder's penalized (non-output) weights.
pub fn decoder_partitions<T: Real>(model: &Model<T>) -> Result<Vec<BlockPartition>, LossError> {
    let n = model.num_encoders();
    model.decoder_hidden_weights().into_iter().map(|(_, ci, co, taps)| partition(ci, co, taps, n)).collect()
}

/// Pathway loss over the model's decoder (output block excluded).
pub fn model_pathway_separation<T: Real>(model: &Model<T>, scheme: AlphaScheme) -> Result<f64, LossError> {
    let parts = decoder_partitions(model)?;
    let weights: Vec<(&[T], BlockPartition)> =
        model.decoder_hidden_weights().into_iter().zip(parts).map(|((p, ..), bp)| (&p.value[..], bp)).collect();
    Ok(pathway_separation(&weights, scheme))
}

/// Accumulate `scale * d(pathway)/dW` (sign subgradient, 0 at 0) and return the loss.
pub fn model_pathway_separation_grad<T: Real>(
    model: &mut Model<T>,
    scheme: AlphaScheme,
    scale: f64,
) -> Result<f64, LossError> {
    let parts = decoder_partitions(model)?;
    let value = model_pathway_separation(model, scheme)?;
    for ((param, ..), p) in model.decoder_hidden_weights_mut().into_iter().zip(parts) {
        for i in 0..p.n {
            for j in (0..p.n).filter(|&j| j != i) {
                let k = T::from_f64_lossy(scale * alpha(scheme, &p, i, j));
                for idx in p.indices(i, j) {
                    let w = param.value[idx];
                    if w > T::zero() {
                        param.grad[idx] += k;
                    } else if w < T::zero() {
                        param.grad[idx] -= k;
                    }
                }
            }
        }
    }
    Ok(value)
}

/// Mean BCE between the decoder output for an all-zero code and an all-zero target.
pub fn zero_reconstruction<T: Real>(model: &Model<T>) -> f64 {
    let trace = model.zero_code_trace(1);
    let logits = trace.output();
    bce_with_logits(logits, &Tensor::zeros(logits.shape())).0
}

/// Accumulate `scale * dL_zero/dθ` with normalization scale/shift frozen.
///
/// The decoder only contains batch-independent normalization, so the output
/// for a zero code is the same for every batch element; one sample gives the
/// exact batch mean.
pub fn zero_reconstruction_grad<T: Real>(model: &mut Model<T>, scale: f64) -> f64 {
    let trace = model.zero_code_trace(1);
    let logits = trace.output();
    let (value, mut grad) = bce_with_logits(logits, &Tensor::zeros(logits.shape()));
    let k = T::from_f64_lossy(scale);
    grad.data_mut().iter_mut().for_each(|g| *g *= k);
    model.backward_zero_code(&trace, grad);
    value
}

/// `recon + λ_pathway * pathway + λ_zero * zero + λ_z * encoding`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64, LossError> {
    for (term, value) in [
        ("reconstruction", parts.reconstruction),
        ("pathway", parts.pathway),
        ("zero_reconstruction", parts.zero_reconstruction),
        ("encoding", parts.encoding),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(parts.reconstruction
        + cfg.lambda_pathway * parts.pathway
        + cfg.lambda_zero_recon * parts.zero_reconstruction
        + cfg.lambda_z * parts.encoding)
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

    #[test]
    fn bce_at_one_half_is_ln2() {
        let v = bce(&[0.5; 10], &[0.5; 10]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce(&[0.5; 3], &[0.0; 3]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_is_minimized_at_target() {
        let t = [0.3, 0.8];
        let at = bce(&t, &t).unwrap();
        for d in [-0.05, 0.05] {
            let off = [t[0] + d, t[1] - d];
            assert!(bce(&off, &t).unwrap() > at);
        }
        // entropy of the target
        let h: f64 = t.iter().map(|&p: &f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).sum::<f64>() / 2.0;
        assert!((at - h).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_out_of_range_target() {
        assert_eq!(bce(&[0.5], &[1.5]), Err(LossError::TargetRange(1.5)));
    }

    #[test]
    fn bce_with_logits_matches_probability_form() {
        let logits = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-2.0, 0.0, 3.0]);
        let target = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 0.25, 1.0]);
        let probs: Vec<f64> = logits.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let (v, _) = bce_with_logits(&logits, &target);
        assert!((v - bce(&probs, target.data()).unwrap()).abs() < 1e-12);
    }

    fn code(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec([v.len(), 1, 1, 1], v)
    }

    #[test]
    fn encoding_l2_examples() {
        assert_eq!(encoding_l2(&[code(vec![0.0; 4]), code(vec![0.0; 4])]).unwrap(), 0.0);
        for h in [1, 5, 16] {
            assert!((encoding_l2(&[code(vec![1.0; h])]).unwrap() - 1.0).abs() < 1e-12);
        }
        let v = encoding_l2(&[code(vec![1.0; 4]), code(vec![0.0; 4])]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(encoding_l2::<f64>(&[]), Err(LossError::EmptyEncodings));
    }

    #[test]
    fn partition_tiles_matrix() {
        let p = partition(4, 4, 1, 2).unwrap();
        let w: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(p.block(&w, 0, 0), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.block(&w, 0, 1), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.block(&w, 1, 0), vec![8.0, 9.0, 12.0, 13.0]);
        let mut seen: Vec<usize> = (0..2).flat_map(|i| (0..2).flat_map(move |j| p.indices(i, j).collect::<Vec<_>>())).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn partition_of_conv_weight_keeps_taps_together() {
        // 6 in, 4 out, 3x3 kernel: blocks of 3x2 channel pairs, 9 taps each
        let p = partition(6, 4, 9, 2).unwrap();
        assert_eq!((p.block_in(), p.block_out(), p.block_len()), (3, 2, 54));
        let first: Vec<usize> = p.indices(0, 1).take(18).collect();
        // input channel 0, output channels 2..4 -> offsets (0*4 + 2)*9 .. +18
        assert_eq!(first, (18..36).collect::<Vec<_>>());
    }

    #[test]
    fn partition_requires_divisibility() {
        assert!(matches!(partition(5, 4, 1, 2), Err(LossError::Divisibility { what: "C_in", .. })));
        assert!(matches!(partition(4, 3, 1, 2), Err(LossError::Divisibility { what: "C_out", .. })));
    }

    #[test]
    fn pathway_hand_evaluations() {
        let p = partition(2, 2, 1, 2).unwrap();
        assert_eq!(pathway_separation(&[(&W[..], p)], AlphaScheme::Uniform), 5.0);
        assert_eq!(pathway_separation(&[(&W[..], p)], AlphaScheme::Positional), 4.0);
        let diag = [1.0, 0.0, 0.0, 4.0];
        assert_eq!(pathway_separation(&[(&diag[..], p)], AlphaScheme::Uniform), 0.0);
        let single = partition(2, 2, 1, 1).unwrap();
        assert_eq!(pathway_separation(&[(&W[..], single)], AlphaScheme::Uniform), 0.0);
    }

    #[test]
    fn total_loss_weights_each_term_once() {
        let parts = LossParts { reconstruction: 0.7, pathway: 2.0, zero_reconstruction: 0.69, encoding: 0.5 };
        let cfg = LossConfig { lambda_pathway: 0.5, lambda_zero_recon: 0.01, lambda_z: 0.01, ..Default::default() };
        assert!((total_loss(&parts, &cfg).unwrap() - 1.7119).abs() < 1e-12);
        let zero = LossConfig { lambda_pathway: 0.0, lambda_zero_recon: 0.0, lambda_z: 0.0, ..cfg };
        assert_eq!(total_loss(&parts, &zero).unwrap(), 0.7);
        let bad = LossParts { pathway: f64::NAN, ..parts };
        assert!(matches!(total_loss(&bad, &cfg), Err(LossError::NonFinite { term: "pathway", .. })));
    }

    #[test]
    fn default_loss_weights() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda_pathway, cfg.lambda_zero_recon, cfg.lambda_z), (0.5, 0.01, 0.01));
    }
}
