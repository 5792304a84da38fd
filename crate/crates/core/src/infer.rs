//! Source estimation by encoding masking.
//!
//! All codes except the active one are replaced by zeros in place, and the
//! decoder maps the masked concatenation to a single-source estimate.

use thiserror::Error;

use crate::losses::decoder_partitions;
use crate::model::{concat_encodings, Model, ModelError};
use crate::par::{self, Execution};
use crate::tensor::{Real, Tensor};

/// An encoder counts as dead when its score is below this fraction of the
/// mean score of the other encoders.
pub const DEAD_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("crop margin {margin} too large for extent {extent}")]
    Crop { margin: usize, extent: usize },
    #[error("no samples given")]
    Empty,
}

/// Decoded output with a single active encoding, shape `(C, B, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceEstimate<T> {
    pub encoder_index: usize,
    pub estimate: Tensor<T>,
    pub crop_margin: usize,
}

/// Codes with every encoding except `active` zeroed (`None` masks all).
pub fn mask_codes<T: Real>(codes: &[Tensor<T>], active: Option<usize>) -> Result<Tensor<T>, ModelError> {
    let masked: Vec<Tensor<T>> = codes
        .iter()
        .enumerate()
        .map(|(k, z)| if Some(k) == active { z.clone() } else { Tensor::zeros(z.shape()) })
        .collect();
    concat_encodings(&masked)
}

fn check_index<T: Real>(m: &Model<T>, n: usize) -> Result<(), ModelError> {
    if n >= m.num_encoders() {
        return Err(ModelError::EncoderIndex { index: n, count: m.num_encoders() });
    }
    Ok(())
}

pub fn mask_and_decode<T: Real>(m: &Model<T>, x: &Tensor<T>, n: usize) -> Result<SourceEstimate<T>, InferError> {
    check_index(m, n)?;
    let codes = m.encode_all(x)?;
    let estimate = m.decode(&mask_codes(&codes, Some(n))?)?;
    Ok(SourceEstimate { encoder_index: n, estimate, crop_margin: 0 })
}

/// One estimate per encoder; the input is encoded once.
pub fn estimate_all<T: Real>(m: &Model<T>, x: &Tensor<T>) -> Result<Vec<SourceEstimate<T>>, InferError> {
    estimate_all_with(m, x, Execution::default())
}

pub fn estimate_all_with<T: Real>(m: &Model<T>, x: &Tensor<T>, exec: Execution) -> Result<Vec<SourceEstimate<T>>, InferError> {
    let codes = m.encode_all(x)?;
    par::map_indexed(exec, m.num_encoders(), |n| {
        let estimate = m.decode(&mask_codes(&codes, Some(n))?)?;
        Ok(SourceEstimate { encoder_index: n, estimate, crop_margin: 0 })
    })
    .into_iter()
    .collect()
}

/// Decoder output for an all-zero code, shape `(C, 1, H, W)`.
pub fn zero_output<T: Real>(m: &Model<T>) -> Tensor<T> {
    let [c, h, w] = m.code_shape();
    m.decode(&Tensor::zeros([c, 1, h, w])).expect("code shape matches the decoder")
}

/// Remove `margin` pixels from every spatial edge. Signals with height 1 are
/// cropped along their length only.
pub fn crop<T: Real>(est: &SourceEstimate<T>, margin: usize) -> Result<SourceEstimate<T>, InferError> {
    let [c, b, h, w] = est.estimate.shape();
    let my = if h == 1 { 0 } else { margin };
    for extent in [if h == 1 { w } else { h }, w] {
        if 2 * margin >= extent {
            return Err(InferError::Crop { margin, extent });
        }
    }
    let (nh, nw) = (h - 2 * my, w - 2 * margin);
    let src = est.estimate.data();
    let mut out = Vec::with_capacity(c * b * nh * nw);
    for plane in 0..c * b {
        for y in my..h - my {
            let row = (plane * h + y) * w;
            out.extend_from_slice(&src[row + margin..row + w - margin]);
        }
    }
    Ok(SourceEstimate {
        encoder_index: est.encoder_index,
        estimate: Tensor::from_vec([c, b, nh, nw], out),
        crop_margin: est.crop_margin + margin,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeadEncoderReport {
    /// Mean absolute value of each encoder's masked estimate.
    pub scores: Vec<f64>,
    /// L1 mass of each pathway's diagonal blocks over the decoder hidden layers.
    pub diagonal_mass: Vec<f64>,
    pub dead: Vec<bool>,
}

/// `score[n] < fraction * mean(score[k], k != n)`; never true for one encoder.
pub fn dead_flags(scores: &[f64], fraction: f64) -> Vec<bool> {
    let n = scores.len();
    if n < 2 {
        return vec![false; n];
    }
    let total: f64 = scores.iter().sum();
    scores.iter().map(|&s| s < fraction * (total - s) / (n - 1) as f64).collect()
}

/// Per-pathway diagonal block L1 mass summed over decoder hidden layers.
pub fn diagonal_mass<T: Real>(m: &Model<T>) -> Vec<f64> {
    let n = m.num_encoders();
    let parts = decoder_partitions(m).expect("decoder widths divisible by the encoder count");
    let mut mass = vec![0.0; n];
    for ((param, ..), p) in m.decoder_hidden_weights().into_iter().zip(parts) {
        for (i, slot) in mass.iter_mut().enumerate() {
            *slot += p.indices(i, i).map(|k| param.value[k].to_f64().unwrap().abs()).sum::<f64>();
        }
    }
    mass
}

/// Scores over `x` (any batch size), processed in chunks of `batch`.
pub fn dead_encoder_score<T: Real>(m: &Model<T>, x: &Tensor<T>, batch: usize) -> Result<DeadEncoderReport, InferError> {
    let total = x.batch();
    if total == 0 {
        return Err(InferError::Empty);
    }
    let mut sums = vec![0.0; m.num_encoders()];
    let mut count = 0usize;
    let mut start = 0;
    while start < total {
        let len = batch.max(1).min(total - start);
        for est in estimate_all(m, &x.batch_slice(start, len))? {
            sums[est.encoder_index] += est.estimate.data().iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>();
        }
        count += len * (x.len() / total);
        start += len;
    }
    let scores: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let dead = dead_flags(&scores, DEAD_FRACTION);
    Ok(DeadEncoderReport { scores, diagonal_mass: diagonal_mass(m), dead })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(n: usize) -> ModelConfig {
        ModelConfig {
            num_encoders: n,
            input_size: [16, 16],
            encoder_channels: vec![4, 4],
            encoding_channels: 2,
            decoder_channels: vec![2 * n, 2 * n],
            ..Default::default()
        }
    }

    fn input(b: usize) -> Tensor<f64> {
        Tensor::from_vec([1, b, 16, 16], (0..b * 256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect())
    }

    #[test]
    fn single_encoder_estimate_is_full_reconstruction() {
        let m = Model::<f64>::build(&cfg(1), 0).unwrap();
        let x = input(2);
        let (_, full) = m.forward(&x).unwrap();
        assert_eq!(mask_and_decode(&m, &x, 0).unwrap().estimate, full);
    }

    #[test]
    fn estimates_do_not_sum_to_reconstruction() {
        let m = Model::<f64>::build(&cfg(3), 1).unwrap();
        let x = input(2);
        let (_, full) = m.forward(&x).unwrap();
        let ests = estimate_all(&m, &x).unwrap();
        assert_eq!(ests.len(), 3);
        let sum: Vec<f64> = (0..full.len()).map(|i| ests.iter().map(|e| e.estimate.data()[i]).sum()).collect();
        assert!(sum.iter().zip(full.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn batched_estimates_match_single_sample_calls() {
        let m = Model::<f64>::build(&cfg(2), 2).unwrap();
        let x = input(3);
        let batched = estimate_all(&m, &x).unwrap();
        for b in 0..3 {
            let single = estimate_all(&m, &x.batch_slice(b, 1)).unwrap();
            for (s, full) in single.iter().zip(&batched) {
                let want = full.estimate.sample(b);
                assert!(s.estimate.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        assert_eq!(estimate_all(&m, &x).unwrap(), batched);
    }

    #[test]
    fn all_masked_equals_zero_code_output() {
        let m = Model::<f64>::build(&cfg(2), 3).unwrap();
        let codes = m.encode_all(&input(1)).unwrap();
        let out = m.decode(&mask_codes(&codes, None).unwrap()).unwrap();
        assert_eq!(out, zero_output(&m));
    }

    #[test]
    fn index_out_of_range_is_an_error() {
        let m = Model::<f64>::build(&cfg(2), 0).unwrap();
        assert!(matches!(
            mask_and_decode(&m, &input(1), 2),
            Err(InferError::Model(ModelError::EncoderIndex { index: 2, count: 2 }))
        ));
    }

    #[test]
    fn crop_examples() {
        let est = SourceEstimate { encoder_index: 0, estimate: Tensor::<f32>::zeros([1, 2, 64, 64]), crop_margin: 0 };
        assert_eq!(crop(&est, 0).unwrap(), est);
        let c = crop(&est, 4).unwrap();
        assert_eq!(c.estimate.shape(), [1, 2, 56, 56]);
        assert_eq!(c.crop_margin, 4);
        assert!(crop(&est, 32).is_err());
        let sig = SourceEstimate { encoder_index: 0, estimate: Tensor::<f32>::zeros([1, 1, 1, 100]), crop_margin: 0 };
        assert_eq!(crop(&sig, 10).unwrap().estimate.shape(), [1, 1, 1, 80]);
    }

    #[test]
    fn crop_keeps_the_interior() {
        let data: Vec<f64> = (0..36).map(|v| v as f64).collect();
        let est = SourceEstimate { encoder_index: 1, estimate: Tensor::from_vec([1, 1, 6, 6], data), crop_margin: 0 };
        let c = crop(&est, 2).unwrap();
        assert_eq!(c.estimate.data(), &[14.0, 15.0, 20.0, 21.0]);
    }

    #[test]
    fn dead_flag_examples() {
        assert_eq!(dead_flags(&[0.3, 0.25, 0.01], DEAD_FRACTION), vec![false, false, true]);
        assert_eq!(dead_flags(&[0.3, 0.3, 0.3], DEAD_FRACTION), vec![false; 3]);
        assert_eq!(dead_flags(&[0.0], DEAD_FRACTION), vec![false]);
    }

    #[test]
    fn untrained_model_scores_near_one_half() {
        let m = Model::<f64>::build(&cfg(3), 4).unwrap();
        let r = dead_encoder_score(&m, &input(4), 3).unwrap();
        for s in &r.scores {
            assert!((s - 0.5).abs() < 0.15, "{s}");
        }
        assert_eq!(r.diagonal_mass.len(), 3);
    }

    #[test]
    fn silent_decoder_scores_zero() {
        let mut m = Model::<f64>::build(&cfg(2), 5).unwrap();
        // push the output bias to a large negative value: every output ~ 0
        let last = m.decoder.blocks.len() - 1;
        if let crate::nn::ConvLayer::Up(c) = &mut m.decoder.blocks[last].conv {
            c.bias.as_mut().unwrap().value.iter_mut().for_each(|b| *b = -1e3);
        }
        let r = dead_encoder_score(&m, &input(2), 2).unwrap();
        assert!(r.scores.iter().all(|&s| s == 0.0));
    }
}
