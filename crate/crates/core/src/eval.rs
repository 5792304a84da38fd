//! Evaluation against ground-truth sources and decoder weight structure.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::MixtureSample;
use crate::infer::{dead_flags, diagonal_mass, estimate_all_with, zero_output, InferError, DEAD_FRACTION};
use crate::losses::decoder_partitions;
use crate::model::{Model, ModelError};
use crate::par::{self, Execution};
use crate::tensor::Real;
use crate::train::mixture_batch;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0} vs {1} elements")]
    Shape(usize, usize),
    #[error("{estimates} estimates cannot cover {truths} sources")]
    TooFewEstimates { estimates: usize, truths: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub fn mae(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64)
}

/// Optimal injective assignment of truths to estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `truth_to_estimate[t]` is the estimate assigned to truth `t`.
    pub truth_to_estimate: Vec<usize>,
    /// Cost of each matched pair, indexed by truth.
    pub costs: Vec<f64>,
    pub total: f64,
}

impl Matching {
    /// Inverse view: for every estimate, the truth it was matched to.
    pub fn estimate_to_truth(&self, estimates: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; estimates];
        for (t, &e) in self.truth_to_estimate.iter().enumerate() {
            out[e] = Some(t);
        }
        out
    }
}

/// Minimize the summed cost over all injective truth -> estimate maps by
/// depth-first enumeration. `cost[e][t]` is the cost of pairing estimate `e`
/// with truth `t`.
pub fn best_assignment(cost: &[Vec<f64>], truths: usize) -> Result<Matching, EvalError> {
    let estimates = cost.len();
    if estimates < truths {
        return Err(EvalError::TooFewEstimates { estimates, truths });
    }
    fn search(
        t: usize,
        cost: &[Vec<f64>],
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let truths = current.capacity();
        if t == truths {
            if best.as_ref().map_or(true, |(b, _)| acc < *b) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        for e in 0..cost.len() {
            if !used[e] {
                used[e] = true;
                current.push(e);
                search(t + 1, cost, used, current, acc + cost[e][t], best);
                current.pop();
                used[e] = false;
            }
        }
    }
    let mut best = None;
    search(0, cost, &mut vec![false; estimates], &mut Vec::with_capacity(truths), 0.0, &mut best);
    let (total, truth_to_estimate) = best.expect("at least one assignment exists");
    let costs = truth_to_estimate.iter().enumerate().map(|(t, &e)| cost[e][t]).collect();
    Ok(Matching { truth_to_estimate, costs, total })
}

/// Match estimates to truths by mean absolute error.
pub fn match_sources(estimates: &[&[f32]], truths: &[&[f32]]) -> Result<Matching, EvalError> {
    if estimates.len() < truths.len() {
        return Err(EvalError::TooFewEstimates { estimates: estimates.len(), truths: truths.len() });
    }
    let cost = estimates
        .iter()
        .map(|e| truths.iter().map(|t| mae(e, t)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    best_assignment(&cost, truths.len())
}

/// Per decoder hidden layer, the `N x N` matrix of block L1 masses with
/// kernel taps summed: entry `(i, j)` couples input block `i` to output block `j`.
pub fn weight_mass<T: Real>(m: &Model<T>) -> Vec<Vec<Vec<f64>>> {
    let parts = decoder_partitions(m).expect("decoder widths divisible by the encoder count");
    m.decoder_hidden_weights()
        .into_iter()
        .zip(parts)
        .map(|((param, ..), p)| {
            (0..p.n)
                .map(|i| (0..p.n).map(|j| p.indices(i, j).map(|k| param.value[k].to_f64().unwrap().abs()).sum()).collect())
                .collect()
        })
        .collect()
}

/// Summed off-diagonal mass over summed diagonal mass across layers.
pub fn off_diagonal_ratio(mass: &[Vec<Vec<f64>>]) -> f64 {
    let (mut diag, mut off) = (0.0, 0.0);
    for layer in mass {
        for (i, row) in layer.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
    }
    off / diag
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub source_names: Vec<String>,
    /// Source index matched to each encoder (`None` when unassigned).
    pub permutation: Vec<Option<usize>>,
    /// MAE of the matched estimate for each source.
    pub source_mae: Vec<f64>,
    /// Mean MAE of every (encoder, source) pair.
    pub pair_mae: Vec<Vec<f64>>,
    pub mixture_mae: f64,
    pub dead_scores: Vec<f64>,
    pub dead: Vec<bool>,
    pub diagonal_mass: Vec<f64>,
    pub zero_output_mean: f64,
    pub weight_mass: Vec<Vec<Vec<f64>>>,
    pub off_diagonal_ratio: f64,
}

#[derive(Clone, Debug, Default)]
struct Sums {
    pair: Vec<Vec<f64>>,
    abs: Vec<f64>,
    mixture: f64,
    pixels: usize,
}

impl Sums {
    fn merge(mut self, other: Sums) -> Sums {
        if self.pair.is_empty() {
            return other;
        }
        for (a, b) in self.pair.iter_mut().zip(&other.pair) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.abs.iter_mut().zip(&other.abs).for_each(|(x, y)| *x += y);
        self.mixture += other.mixture;
        self.pixels += other.pixels;
        self
    }
}

/// Evaluate on `samples` in chunks of `batch`; chunks run in parallel under
/// [`Execution::Parallel`]. A single encoder to source assignment is chosen
/// for the whole set from the mean pairwise MAE.
pub fn evaluate(m: &Model<f32>, samples: &[MixtureSample], batch: usize, exec: Execution) -> Result<EvalReport, EvalError> {
    let first = samples.first().ok_or(EvalError::Empty)?;
    let size = first.sources[0].size;
    let n = m.num_encoders();
    let truths = first.sources.len();
    let chunks: Vec<&[MixtureSample]> = samples.chunks(batch.max(1)).collect();
    let partial = par::map_indexed(exec, chunks.len(), |c| -> Result<Sums, EvalError> {
        let chunk = chunks[c];
        let refs: Vec<&MixtureSample> = chunk.iter().collect();
        let x = mixture_batch::<f32>(&refs, size);
        let (_, x_hat) = m.forward(&x)?;
        let ests = estimate_all_with(m, &x, Execution::Sequential)?;
        let plane = size * size;
        let mut s = Sums { pair: vec![vec![0.0; truths]; n], abs: vec![0.0; n], mixture: 0.0, pixels: chunk.len() * plane };
        for (b, sample) in chunk.iter().enumerate() {
            s.mixture += mae(&x_hat.data()[b * plane..(b + 1) * plane], &sample.mixture)? * plane as f64;
            for (e, est) in ests.iter().enumerate() {
                let img = &est.estimate.data()[b * plane..(b + 1) * plane];
                s.abs[e] += img.iter().map(|v| v.abs() as f64).sum::<f64>();
                for (t, src) in sample.sources.iter().enumerate() {
                    s.pair[e][t] += mae(img, &src.pixels)? * plane as f64;
                }
            }
        }
        Ok(s)
    });
    let mut sums = Sums::default();
    for p in partial {
        sums = sums.merge(p?);
    }
    let px = sums.pixels as f64;
    let pair_mae: Vec<Vec<f64>> = sums.pair.iter().map(|row| row.iter().map(|v| v / px).collect()).collect();
    let matching = best_assignment(&pair_mae, truths)?;
    let dead_scores: Vec<f64> = sums.abs.iter().map(|v| v / px).collect();
    let mass = weight_mass(m);
    let zero = zero_output(m);
    Ok(EvalReport {
        num_samples: samples.len(),
        source_names: first.sources.iter().map(|s| format!("{:?}", s.role).to_lowercase()).collect(),
        permutation: matching.estimate_to_truth(n),
        source_mae: matching.costs.clone(),
        pair_mae,
        mixture_mae: sums.mixture / px,
        dead: dead_flags(&dead_scores, DEAD_FRACTION),
        dead_scores,
        diagonal_mass: diagonal_mass(m),
        zero_output_mean: zero.data().iter().map(|v| v.abs() as f64).sum::<f64>() / zero.len() as f64,
        off_diagonal_ratio: off_diagonal_ratio(&mass),
        weight_mass: mass,
    })
}

/// Write a grayscale PNG of a row-major grid; values are clamped to [0, 1].
pub fn save_png(values: &[f32], width: usize, height: usize, path: &Path) -> Result<(), EvalError> {
    let pixels: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels).ok_or(EvalError::Shape(values.len(), width * height))?;
    img.save(path)?;
    Ok(())
}

/// `layer_{k}.csv` (N rows of N masses) and `layer_{k}.png` (mass scaled by
/// the layer maximum, each block drawn as a square of `cell` pixels).
pub fn export_weight_mass(mass: &[Vec<Vec<f64>>], dir: &Path, cell: usize) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| EvalError::Io { path: p, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (k, layer) in mass.iter().enumerate() {
        let csv: String = layer
            .iter()
            .map(|row| row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        let path = dir.join(format!("layer_{k}.csv"));
        fs::write(&path, csv).map_err(io(&path))?;
        let n = layer.len();
        let max = layer.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let side = n * cell;
        let mut px = vec![0.0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                px[y * side + x] = if max > 0.0 { (layer[y / cell][x / cell] / max) as f32 } else { 0.0 };
            }
        }
        save_png(&px, side, side, &dir.join(format!("layer_{k}.png")))?;
    }
    Ok(())
}
