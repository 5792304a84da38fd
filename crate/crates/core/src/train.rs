//! Mini-batch training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint_for, save_checkpoint, CheckpointError};
use crate::datagen::{sample_seed, DatasetSplit, MixtureSample};
use crate::losses::{
    bce_with_logits, encoding_l2_grad, model_pathway_separation, model_pathway_separation_grad, total_loss,
    zero_reconstruction, zero_reconstruction_grad, AlphaScheme, LossConfig, LossError, LossParts,
};
use crate::model::{concat_encodings, sigmoid, Model, ModelError};
use crate::nn::Mode;
use crate::optim::{step_lr, Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {term} loss is {value}")]
    Divergence { epoch: usize, batch: usize, term: &'static str, value: f64 },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("cannot write {path}")]
    Log { path: String, source: csv::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between learning-rate decays.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub global_weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_step_epochs: 50,
            lr_gamma: 0.1,
            global_weight_decay: 1e-5,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Setup(m));
        if self.batch_size < 2 {
            return err(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.lr_step_epochs == 0 {
            return err("epochs and lr_step_epochs must be positive".into());
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return err(format!("lr_gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if !(self.global_weight_decay >= 0.0 && self.global_weight_decay.is_finite()) {
            return err(format!("weight decay must be non-negative, got {}", self.global_weight_decay));
        }
        let l = &self.loss;
        if [l.lambda_pathway, l.lambda_zero_recon, l.lambda_z].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Loss terms in the order used for weights and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Reconstruction,
    Pathway,
    ZeroReconstruction,
    Encoding,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Reconstruction, Term::Pathway, Term::ZeroReconstruction, Term::Encoding];

    pub fn name(self) -> &'static str {
        match self {
            Term::Reconstruction => "reconstruction",
            Term::Pathway => "pathway",
            Term::ZeroReconstruction => "zero_reconstruction",
            Term::Encoding => "encoding",
        }
    }

    pub fn get(self, parts: &LossParts) -> f64 {
        match self {
            Term::Reconstruction => parts.reconstruction,
            Term::Pathway => parts.pathway,
            Term::ZeroReconstruction => parts.zero_reconstruction,
            Term::Encoding => parts.encoding,
        }
    }
}

/// Per-term gradient multipliers, indexed like [`Term::ALL`].
pub fn term_weights(cfg: &LossConfig) -> [f64; 4] {
    [1.0, cfg.lambda_pathway, cfg.lambda_zero_recon, cfg.lambda_z]
}

/// Zero the gradients, then accumulate `sum_k weights[k] * dL_k/dθ` for a
/// training-mode pass on `x` (which doubles as the reconstruction target).
/// Terms with zero weight are evaluated but not backpropagated.
pub fn compute_gradients<T: Real>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    scheme: AlphaScheme,
    weights: [f64; 4],
) -> Result<LossParts, TrainError> {
    model.zero_grad();
    let [w_rec, w_path, w_zero, w_enc] = weights;
    let pass = model.forward_pass(x, Mode::Train)?;
    let (reconstruction, mut d_logits) = bce_with_logits(pass.logits(), x);
    let codes: Vec<Tensor<T>> = pass.codes().into_iter().cloned().collect();
    let (encoding, d_codes) = encoding_l2_grad(&codes, w_enc)?;
    let k = T::from_f64_lossy(w_rec);
    d_logits.data_mut().iter_mut().for_each(|g| *g *= k);
    let d_logits = (w_rec != 0.0).then_some(d_logits);
    let d_codes = (w_enc != 0.0).then_some(d_codes);
    if d_logits.is_some() || d_codes.is_some() {
        model.backward_pass(&pass, d_logits, d_codes);
    }
    drop(pass);
    let pathway = if w_path != 0.0 {
        model_pathway_separation_grad(model, scheme, w_path)?
    } else {
        model_pathway_separation(model, scheme)?
    };
    let zero_reconstruction =
        if w_zero != 0.0 { zero_reconstruction_grad(model, w_zero) } else { zero_reconstruction(model) };
    Ok(LossParts { reconstruction, pathway, zero_reconstruction, encoding })
}

/// Stack the mixtures of `samples` into a `(1, B, H, W)` tensor.
pub fn mixture_batch<T: Real>(samples: &[&MixtureSample], size: usize) -> Tensor<T> {
    let rows: Vec<Vec<T>> =
        samples.iter().map(|s| s.mixture.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()).collect();
    Tensor::from_samples(&rows, 1, size, size)
}

/// Inference-mode mean BCE and mean absolute reconstruction error.
pub fn validate(model: &Model<f32>, samples: &[MixtureSample], size: usize, batch: usize) -> Result<(f64, f64), TrainError> {
    let (mut bce, mut mae, mut count) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&MixtureSample> = chunk.iter().collect();
        let x = mixture_batch::<f32>(&refs, size);
        let logits = model.decode_logits(&concat_encodings(&model.encode_all(&x)?)?)?;
        let x_hat = sigmoid(&logits);
        let (b, _) = bce_with_logits(&logits, &x);
        bce += b * x.len() as f64;
        mae += x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        count += x.len();
    }
    if count == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((bce / count as f64, mae / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub reconstruction: f64,
    pub pathway: f64,
    pub zero_reconstruction: f64,
    pub encoding: f64,
    pub total: f64,
    pub val_reconstruction: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_reconstruction: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `best/`, `last/` checkpoints and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// First epoch to run when resuming; `TrainConfig::epochs` stays the total.
    pub start_epoch: usize,
    /// Keep the final weights instead of restoring the best validation epoch.
    pub keep_last: bool,
}

/// Rows of an earlier run before `before`; a missing or unreadable log gives none.
fn read_log(path: &Path, before: usize) -> Vec<EpochRecord> {
    let Ok(mut r) = csv::Reader::from_path(path) else { return Vec::new() };
    r.deserialize::<EpochRecord>().map_while(Result::ok).filter(|e| e.epoch < before).collect()
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<(), TrainError> {
    let to_err = |source| TrainError::Log { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in records {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| to_err(e.into()))
}

/// Train on `data.train`, validating on `data.test` after every epoch.
///
/// The model ends up holding the weights of the epoch with the lowest
/// validation reconstruction loss unless `keep_last` is set.
pub fn fit(model: &mut Model<f32>, data: &DatasetSplit, cfg: &TrainConfig, opts: &FitOptions) -> Result<TrainReport, TrainError> {
    fit_with(model, data, cfg, opts, &mut |_, _| {})
}

/// [`fit`] with a hook called after every epoch with its record and the
/// current weights.
pub fn fit_with(
    model: &mut Model<f32>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    opts: &FitOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model<f32>),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(TrainError::Setup(format!("need at least 2 training samples, got {}", data.train.len())));
    }
    let [_, h, w] = [model.config.input_channels, model.config.input_size[0], model.config.input_size[1]];
    if h != data.image_size || w != data.image_size {
        return Err(TrainError::Setup(format!(
            "dataset images are {0}x{0} but the model expects {h}x{w}",
            data.image_size
        )));
    }
    let size = data.image_size;
    let weights = term_weights(&cfg.loss);
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.global_weight_decay, ..Default::default() });
    let started = Instant::now();
    let mut records = match &opts.out_dir {
        Some(dir) if opts.start_epoch > 0 => read_log(&dir.join("train_log.csv"), opts.start_epoch),
        _ => Vec::new(),
    };
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let prior = records
        .iter()
        .filter(|r| r.val_reconstruction.is_finite())
        .min_by(|a, b| a.val_reconstruction.total_cmp(&b.val_reconstruction))
        .map(|r| (r.epoch, r.val_reconstruction));
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in opts.start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let lr = step_lr(cfg.learning_rate, epoch, cfg.lr_step_epochs, cfg.lr_gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&MixtureSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let x = mixture_batch::<f32>(&refs, size);
            let parts = compute_gradients(model, &x, cfg.loss.alpha_scheme, weights)?;
            let total = total_loss(&parts, &cfg.loss).map_err(|e| match e {
                LossError::NonFinite { term, value } => TrainError::Divergence { epoch, batch: b, term, value },
                other => other.into(),
            })?;
            opt.step(model, lr);
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.reconstruction, parts.pathway, parts.zero_reconstruction, parts.encoding, total]) {
                *s += v * n;
            }
            seen += chunk.len();
        }
        let mean = |k: usize| sums[k] / seen.max(1) as f64;
        let (val_reconstruction, val_mae) = validate(model, &data.test, size, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            reconstruction: mean(0),
            pathway: mean(1),
            zero_reconstruction: mean(2),
            encoding: mean(3),
            total: mean(4),
            val_reconstruction,
            val_mae,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (recon {:.5}, pathway {:.5}, zero {:.5}, z {:.5}) val recon {:.5} val mae {:.5} [{:.1}s]",
            record.total,
            record.reconstruction,
            record.pathway,
            record.zero_reconstruction,
            record.encoding,
            val_reconstruction,
            val_mae,
            record.seconds
        );
        on_epoch(&record, model);
        records.push(record);
        let to_beat = best.as_ref().map(|(_, v, _)| *v).or(prior.map(|(_, v)| v));
        let improved = val_reconstruction.is_finite() && to_beat.map_or(true, |v| val_reconstruction < v);
        if improved {
            best = Some((epoch, val_reconstruction, model.clone()));
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(model, &dir.join("last"), epoch, cfg.seed)?;
            if improved {
                save_checkpoint(model, &dir.join("best"), epoch, cfg.seed)?;
            }
            write_log(&dir.join("train_log.csv"), &records)?;
        }
    }

    let (best_epoch, best_val) = match best {
        Some((e, v, m)) => {
            if !opts.keep_last {
                *model = m;
            }
            (Some(e), Some(v))
        }
        None => match (prior, &opts.out_dir) {
            (Some((e, v)), Some(dir)) => {
                if !opts.keep_last {
                    *model = load_checkpoint_for(&dir.join("best"), &model.config)?.0;
                }
                (Some(e), Some(v))
            }
            _ => (None, None),
        },
    };
    Ok(TrainReport { epochs: records, best_epoch, best_val_reconstruction: best_val, seconds: started.elapsed().as_secs_f64() })
}
