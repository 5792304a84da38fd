//! Finite-difference verification of the analytic loss gradients.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, MixingConfig, MixtureSample};
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamKind;
use crate::tensor::Tensor;
use crate::train::{compute_gradients, mixture_batch, term_weights, Term};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TermStatus {
    Checked { max_rel_error: f64, max_abs_error: f64, checked_params: usize, passed: bool },
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    #[serde(flatten)]
    pub status: TermStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub num_params: usize,
    pub tolerance: f64,
    pub terms: Vec<TermCheck>,
    /// Largest |gradient| of the zero-code term on encoder parameters.
    pub zero_recon_encoder_grad_max: f64,
    /// Largest |gradient| of the zero-code term on normalization scale/shift.
    pub zero_recon_affine_grad_max: f64,
    pub passed: bool,
}

/// Two encoders on 16x16 inputs with a 2x2 code.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        num_encoders: 2,
        input_size: [16, 16],
        encoder_channels: vec![4, 4],
        encoding_channels: 2,
        decoder_channels: vec![4, 4],
        ..Default::default()
    }
}

fn flat_values(m: &Model<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit(&mut |_, _, p| v.extend_from_slice(&p.value));
    v
}

fn flat_grads(m: &Model<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit(&mut |_, _, p| v.extend_from_slice(&p.grad));
    v
}

/// `(is_encoder, kind)` for every scalar parameter in visiting order.
fn param_tags(m: &Model<f64>) -> Vec<(bool, ParamKind)> {
    let mut v = Vec::new();
    m.visit(&mut |name, kind, p| v.extend(std::iter::repeat((name.starts_with("encoder."), kind)).take(p.value.len())));
    v
}

fn set_param(m: &mut Model<f64>, index: usize, value: f64) {
    let mut offset = 0;
    m.visit_mut(&mut |_, _, p| {
        if index >= offset && index < offset + p.value.len() {
            p.value[index - offset] = value;
        }
        offset += p.value.len();
    });
}

fn term_value(m: &mut Model<f64>, x: &Tensor<f64>, loss: &LossConfig, term: Term) -> f64 {
    let parts = compute_gradients(m, x, loss.alpha_scheme, [0.0; 4]).expect("tiny model evaluates");
    term.get(&parts)
}

/// Compare analytic and central-difference gradients of every loss term on a
/// freshly initialized 64-bit model. Terms whose weight in `loss` is zero are
/// skipped. For the zero-code term, encoder and normalization scale/shift
/// parameters are excluded from the comparison because their gradient is
/// zero by construction; those are reported separately.
pub fn gradcheck(seed: u64, loss: &LossConfig) -> GradcheckReport {
    let cfg = gradcheck_model_config();
    let mut model = Model::<f64>::build(&cfg, seed).expect("valid tiny config");
    let data = generate_dataset(4, cfg.input_size[1], &MixingConfig { seed, ..Default::default() }, 0.5)
        .expect("valid tiny dataset");
    let samples: Vec<&MixtureSample> = data.train.iter().chain(&data.test).collect();
    let x = mixture_batch::<f64>(&samples, cfg.input_size[1]);
    let tags = param_tags(&model);
    let base = flat_values(&model);
    let weights = term_weights(loss);

    let mut terms = Vec::new();
    let mut zero_enc = 0.0f64;
    let mut zero_affine = 0.0f64;
    for (k, term) in Term::ALL.into_iter().enumerate() {
        if weights[k] == 0.0 {
            terms.push(TermCheck { term: term.name().into(), status: TermStatus::Skipped });
            continue;
        }
        let mut one_hot = [0.0; 4];
        one_hot[k] = 1.0;
        compute_gradients(&mut model, &x, loss.alpha_scheme, one_hot).expect("tiny model evaluates");
        let analytic = flat_grads(&model);
        if term == Term::ZeroReconstruction {
            for (g, (enc, kind)) in analytic.iter().zip(&tags) {
                if *enc {
                    zero_enc = zero_enc.max(g.abs());
                }
                if *kind == ParamKind::NormAffine {
                    zero_affine = zero_affine.max(g.abs());
                }
            }
        }
        let (mut max_diff, mut max_mag, mut checked) = (0.0f64, 0.0f64, 0usize);
        for i in 0..base.len() {
            let (enc, kind) = tags[i];
            if term == Term::ZeroReconstruction && (enc || kind == ParamKind::NormAffine) {
                continue;
            }
            set_param(&mut model, i, base[i] + STEP);
            let plus = term_value(&mut model, &x, loss, term);
            set_param(&mut model, i, base[i] - STEP);
            let minus = term_value(&mut model, &x, loss, term);
            set_param(&mut model, i, base[i]);
            let numeric = (plus - minus) / (2.0 * STEP);
            max_diff = max_diff.max((numeric - analytic[i]).abs());
            max_mag = max_mag.max(numeric.abs()).max(analytic[i].abs());
            checked += 1;
        }
        let rel = if max_mag > 0.0 { max_diff / max_mag } else { 0.0 };
        terms.push(TermCheck {
            term: term.name().into(),
            status: TermStatus::Checked {
                max_rel_error: rel,
                max_abs_error: max_diff,
                checked_params: checked,
                passed: rel < GRADCHECK_TOLERANCE,
            },
        });
    }
    let passed = terms.iter().all(|t| !matches!(t.status, TermStatus::Checked { passed: false, .. }))
        && zero_enc == 0.0
        && zero_affine == 0.0;
    GradcheckReport {
        seed,
        num_params: base.len(),
        tolerance: GRADCHECK_TOLERANCE,
        terms,
        zero_recon_encoder_grad_max: zero_enc,
        zero_recon_affine_grad_max: zero_affine,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_terms_are_skipped() {
        let loss = LossConfig { lambda_pathway: 0.0, lambda_zero_recon: 0.0, lambda_z: 0.0, ..Default::default() };
        let report = gradcheck(1, &loss);
        assert!(report.num_params <= 10_000);
        let statuses: Vec<bool> = report.terms.iter().map(|t| t.status == TermStatus::Skipped).collect();
        assert_eq!(statuses, vec![false, true, true, true]);
        assert!(report.passed, "{report:?}");
    }
}
