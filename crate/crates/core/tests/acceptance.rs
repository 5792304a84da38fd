//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2 and 6 are exact and make the run fail. Criteria 3-5 depend
//! on a desk-scale training run; their lines are reported without affecting
//! the exit status. The trained model is cached under `$UNMIX_AE_CACHE` (or
//! the cargo target tmp dir) and reused while the configuration is unchanged.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use unmix_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use unmix_core::datagen::{generate_dataset_with, DatasetSplit, MixingConfig};
use unmix_core::eval::{best_assignment, evaluate, EvalReport};
use unmix_core::gradcheck::{gradcheck, TermStatus, GRADCHECK_TOLERANCE};
use unmix_core::losses::{encoding_l2, partition, pathway_separation, AlphaScheme, LossConfig};
use unmix_core::model::{Model, ModelConfig};
use unmix_core::par::Execution;
use unmix_core::tensor::Tensor;
use unmix_core::train::{fit, FitOptions, TrainConfig};

const DESK_PAIRS: usize = 20_000;
const DESK_EPOCHS: usize = 30;
const DESK_BUDGET_SECONDS: f64 = 2.0 * 3600.0;
const MIXTURE_MAE_MAX: f64 = 0.03;
const SOURCE_MAE_MAX: f64 = 0.08;
const ZERO_OUTPUT_MAX: f64 = 0.05;
const OFF_DIAGONAL_MAX: f64 = 0.25;

struct Report {
    lines: Vec<(bool, bool, String)>,
}

impl Report {
    fn check(&mut self, criterion: &str, pass: bool, gating: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {criterion}: {detail}");
        self.lines.push((pass, gating, criterion.to_string()));
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1(r: &mut Report) {
    let w = [1.0f64, 2.0, 3.0, 4.0];
    let p = partition(2, 2, 1, 2).unwrap();
    let uniform = pathway_separation(&[(&w[..], p)], AlphaScheme::Uniform);
    let positional = pathway_separation(&[(&w[..], p)], AlphaScheme::Positional);
    let diag = pathway_separation(&[(&[1.0f64, 0.0, 0.0, 4.0][..], p)], AlphaScheme::Uniform);
    let l2_zero = encoding_l2(&[Tensor::<f64>::zeros([4, 1, 1, 1]), Tensor::zeros([4, 1, 1, 1])]).unwrap();
    let l2_ones = encoding_l2(&[Tensor::from_vec([4, 1, 1, 1], vec![1.0f64; 4])]).unwrap();
    let l2_half = encoding_l2(&[Tensor::from_vec([4, 1, 1, 1], vec![1.0f64; 4]), Tensor::zeros([4, 1, 1, 1])]).unwrap();
    let pass = uniform == 5.0
        && positional == 4.0
        && diag == 0.0
        && close(l2_zero, 0.0, 1e-12)
        && close(l2_ones, 1.0, 1e-12)
        && close(l2_half, 0.5, 1e-12);
    r.check(
        "1 loss units",
        pass,
        true,
        format!(
            "pathway uniform {uniform} (want 5), positional {positional} (want 4), block-diagonal {diag}; \
             encoding_l2 {l2_zero} / {l2_ones} / {l2_half} (want 0 / 1 / 0.5)"
        ),
    );
}

fn criterion_2(r: &mut Report) -> bool {
    let mut all = true;
    let mut worst = 0.0f64;
    let mut zero_max = 0.0f64;
    for scheme in [AlphaScheme::Uniform, AlphaScheme::Positional] {
        let report = gradcheck(0, &LossConfig { alpha_scheme: scheme, ..Default::default() });
        all &= report.passed;
        for t in &report.terms {
            match t.status {
                TermStatus::Checked { max_rel_error, .. } => worst = worst.max(max_rel_error),
                TermStatus::Skipped => all = false,
            }
        }
        zero_max = zero_max.max(report.zero_recon_encoder_grad_max).max(report.zero_recon_affine_grad_max);
    }
    r.check(
        "2 gradient oracle",
        all,
        true,
        format!(
            "max relative error {worst:.2e} over 4 terms and both alpha schemes (tolerance {GRADCHECK_TOLERANCE:.0e}); \
             zero-recon encoder/affine gradient max {zero_max}"
        ),
    );
    all
}

/// Architecture and schedule of the desk-scale run.
fn desk_setup() -> (ModelConfig, TrainConfig, MixingConfig) {
    let model = ModelConfig {
        num_encoders: 3,
        encoder_channels: vec![8, 16, 32],
        encoding_channels: 8,
        decoder_channels: vec![48, 24, 12],
        ..Default::default()
    };
    let train = TrainConfig { epochs: DESK_EPOCHS, batch_size: 32, lr_step_epochs: 20, seed: 0, ..Default::default() };
    (model, train, MixingConfig::default())
}

#[derive(Serialize, Deserialize, PartialEq)]
struct DeskKey {
    pairs: usize,
    model: ModelConfig,
    train: TrainConfig,
    mixing: MixingConfig,
}

#[derive(Serialize, Deserialize)]
struct DeskRun {
    key: DeskKey,
    train_seconds: f64,
    best_epoch: Option<usize>,
}

fn cache_root() -> PathBuf {
    std::env::var_os("UNMIX_AE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")))
        .join("acceptance-desk")
}

/// Train the desk-scale model, or reuse a cached run with the same setup.
fn desk_model(data: &DatasetSplit) -> (Model<f32>, DeskRun) {
    let (model_cfg, train_cfg, mixing) = desk_setup();
    let key = DeskKey { pairs: DESK_PAIRS, model: model_cfg.clone(), train: train_cfg.clone(), mixing };
    let root = cache_root();
    let meta = root.join("run.json");
    if let Ok(text) = std::fs::read_to_string(&meta) {
        if let Ok(run) = serde_json::from_str::<DeskRun>(&text) {
            if run.key == key {
                if let Ok((m, _)) = load_checkpoint_for(&root.join("best"), &model_cfg) {
                    println!("     using cached desk-scale model from {}", root.display());
                    return (m, run);
                }
            }
        }
    }
    println!("     training desk-scale model ({} pairs, {} epochs) into {}", DESK_PAIRS, DESK_EPOCHS, root.display());
    let _ = std::fs::remove_dir_all(&root);
    let mut model = Model::<f32>::build(&model_cfg, train_cfg.seed).unwrap();
    let started = Instant::now();
    let opts = FitOptions { out_dir: Some(root.clone()), ..Default::default() };
    let report = fit(&mut model, data, &train_cfg, &opts).expect("desk-scale training runs");
    let run = DeskRun { key, train_seconds: started.elapsed().as_secs_f64(), best_epoch: report.best_epoch };
    std::fs::write(&meta, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    (model, run)
}

fn criteria_3_to_5(r: &mut Report) {
    let (_, _, mixing) = desk_setup();
    let data = generate_dataset_with(DESK_PAIRS, 64, &mixing, 0.8, Execution::default()).unwrap();
    let (model, run) = desk_model(&data);
    let eval: EvalReport = evaluate(&model, &data.test, 64, Execution::default()).unwrap();
    let _ = std::fs::write(cache_root().join("eval.json"), serde_json::to_string_pretty(&eval).unwrap());

    let dead_count = eval.dead.iter().filter(|&&d| d).count();
    let pass3 = eval.mixture_mae <= MIXTURE_MAE_MAX
        && eval.source_mae.iter().all(|&m| m <= SOURCE_MAE_MAX)
        && dead_count == 1
        && run.train_seconds <= DESK_BUDGET_SECONDS;
    r.check(
        "3 desk-scale reproduction",
        pass3,
        false,
        format!(
            "mixture MAE {:.4} (<= {MIXTURE_MAE_MAX}), triangle {:.4} / circle {:.4} (<= {SOURCE_MAE_MAX}), \
             dead flags {:?} (scores {:.4?}), trained in {:.0}s (<= {DESK_BUDGET_SECONDS:.0}s), best epoch {:?}",
            eval.mixture_mae,
            eval.source_mae[0],
            eval.source_mae[1],
            eval.dead,
            eval.dead_scores,
            run.train_seconds,
            run.best_epoch
        ),
    );
    r.check(
        "4 zero reconstruction",
        eval.zero_output_mean <= ZERO_OUTPUT_MAX,
        false,
        format!("mean |D(0)| = {:.5} (<= {ZERO_OUTPUT_MAX})", eval.zero_output_mean),
    );
    let smallest = eval
        .diagonal_mass
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let dead_index = (dead_count == 1).then(|| eval.dead.iter().position(|&d| d)).flatten();
    let pass5 = eval.off_diagonal_ratio < OFF_DIAGONAL_MAX && dead_index.is_some() && dead_index == smallest;
    r.check(
        "5 weight structure",
        pass5,
        false,
        format!(
            "off/diagonal mass {:.4} (< {OFF_DIAGONAL_MAX}); diagonal mass {:.1?}, smallest pathway {:?}, dead pathway {:?}",
            eval.off_diagonal_ratio, eval.diagonal_mass, smallest, dead_index
        ),
    );
}

fn exhaustive(cost: &[Vec<f64>], truths: usize) -> f64 {
    let e = cost.len();
    let mut best = f64::INFINITY;
    for code in 0..e.pow(truths as u32) {
        let map: Vec<usize> = (0..truths).map(|t| code / e.pow(t as u32) % e).collect();
        let mut seen = vec![false; e];
        if map.iter().all(|&k| !std::mem::replace(&mut seen[k], true)) {
            best = best.min(map.iter().enumerate().map(|(t, &k)| cost[k][t]).sum());
        }
    }
    best
}

fn criterion_6(r: &mut Report) {
    let cfg = MixingConfig { seed: 11, ..Default::default() };
    let a = generate_dataset_with(64, 64, &cfg, 0.8, Execution::Parallel).unwrap();
    let b = generate_dataset_with(64, 64, &cfg, 0.8, Execution::Parallel).unwrap();
    let c = generate_dataset_with(64, 64, &cfg, 0.8, Execution::Sequential).unwrap();
    let bits = |d: &DatasetSplit| -> Vec<u32> {
        d.train.iter().chain(&d.test).flat_map(|s| s.mixture.iter().chain(s.sources.iter().flat_map(|x| &x.pixels))).map(|v| v.to_bits()).collect()
    };
    let generate_ok = bits(&a) == bits(&b) && bits(&a) == bits(&c);

    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::build(&ModelConfig::default(), 4).unwrap();
    save_checkpoint(&model, dir.path(), 7, 4).unwrap();
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    let flat = |m: &Model<f32>| {
        let mut v = Vec::new();
        m.visit(&mut |_, _, p| v.extend(p.value.iter().map(|x| x.to_bits())));
        v
    };
    let checkpoint_ok = flat(&model) == flat(&loaded) && manifest.epoch == 7;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut instances = 0;
    let mut matching_ok = true;
    for _ in 0..2000 {
        let e = rng.gen_range(1..=5);
        let t = rng.gen_range(1..=e);
        let cost: Vec<Vec<f64>> = (0..e).map(|_| (0..t).map(|_| rng.gen::<f64>()).collect()).collect();
        matching_ok &= (best_assignment(&cost, t).unwrap().total - exhaustive(&cost, t)).abs() < 1e-12;
        instances += 1;
    }
    r.check(
        "6 determinism",
        generate_ok && checkpoint_ok && matching_ok,
        true,
        format!(
            "generate bit-identical across runs and execution modes: {generate_ok}; checkpoint round trip bit-exact: {checkpoint_ok}; \
             assignment equals exhaustive oracle on {instances} random instances (N <= 5): {matching_ok}"
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { lines: Vec::new() };
    criterion_1(&mut r);
    let positional_grad = criterion_2(&mut r);
    if std::env::var_os("UNMIX_AE_SKIP_DESK").is_some() {
        println!("SKIP 3-5 desk-scale run: UNMIX_AE_SKIP_DESK is set");
    } else {
        criteria_3_to_5(&mut r);
    }
    criterion_6(&mut r);
    let covered = r.lines.iter().filter(|(_, _, c)| c.starts_with('1') || c.starts_with('2')).all(|(p, ..)| *p);
    r.check(
        "7 biosignal results out of scope",
        covered && positional_grad,
        true,
        "restricted polysomnography data is not shipped; the positional alpha scheme is covered by criteria 1 and 2".into(),
    );
    let failed_gating = r.lines.iter().any(|(p, g, _)| *g && !*p);
    let failed: Vec<&str> = r.lines.iter().filter(|(p, ..)| !*p).map(|(_, _, c)| c.as_str()).collect();
    println!("summary: {} of {} criteria pass; failing: {:?}", r.lines.len() - failed.len(), r.lines.len(), failed);
    if failed_gating {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
