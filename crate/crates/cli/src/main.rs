//! `unmix-ae`: generate toy mixtures, train, separate, evaluate, export
//! decoder weight structure and check gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use unmix_core::checkpoint::{load_checkpoint, CheckpointError};
use unmix_core::config::{ConfigError, RunConfig};
use unmix_core::datagen::{
    generate_dataset_with, load_dataset, save_dataset, write_f32, DataError, DatasetSplit, MixtureSample,
    DATASET_MANIFEST,
};
use unmix_core::eval::{evaluate, export_weight_mass, save_png, weight_mass};
use unmix_core::gradcheck::gradcheck;
use unmix_core::infer::{crop, estimate_all, SourceEstimate};
use unmix_core::model::Model;
use unmix_core::par::Execution;
use unmix_core::train::{fit, mixture_batch, FitOptions, TrainError};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

pub const CACHE_ENV: &str = "UNMIX_AE_CACHE";

#[derive(Parser)]
#[command(name = "unmix-ae", version, about = "Blind source separation with multi-encoder autoencoders")]
struct Cli {
    /// Seed overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a triangles & circles dataset.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Write per-encoder source estimates for a dataset split.
    Separate(SeparateArgs),
    /// Score a checkpoint against the held-out split.
    Evaluate(EvaluateArgs),
    /// Write decoder block mass matrices as CSV and PNG.
    ExportWeights(ExportArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of mixture pairs.
    #[arg(long)]
    n: Option<usize>,
    /// Output image side length.
    #[arg(long)]
    size: Option<usize>,
    /// Sigmoid sharpness of the mixing system.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of samples in the training split.
    #[arg(long)]
    split: Option<f64>,
    /// Output directory; defaults to a keyed directory under $UNMIX_AE_CACHE.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Keep the final weights in report metrics instead of the best epoch.
    #[arg(long)]
    keep_last: bool,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Encoder index or `all`.
    #[arg(long, default_value = "all")]
    encoder: String,
    #[arg(long, default_value_t = 0)]
    crop: usize,
    #[arg(long)]
    out: PathBuf,
    /// Split to separate: `test` or `train`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also render the first N estimates as PNG.
    #[arg(long, default_value_t = 0)]
    png: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pixels per block in the PNG heatmaps.
    #[arg(long, default_value_t = 32)]
    cell: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Loss weights and alpha scheme are read from here; others are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exec() -> Execution {
    Execution::default()
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Accept either a checkpoint directory or its manifest file.
fn checkpoint_dir(path: &Path) -> &Path {
    if path.is_file() {
        path.parent().unwrap_or(path)
    } else {
        path
    }
}

fn cache_dir_for(cfg: &RunConfig) -> Result<PathBuf> {
    let root = std::env::var_os(CACHE_ENV).map(PathBuf::from).context(format!("--out not given and {CACHE_ENV} is unset"))?;
    let d = &cfg.data;
    Ok(root.join(format!(
        "tricirc-n{}-s{}-a{}-f{}-split{}-seed{}",
        d.n_pairs, d.image_size, cfg.mixing.alpha, cfg.mixing.flip_probability, d.split_fraction, cfg.seed
    )))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), cli.seed)?;
    if let Some(n) = args.n {
        cfg.data.n_pairs = n;
    }
    if let Some(s) = args.size {
        cfg.data.image_size = s;
    }
    if let Some(a) = args.alpha {
        cfg.mixing.alpha = a;
    }
    if let Some(f) = args.split {
        cfg.data.split_fraction = f;
    }
    cfg.validate()?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => cache_dir_for(&cfg)?,
    };
    if args.out.is_none() && out.join(DATASET_MANIFEST).exists() {
        log::info!("reusing cached dataset at {}", out.display());
        println!("{}", out.display());
        return Ok(());
    }
    let data = generate_dataset_with(cfg.data.n_pairs, cfg.data.image_size, &cfg.mixing, cfg.data.split_fraction, exec())?;
    save_dataset(&data, &out)?;
    log::info!("wrote {} train and {} test pairs to {}", data.train.len(), data.test.len(), out.display());
    println!("{}", out.display());
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), cli.seed)?;
    let data_dir = args.data.clone().or(cfg.paths.data_dir.clone()).context("no dataset: pass --data or set data_dir")?;
    let out = args.out.clone().or(cfg.paths.out_dir.clone()).context("no output directory: pass --out or set out_dir")?;
    cfg.paths = unmix_core::config::Paths { data_dir: Some(data_dir.clone()), out_dir: Some(out.clone()) };
    let data = load_dataset(&data_dir)?;
    if data.image_size != cfg.model.input_size[1] || data.image_size != cfg.model.input_size[0] {
        return Err(ConfigError::Invalid(format!(
            "dataset images are {0}x{0} but the model input is {1:?}",
            data.image_size, cfg.model.input_size
        ))
        .into());
    }
    let (mut model, start_epoch) = match &args.resume {
        Some(p) => {
            let (m, manifest) = unmix_core::checkpoint::load_checkpoint_for(checkpoint_dir(p), &cfg.model)?;
            (m, manifest.epoch + 1)
        }
        None => (Model::<f32>::build(&cfg.model, cfg.seed)?, 0),
    };
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    log::info!("training {} parameters on {} samples", model.num_params(), data.train.len());
    let opts = FitOptions { out_dir: Some(out.clone()), start_epoch, keep_last: args.keep_last };
    let report = fit(&mut model, &data, &cfg.train, &opts)?;
    write_json(&out.join("train_report.json"), &report)?;
    println!(
        "{}",
        json!({
            "epochs": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_val_reconstruction": report.best_val_reconstruction,
            "seconds": report.seconds,
            "checkpoint": out.join("best"),
        })
    );
    Ok(())
}

fn split_samples<'a>(data: &'a DatasetSplit, split: &str) -> Result<&'a [MixtureSample]> {
    match split {
        "test" => Ok(&data.test),
        "train" => Ok(&data.train),
        other => Err(ConfigError::Invalid(format!("split must be train or test, got {other:?}")).into()),
    }
}

fn separate(args: &SeparateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint_dir(&args.ckpt))?;
    let data = load_dataset(&args.data)?;
    let samples = split_samples(&data, &args.split)?;
    let n = model.num_encoders();
    let encoders: Vec<usize> = if args.encoder == "all" {
        (0..n).collect()
    } else {
        let k: usize = args.encoder.parse().map_err(|_| ConfigError::Invalid(format!("bad encoder index {:?}", args.encoder)))?;
        if k >= n {
            return Err(ConfigError::Invalid(format!("encoder {k} out of range for {n} encoders")).into());
        }
        vec![k]
    };
    fs::create_dir_all(&args.out)?;
    let size = data.image_size;
    let mut per_encoder: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut dims = [size, size];
    for chunk in samples.chunks(args.batch.max(1)) {
        let refs: Vec<&MixtureSample> = chunk.iter().collect();
        let x = mixture_batch::<f32>(&refs, size);
        for est in estimate_all(&model, &x)? {
            if !encoders.contains(&est.encoder_index) {
                continue;
            }
            let est: SourceEstimate<f32> = crop(&est, args.crop)?;
            dims = [est.estimate.height(), est.estimate.width()];
            per_encoder[est.encoder_index].extend_from_slice(est.estimate.data());
        }
    }
    let mut files = Vec::new();
    for &k in &encoders {
        let name = format!("encoder_{k}.f32");
        write_f32(&args.out.join(&name), per_encoder[k].iter().copied())?;
        let plane = dims[0] * dims[1];
        for i in 0..args.png.min(samples.len()) {
            save_png(&per_encoder[k][i * plane..(i + 1) * plane], dims[1], dims[0], &args.out.join(format!("encoder_{k}_{i:04}.png")))?;
        }
        files.push(json!({ "encoder": k, "file": name }));
    }
    let manifest = json!({
        "split": args.split,
        "count": samples.len(),
        "height": dims[0],
        "width": dims[1],
        "crop_margin": args.crop,
        "dtype": "f32le",
        "layout": "count x height x width, row-major",
        "estimates": files,
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("{}", args.out.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint_dir(&args.ckpt))?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&model, &data.test, args.batch, exec())?;
    write_json(&args.out, &report)?;
    println!(
        "{}",
        json!({
            "mixture_mae": report.mixture_mae,
            "source_mae": report.source_mae,
            "permutation": report.permutation,
            "dead": report.dead,
            "report": args.out,
        })
    );
    Ok(())
}

fn export_weights(args: &ExportArgs) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint_dir(&args.ckpt))?;
    export_weight_mass(&weight_mass(&model), &args.out, args.cell.max(1))?;
    println!("{}", args.out.display());
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, args: &GradcheckArgs) -> Result<bool> {
    let cfg = load_config(args.config.as_deref(), cli.seed)?;
    let report = gradcheck(cfg.seed, &cfg.train.loss);
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    println!("{text}");
    Ok(report.passed)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<clap::Error>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Divergence { .. } => EXIT_DIVERGED,
                TrainError::Setup(_) => EXIT_CONFIG,
                _ => EXIT_OTHER,
            };
        }
        if let Some(CheckpointError::Mismatch(_)) = cause.downcast_ref::<CheckpointError>() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<unmix_core::model::ModelError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_OTHER
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!(ConfigError::Invalid("--threads must be positive".into()));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring the thread pool")?;
        #[cfg(not(feature = "parallel"))]
        log::warn!("built without the parallel feature; --threads {t} has no effect");
    }
    match &cli.command {
        Command::Generate(a) => generate(cli, a)?,
        Command::Train(a) => train(cli, a)?,
        Command::Separate(a) => separate(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::ExportWeights(a) => export_weights(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(cli, a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_OTHER),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
