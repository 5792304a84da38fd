//! Run configuration files.
//!
//! Flat `key = value` lines, optionally grouped under `[section]` headers.
//! `#` starts a comment. Lists are comma separated. Unknown keys, keys placed
//! under the wrong section and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Kernel, MixingConfig};
use crate::losses::AlphaScheme;
use crate::model::{Activation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub n_pairs: usize,
    pub image_size: usize,
    pub split_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { n_pairs: 150_000, image_size: 64, split_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything needed to reproduce a run. `seed` is copied into the mixing
/// and training configs and also seeds model initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub mixing: MixingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSettings::default(),
            mixing: MixingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("", "seed"),
    ("data", "n_pairs"),
    ("data", "image_size"),
    ("data", "split_fraction"),
    ("data", "alpha"),
    ("data", "flip_probability"),
    ("data", "kernel"),
    ("model", "num_encoders"),
    ("model", "input_channels"),
    ("model", "input_height"),
    ("model", "input_width"),
    ("model", "encoder_channels"),
    ("model", "encoding_channels"),
    ("model", "decoder_channels"),
    ("model", "decoder_width"),
    ("model", "encoder_kernel"),
    ("model", "decoder_kernel"),
    ("model", "activation"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "learning_rate"),
    ("train", "lr_step_epochs"),
    ("train", "lr_gamma"),
    ("train", "global_weight_decay"),
    ("loss", "lambda_pathway"),
    ("loss", "lambda_zero_recon"),
    ("loss", "lambda_z"),
    ("loss", "alpha_scheme"),
    ("paths", "data_dir"),
    ("paths", "out_dir"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError::Parse { line, message: format!("cannot parse {key} = {raw:?}") })
}

fn list(line: usize, key: &str, raw: &str) -> Result<Vec<usize>, ConfigError> {
    raw.split(',').map(|s| value(line, key, s.trim())).collect()
}

fn unquote(raw: &str) -> &str {
    let t = raw.trim();
    if t.len() >= 2 && ((t.starts_with('"') && t.ends_with('"')) || (t.starts_with('\'') && t.ends_with('\''))) {
        &t[1..t.len() - 1]
    } else {
        t
    }
}

impl RunConfig {
    /// Parse config text on top of the defaults and validate the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = HashSet::new();
        let mut explicit_input = false;
        let mut image_size_line = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Parse { line, message: "unterminated section header".into() })?
                    .trim();
                if !KEYS.iter().any(|(s, _)| !s.is_empty() && *s == name) {
                    return Err(ConfigError::Parse { line, message: format!("unknown section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, message: format!("expected `key = value`, found {content:?}") })?;
            let key = key.trim();
            let raw = unquote(raw);
            let home = section_of(key).ok_or_else(|| ConfigError::Parse { line, message: format!("unknown key {key:?}") })?;
            if !section.is_empty() && !home.is_empty() && home != section {
                return Err(ConfigError::Parse { line, message: format!("key {key:?} belongs in [{home}], not [{section}]") });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Parse { line, message: format!("duplicate key {key:?}") });
            }
            match key {
                "seed" => cfg.seed = value(line, key, raw)?,
                "n_pairs" => cfg.data.n_pairs = value(line, key, raw)?,
                "image_size" => {
                    cfg.data.image_size = value(line, key, raw)?;
                    image_size_line = Some(line);
                }
                "split_fraction" => cfg.data.split_fraction = value(line, key, raw)?,
                "alpha" => cfg.mixing.alpha = value(line, key, raw)?,
                "flip_probability" => cfg.mixing.flip_probability = value(line, key, raw)?,
                "kernel" => {
                    cfg.mixing.kernel = match raw {
                        "distortion" => Kernel::distortion(),
                        "identity" => Kernel::identity(7),
                        other => {
                            return Err(ConfigError::Parse {
                                line,
                                message: format!("kernel must be distortion or identity, got {other:?}"),
                            })
                        }
                    }
                }
                "num_encoders" => cfg.model.num_encoders = value(line, key, raw)?,
                "input_channels" => cfg.model.input_channels = value(line, key, raw)?,
                "input_height" => {
                    cfg.model.input_size[0] = value(line, key, raw)?;
                    explicit_input = true;
                }
                "input_width" => {
                    cfg.model.input_size[1] = value(line, key, raw)?;
                    explicit_input = true;
                }
                "encoder_channels" => cfg.model.encoder_channels = list(line, key, raw)?,
                "encoding_channels" => cfg.model.encoding_channels = value(line, key, raw)?,
                "decoder_channels" => cfg.model.decoder_channels = list(line, key, raw)?,
                "decoder_width" => {
                    let w: usize = value(line, key, raw)?;
                    cfg.model.decoder_channels.iter_mut().for_each(|c| *c = w);
                }
                "encoder_kernel" => cfg.model.encoder_kernel = value(line, key, raw)?,
                "decoder_kernel" => cfg.model.decoder_kernel = value(line, key, raw)?,
                "activation" => {
                    cfg.model.activation = match raw {
                        "relu" => Activation::Relu,
                        other => {
                            return Err(ConfigError::Parse { line, message: format!("unsupported activation {other:?}") })
                        }
                    }
                }
                "epochs" => cfg.train.epochs = value(line, key, raw)?,
                "batch_size" => cfg.train.batch_size = value(line, key, raw)?,
                "learning_rate" => cfg.train.learning_rate = value(line, key, raw)?,
                "lr_step_epochs" => cfg.train.lr_step_epochs = value(line, key, raw)?,
                "lr_gamma" => cfg.train.lr_gamma = value(line, key, raw)?,
                "global_weight_decay" => cfg.train.global_weight_decay = value(line, key, raw)?,
                "lambda_pathway" => cfg.train.loss.lambda_pathway = value(line, key, raw)?,
                "lambda_zero_recon" => cfg.train.loss.lambda_zero_recon = value(line, key, raw)?,
                "lambda_z" => cfg.train.loss.lambda_z = value(line, key, raw)?,
                "alpha_scheme" => {
                    cfg.train.loss.alpha_scheme = raw.parse().map_err(|e| ConfigError::Parse { line, message: e })?
                }
                "data_dir" => cfg.paths.data_dir = Some(PathBuf::from(raw)),
                "out_dir" => cfg.paths.out_dir = Some(PathBuf::from(raw)),
                _ => unreachable!("every key in KEYS is handled"),
            }
        }
        if seen.contains("decoder_width") && seen.contains("decoder_channels") {
            return Err(ConfigError::Invalid("set either decoder_width or decoder_channels, not both".into()));
        }
        if !explicit_input {
            cfg.model.input_size = [cfg.data.image_size, cfg.data.image_size];
        } else if image_size_line.is_some() && cfg.model.input_size != [cfg.data.image_size, cfg.data.image_size] {
            return Err(ConfigError::Invalid(format!(
                "model input {:?} does not match image_size {}",
                cfg.model.input_size, cfg.data.image_size
            )));
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.mixing.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mixing.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.data;
        if d.n_pairs == 0 || !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(ConfigError::Invalid("n_pairs must be positive and split_fraction in (0, 1)".into()));
        }
        Ok(())
    }

    /// Render as config text that parses back to an equal config (the
    /// kernel is written by name, so custom kernels are not representable).
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ");
        let kernel = if self.mixing.kernel == Kernel::identity(7) { "identity" } else { "distortion" };
        let scheme = match self.train.loss.alpha_scheme {
            AlphaScheme::Uniform => "uniform",
            AlphaScheme::Positional => "positional",
        };
        let (m, t, l, d) = (&self.model, &self.train, &self.train.loss, &self.data);
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}\n", self.seed);
        let _ = writeln!(s, "[data]\nn_pairs = {}\nimage_size = {}\nsplit_fraction = {:?}", d.n_pairs, d.image_size, d.split_fraction);
        let _ = writeln!(s, "alpha = {:?}\nflip_probability = {:?}\nkernel = {kernel}\n", self.mixing.alpha, self.mixing.flip_probability);
        let _ = writeln!(s, "[model]\nnum_encoders = {}\ninput_channels = {}", m.num_encoders, m.input_channels);
        let _ = writeln!(s, "input_height = {}\ninput_width = {}", m.input_size[0], m.input_size[1]);
        let _ = writeln!(s, "encoder_channels = {}\nencoding_channels = {}", join(&m.encoder_channels), m.encoding_channels);
        let _ = writeln!(s, "decoder_channels = {}", join(&m.decoder_channels));
        let _ = writeln!(s, "encoder_kernel = {}\ndecoder_kernel = {}\nactivation = relu\n", m.encoder_kernel, m.decoder_kernel);
        let _ = writeln!(s, "[train]\nepochs = {}\nbatch_size = {}\nlearning_rate = {:?}", t.epochs, t.batch_size, t.learning_rate);
        let _ = writeln!(
            s,
            "lr_step_epochs = {}\nlr_gamma = {:?}\nglobal_weight_decay = {:?}\n",
            t.lr_step_epochs, t.lr_gamma, t.global_weight_decay
        );
        let _ = writeln!(s, "[loss]\nlambda_pathway = {:?}\nlambda_zero_recon = {:?}", l.lambda_pathway, l.lambda_zero_recon);
        let _ = writeln!(s, "lambda_z = {:?}\nalpha_scheme = {scheme}", l.lambda_z);
        if self.paths.data_dir.is_some() || self.paths.out_dir.is_some() {
            let _ = writeln!(s, "\n[paths]");
            if let Some(p) = &self.paths.data_dir {
                let _ = writeln!(s, "data_dir = {}", p.display());
            }
            if let Some(p) = &self.paths.out_dir {
                let _ = writeln!(s, "out_dir = {}", p.display());
            }
        }
        s
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    RunConfig::load(path)
}
