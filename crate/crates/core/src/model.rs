//! Multi-encoder, single-decoder convolutional autoencoder.
//!
//! `N` architecturally identical encoders see the same input. Their codes are
//! concatenated along the channel axis (encoder order preserved) and decoded by
//! one decoder. Normalization placement:
//!
//! * encoder hidden blocks: convolution, batch norm, ReLU;
//! * encoder output block: plain convolution (no normalization, no activation);
//! * decoder hidden blocks: transposed convolution, group norm with `N` groups, ReLU;
//! * decoder output block: weight-normalized transposed convolution, logistic sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    Backward, BatchNorm, Block, Conv2d, ConvLayer, ConvTranspose2d, Geometry, GroupNorm, Mode, Norm, Param,
    ParamKind, Stack, Trace,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("encoder index {index} out of range for {count} encoders")]
    EncoderIndex { index: usize, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_encoders: usize,
    pub input_channels: usize,
    /// `[height, width]`; a height of 1 selects 1-D convolutions.
    pub input_size: [usize; 2],
    /// Hidden widths of each encoder; one stride-2 block per entry plus the output block.
    pub encoder_channels: Vec<usize>,
    /// Channels of a single encoder's code (c_z).
    pub encoding_channels: usize,
    /// Hidden widths of the decoder; each must be divisible by `num_encoders`.
    pub decoder_channels: Vec<usize>,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoders: 3,
            input_channels: 1,
            input_size: [64, 64],
            encoder_channels: vec![32, 64, 128],
            encoding_channels: 16,
            decoder_channels: vec![192, 96, 48],
            encoder_kernel: 3,
            decoder_kernel: 4,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.encoder_channels.len() + 1
    }

    pub fn is_1d(&self) -> bool {
        self.input_size[0] == 1
    }

    /// Spatial extent of one encoder's code.
    pub fn encoding_size(&self) -> [usize; 2] {
        let down = 1usize << self.depth();
        if self.is_1d() {
            [1, self.input_size[1] / down]
        } else {
            [self.input_size[0] / down, self.input_size[1] / down]
        }
    }

    /// Elements in one sample's code from one encoder (h in the L2 penalty).
    pub fn encoding_len(&self) -> usize {
        let [h, w] = self.encoding_size();
        self.encoding_channels * h * w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.num_encoders == 0 {
            return err("num_encoders must be at least 1".into());
        }
        if self.input_channels == 0 || self.encoding_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return err("layer widths must be positive".into());
        }
        if self.decoder_channels.len() != self.encoder_channels.len() {
            return err(format!(
                "decoder has {} hidden layers but encoder has {}; both must upsample/downsample equally",
                self.decoder_channels.len(),
                self.encoder_channels.len()
            ));
        }
        for &w in &self.decoder_channels {
            if w % self.num_encoders != 0 {
                return err(format!("decoder width {w} is not divisible by num_encoders = {}", self.num_encoders));
            }
        }
        let down = 1usize << self.depth();
        let [h, w] = self.input_size;
        if w == 0 || w % down != 0 || (!self.is_1d() && (h == 0 || h % down != 0)) {
            return err(format!("input size {h}x{w} must be divisible by 2^{} = {down}", self.depth()));
        }
        if self.encoder_kernel < 2 || self.decoder_kernel < 2 {
            return err("kernel sizes must be at least 2".into());
        }
        Ok(())
    }

    fn encoder_geometry(&self) -> Geometry {
        let k = self.encoder_kernel;
        let p = (k - 1) / 2;
        if self.is_1d() {
            Geometry { kernel: [1, k], stride: [1, 2], padding: [0, p] }
        } else {
            Geometry { kernel: [k, k], stride: [2, 2], padding: [p, p] }
        }
    }

    fn decoder_geometry(&self) -> Geometry {
        let k = self.decoder_kernel;
        let p = (k - 1) / 2;
        if self.is_1d() {
            Geometry { kernel: [1, k], stride: [1, 2], padding: [0, p] }
        } else {
            Geometry { kernel: [k, k], stride: [2, 2], padding: [p, p] }
        }
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<T> {
    (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
}

/// The trainable network.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoders: Vec<Stack<T>>,
    pub decoder: Stack<T>,
}

/// Traces of a full forward pass, kept for backprop.
pub struct ForwardPass<T> {
    pub encoders: Vec<Trace<T>>,
    pub decoder: Trace<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn codes(&self) -> Vec<&Tensor<T>> {
        self.encoders.iter().map(|t| t.output()).collect()
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.decoder.output()
    }
}

impl<T: Real> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eg = config.encoder_geometry();
        let dg = config.decoder_geometry();

        let mut encoders = Vec::with_capacity(config.num_encoders);
        for _ in 0..config.num_encoders {
            let mut blocks = Vec::new();
            let mut cin = config.input_channels;
            let widths = config.encoder_channels.iter().copied().chain(std::iter::once(config.encoding_channels));
            let depth = config.depth();
            for (k, cout) in widths.enumerate() {
                let last = k + 1 == depth;
                let fan_in = (cin * eg.taps()) as f64;
                let bound = 1.0 / fan_in.sqrt();
                let weight =
                    Param::new(uniform(&mut rng, cout * cin * eg.taps(), bound), vec![cout, cin, eg.kernel[0], eg.kernel[1]]);
                // Hidden blocks are followed by batch norm, which absorbs a bias.
                let bias = last.then(|| Param::new(uniform(&mut rng, cout, bound), vec![cout]));
                blocks.push(Block {
                    conv: ConvLayer::Down(Conv2d { in_channels: cin, out_channels: cout, geometry: eg, weight, bias }),
                    norm: (!last).then(|| Norm::Batch(BatchNorm::new(cout))),
                    relu: !last,
                });
                cin = cout;
            }
            encoders.push(Stack { blocks });
        }

        let mut blocks = Vec::new();
        let mut cin = config.num_encoders * config.encoding_channels;
        let widths = config.decoder_channels.iter().copied().chain(std::iter::once(config.input_channels));
        let depth = config.depth();
        for (k, cout) in widths.enumerate() {
            let last = k + 1 == depth;
            let fan_in = (cin * dg.taps()) as f64 / (dg.stride[0] * dg.stride[1]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let weight: Vec<T> = uniform(&mut rng, cin * cout * dg.taps(), bound);
            let bias = Param::new(uniform(&mut rng, cout, bound), vec![cout]);
            let shape = vec![cin, cout, dg.kernel[0], dg.kernel[1]];
            let mut layer = ConvTranspose2d {
                in_channels: cin,
                out_channels: cout,
                geometry: dg,
                weight: Param::new(weight, shape),
                bias: Some(bias),
                gain: None,
            };
            if last {
                // Weight norm starts at the initial weight: gain = |v|.
                let taps = dg.taps();
                let mut sq = vec![T::zero(); cout];
                for (i, chunk) in layer.weight.value.chunks(taps).enumerate() {
                    sq[i % cout] += chunk.iter().map(|&v| v * v).sum::<T>();
                }
                layer.gain = Some(Param::new(sq.into_iter().map(|s| s.sqrt()).collect(), vec![cout]));
            }
            blocks.push(Block {
                conv: ConvLayer::Up(layer),
                norm: (!last).then(|| Norm::Group(GroupNorm::new(cout, config.num_encoders))),
                relu: !last,
            });
            cin = cout;
        }
        Ok(Model { config: config.clone(), encoders, decoder: Stack { blocks } })
    }

    pub fn num_encoders(&self) -> usize {
        self.config.num_encoders
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let [c, _, h, w] = x.shape();
        let want = [self.config.input_channels, self.config.input_size[0], self.config.input_size[1]];
        if [c, h, w] != want {
            return Err(ModelError::Shape { expected: want.to_vec(), got: vec![c, h, w] });
        }
        Ok(())
    }

    /// Shape `(C, H, W)` of the concatenated code.
    pub fn code_shape(&self) -> [usize; 3] {
        let [h, w] = self.config.encoding_size();
        [self.config.num_encoders * self.config.encoding_channels, h, w]
    }

    fn check_code(&self, z: &Tensor<T>) -> Result<(), ModelError> {
        let [c, _, h, w] = z.shape();
        let want = self.code_shape();
        if [c, h, w] != want {
            return Err(ModelError::Shape { expected: want.to_vec(), got: vec![c, h, w] });
        }
        Ok(())
    }

    /// Inference-mode codes from every encoder.
    pub fn encode_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        self.check_input(x)?;
        Ok(self.encoders.iter().map(|e| e.infer(x)).collect())
    }

    /// Inference-mode decoder output before the sigmoid.
    pub fn decode_logits(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_code(z)?;
        Ok(self.decoder.infer(z))
    }

    /// Inference-mode reconstruction in (0, 1).
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(sigmoid(&self.decode_logits(z)?))
    }

    /// Inference-mode codes and reconstruction.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>), ModelError> {
        let z = self.encode_all(x)?;
        let x_hat = self.decode(&concat_encodings(&z)?)?;
        Ok((z, x_hat))
    }

    /// Forward pass recording traces. In [`Mode::Train`] batch statistics are
    /// used and the batch-norm running averages are updated.
    pub fn forward_pass(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>, ModelError> {
        self.check_input(x)?;
        let encoders: Vec<Trace<T>> = match mode {
            Mode::Train => self.encoders.iter_mut().map(|e| e.forward(x.clone(), mode)).collect(),
            Mode::Eval => self.encoders.iter().map(|e| e.trace(x.clone(), mode)).collect(),
        };
        let parts: Vec<Tensor<T>> = encoders.iter().map(|t| t.output().clone()).collect();
        let z = concat_encodings(&parts)?;
        let decoder = self.decoder.trace(z, mode);
        Ok(ForwardPass { encoders, decoder })
    }

    /// Same as [`forward_pass`](Self::forward_pass) without mutating the model.
    pub fn trace_pass(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>, ModelError> {
        self.check_input(x)?;
        let encoders: Vec<Trace<T>> = self.encoders.iter().map(|e| e.trace(x.clone(), mode)).collect();
        let parts: Vec<Tensor<T>> = encoders.iter().map(|t| t.output().clone()).collect();
        let decoder = self.decoder.trace(concat_encodings(&parts)?, mode);
        Ok(ForwardPass { encoders, decoder })
    }

    /// Backpropagate gradients w.r.t. the logits and/or directly w.r.t. each
    /// code into parameter gradients (accumulated).
    pub fn backward_pass(&mut self, pass: &ForwardPass<T>, d_logits: Option<Tensor<T>>, d_codes: Option<Vec<Tensor<T>>>) {
        let n = self.config.num_encoders;
        let mut per_code: Vec<Option<Tensor<T>>> = vec![None; n];
        if let Some(d) = d_logits {
            let dz = self
                .decoder
                .backward(&pass.decoder, d, Backward { frozen_affine: false, input_grad: true })
                .expect("decoder input gradient");
            for (slot, part) in per_code.iter_mut().zip(dz.split_channels(n)) {
                *slot = Some(part);
            }
        }
        if let Some(codes) = d_codes {
            for (slot, extra) in per_code.iter_mut().zip(codes) {
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(extra.data()).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(extra),
                }
            }
        }
        for ((enc, trace), d) in self.encoders.iter_mut().zip(&pass.encoders).zip(per_code) {
            if let Some(d) = d {
                enc.backward(trace, d, Backward { frozen_affine: false, input_grad: false });
            }
        }
    }

    /// Decoder trace for an all-zero code of batch size `batch`.
    pub fn zero_code_trace(&self, batch: usize) -> Trace<T> {
        let [c, h, w] = self.code_shape();
        self.decoder.trace(Tensor::zeros([c, batch, h, w]), Mode::Train)
    }

    /// Backprop for the zero-code pass: decoder only, normalization scale and
    /// shift frozen.
    pub fn backward_zero_code(&mut self, trace: &Trace<T>, d_logits: Tensor<T>) {
        self.decoder.backward(trace, d_logits, Backward { frozen_affine: true, input_grad: false });
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.encoders {
            e.zero_grad();
        }
        self.decoder.zero_grad();
    }

    /// Visit every parameter with its stable name
    /// (`encoder.{n}.layer.{k}.weight`, `decoder.layer.{k}.bias`, ...).
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        for (n, e) in self.encoders.iter().enumerate() {
            e.visit(&format!("encoder.{n}."), f);
        }
        self.decoder.visit("decoder.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        for (n, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("encoder.{n}."), f);
        }
        self.decoder.visit_mut("decoder.", f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (n, e) in self.encoders.iter_mut().enumerate() {
            e.visit_buffers_mut(&format!("encoder.{n}."), f);
        }
        self.decoder.visit_buffers_mut("decoder.", f);
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, _, p| total += p.value.len());
        total
    }

    /// Convert to another precision (parameters and running statistics).
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.config, 0).expect("validated config");
        let mut values = Vec::new();
        self.visit(&mut |_, _, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        out.visit_mut(&mut |_, _, p| {
            p.value = it.next().unwrap().iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect();
        });
        let mut src = self.clone();
        let mut buffers = Vec::new();
        src.visit_buffers_mut(&mut |_, b| buffers.push(b.clone()));
        let mut it = buffers.into_iter();
        out.visit_buffers_mut(&mut |_, b| {
            *b = it.next().unwrap().iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect();
        });
        out
    }

    /// Weights of the decoder blocks subject to the pathway penalty: every
    /// block except the output block, with `(C_in, C_out, taps)` layout.
    pub fn decoder_hidden_weights(&self) -> Vec<(&Param<T>, usize, usize, usize)> {
        let last = self.decoder.blocks.len() - 1;
        self.decoder.blocks[..last]
            .iter()
            .map(|b| match &b.conv {
                ConvLayer::Up(c) => (&c.weight, c.in_channels, c.out_channels, c.geometry.taps()),
                ConvLayer::Down(_) => unreachable!("decoder blocks are transposed convolutions"),
            })
            .collect()
    }

    pub fn decoder_hidden_weights_mut(&mut self) -> Vec<(&mut Param<T>, usize, usize, usize)> {
        let last = self.decoder.blocks.len() - 1;
        self.decoder.blocks[..last]
            .iter_mut()
            .map(|b| match &mut b.conv {
                ConvLayer::Up(c) => (&mut c.weight, c.in_channels, c.out_channels, c.geometry.taps()),
                ConvLayer::Down(_) => unreachable!("decoder blocks are transposed convolutions"),
            })
            .collect()
    }
}

/// Concatenate per-encoder codes along the channel axis, keeping order.
pub fn concat_encodings<T: Real>(z: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
    let first = z.first().ok_or_else(|| ModelError::Config("no encodings to concatenate".into()))?;
    for part in z {
        if part.shape() != first.shape() {
            return Err(ModelError::Shape { expected: first.shape().to_vec(), got: part.shape().to_vec() });
        }
    }
    Ok(Tensor::concat_channels(z))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
