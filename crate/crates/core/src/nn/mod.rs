//! Minimal reverse-mode engine for the layer types the autoencoder needs.
//!
//! Every block records what its backward pass needs in a trace during the
//! forward pass; `backward` consumes an output gradient and accumulates
//! parameter gradients into [`Param::grad`]. Gradients of several backward
//! passes (for example the reconstruction pass and the zero-code pass) add up
//! until [`Stack::zero_grad`] is called.

pub mod conv;
pub mod norm;

use crate::tensor::{Real, Tensor};

pub use conv::{Conv2d, ConvTranspose2d, Geometry, WeightNormCache};
pub use norm::{BatchNorm, GroupNorm, NormCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param { value, grad, shape }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// What role a parameter plays; used by the optimizer-facing code and the
/// frozen-affine checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Magnitude of a weight-normalized layer.
    Gain,
    /// Scale or shift of a normalization layer.
    NormAffine,
}

#[derive(Clone, Debug)]
pub enum ConvLayer<T> {
    Down(Conv2d<T>),
    Up(ConvTranspose2d<T>),
}

#[derive(Clone, Debug)]
pub enum Norm<T> {
    Batch(BatchNorm<T>),
    Group(GroupNorm<T>),
}

/// Convolution, optional normalization, optional ReLU.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub conv: ConvLayer<T>,
    pub norm: Option<Norm<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct BlockAux<T> {
    weight_norm: Option<WeightNormCache<T>>,
    norm: Option<NormCache<T>>,
    mode: Mode,
}

impl<T: Real> Block<T> {
    /// Forward pass that never mutates the block. In training mode the
    /// batch-norm batch statistics are returned so the caller can fold them
    /// into the running averages.
    pub fn apply(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BlockAux<T>, Option<(Vec<T>, Vec<T>)>) {
        let (mut y, weight_norm) = match &self.conv {
            ConvLayer::Down(c) => (c.forward(x), None),
            ConvLayer::Up(c) => {
                let (y, wn) = c.forward(x);
                (y, c.gain.as_ref().map(|_| wn))
            }
        };
        let mut stats = None;
        let norm = match &self.norm {
            None => None,
            Some(Norm::Batch(bn)) => {
                let (out, cache) = match mode {
                    Mode::Train => {
                        let (mean, var) = bn.batch_stats(&y);
                        let r = bn.normalize(&y, &mean, &var);
                        stats = Some((mean, var));
                        r
                    }
                    Mode::Eval => bn.apply(&y, mode),
                };
                y = out;
                Some(cache)
            }
            Some(Norm::Group(gn)) => {
                let (out, cache) = gn.forward(&y);
                y = out;
                Some(cache)
            }
        };
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
        }
        (y, BlockAux { weight_norm, norm, mode }, stats)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BlockAux<T>) {
        let (y, aux, stats) = self.apply(x, mode);
        if let (Some((mean, var)), Some(Norm::Batch(bn))) = (stats, &mut self.norm) {
            let count = y.channel_len();
            bn.update_running(&mean, &var, count);
        }
        (y, aux)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        aux: &BlockAux<T>,
        mut dy: Tensor<T>,
        opts: Backward,
    ) -> Option<Tensor<T>> {
        if self.relu {
            for (d, &out) in dy.data_mut().iter_mut().zip(y.data()) {
                if out <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        if let Some(norm) = &mut self.norm {
            let cache = aux.norm.as_ref().expect("normalization cache");
            dy = match norm {
                Norm::Batch(bn) => match aux.mode {
                    Mode::Train => bn.backward(cache, &dy, opts.frozen_affine),
                    Mode::Eval => bn.backward_eval(cache, &dy, opts.frozen_affine),
                },
                Norm::Group(gn) => gn.backward(cache, &dy, opts.frozen_affine),
            };
        }
        match &mut self.conv {
            ConvLayer::Down(c) => c.backward(x, &dy, opts.input_grad),
            ConvLayer::Up(c) => match &aux.weight_norm {
                Some(wn) => c.backward(x, wn, &dy, opts.input_grad),
                None => {
                    let wn = WeightNormCache { effective: c.weight.value.clone(), norms: Vec::new() };
                    c.backward(x, &wn, &dy, opts.input_grad)
                }
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.conv {
            ConvLayer::Down(c) => c.out_channels,
            ConvLayer::Up(c) => c.out_channels,
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        let (weight, bias, gain) = match &self.conv {
            ConvLayer::Down(c) => (&c.weight, c.bias.as_ref(), None),
            ConvLayer::Up(c) => (&c.weight, c.bias.as_ref(), c.gain.as_ref()),
        };
        match gain {
            Some(g) => {
                f(&format!("{prefix}.weight_v"), ParamKind::Weight, weight);
                f(&format!("{prefix}.weight_g"), ParamKind::Gain, g);
            }
            None => f(&format!("{prefix}.weight"), ParamKind::Weight, weight),
        }
        if let Some(b) = bias {
            f(&format!("{prefix}.bias"), ParamKind::Bias, b);
        }
        if let Some(norm) = &self.norm {
            let (g, b) = match norm {
                Norm::Batch(n) => (&n.gamma, &n.beta),
                Norm::Group(n) => (&n.gamma, &n.beta),
            };
            f(&format!("{prefix}.norm.gamma"), ParamKind::NormAffine, g);
            f(&format!("{prefix}.norm.beta"), ParamKind::NormAffine, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        let (weight, bias, gain) = match &mut self.conv {
            ConvLayer::Down(c) => (&mut c.weight, c.bias.as_mut(), None),
            ConvLayer::Up(c) => (&mut c.weight, c.bias.as_mut(), c.gain.as_mut()),
        };
        match gain {
            Some(g) => {
                f(&format!("{prefix}.weight_v"), ParamKind::Weight, weight);
                f(&format!("{prefix}.weight_g"), ParamKind::Gain, g);
            }
            None => f(&format!("{prefix}.weight"), ParamKind::Weight, weight),
        }
        if let Some(b) = bias {
            f(&format!("{prefix}.bias"), ParamKind::Bias, b);
        }
        if let Some(norm) = &mut self.norm {
            let (g, b) = match norm {
                Norm::Batch(n) => (&mut n.gamma, &mut n.beta),
                Norm::Group(n) => (&mut n.gamma, &mut n.beta),
            };
            f(&format!("{prefix}.norm.gamma"), ParamKind::NormAffine, g);
            f(&format!("{prefix}.norm.beta"), ParamKind::NormAffine, b);
        }
    }
}

/// Options for a backward pass.
#[derive(Clone, Copy, Debug)]
pub struct Backward {
    /// Skip gradient accumulation into normalization scale/shift.
    pub frozen_affine: bool,
    /// Whether the gradient w.r.t. the stack input is needed.
    pub input_grad: bool,
}

impl Default for Backward {
    fn default() -> Self {
        Backward { frozen_affine: false, input_grad: true }
    }
}

/// Everything a forward pass through a [`Stack`] keeps for backprop.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[k + 1]` the output of block `k`.
    pub acts: Vec<Tensor<T>>,
    aux: Vec<BlockAux<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("non-empty trace")
    }
}

/// A sequence of blocks.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub blocks: Vec<Block<T>>,
}

impl<T: Real> Stack<T> {
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        let mut aux = Vec::with_capacity(self.blocks.len());
        acts.push(x);
        for block in &mut self.blocks {
            let (y, a) = block.forward(acts.last().unwrap(), mode);
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    /// Pure forward pass recording a trace (running statistics untouched).
    pub fn trace(&self, x: Tensor<T>, mode: Mode) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        let mut aux = Vec::with_capacity(self.blocks.len());
        acts.push(x);
        for block in &self.blocks {
            let (y, a, _) = block.apply(acts.last().unwrap(), mode);
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    /// Inference-mode forward without keeping intermediates.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur: Option<Tensor<T>> = None;
        for block in &self.blocks {
            let (y, _, _) = block.apply(cur.as_ref().unwrap_or(x), Mode::Eval);
            cur = Some(y);
        }
        cur.unwrap_or_else(|| x.clone())
    }

    pub fn backward(&mut self, trace: &Trace<T>, dy: Tensor<T>, opts: Backward) -> Option<Tensor<T>> {
        let mut grad = Some(dy);
        let last = self.blocks.len();
        for (k, block) in self.blocks.iter_mut().enumerate().rev() {
            let dy = grad.take().expect("gradient available");
            let block_opts = Backward { input_grad: k > 0 || opts.input_grad, ..opts };
            grad = block.backward(&trace.acts[k], &trace.acts[k + 1], &trace.aux[k], dy, block_opts);
            if k == 0 {
                break;
            }
        }
        debug_assert!(last > 0 || grad.is_some());
        grad
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, p| p.zero_grad());
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}layer.{k}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}layer.{k}"), f);
        }
    }

    /// Batch-norm running statistics, by name.
    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            if let Some(Norm::Batch(bn)) = &mut b.norm {
                f(&format!("{prefix}layer.{k}.norm.running_mean"), &mut bn.running_mean);
                f(&format!("{prefix}layer.{k}.norm.running_var"), &mut bn.running_var);
            }
        }
    }
}
