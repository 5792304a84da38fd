//! Adam with L2 weight decay folded into the gradient, and a step schedule.

use crate::model::Model;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates per parameter tensor, in visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// `g = grad + wd * θ`; standard bias-corrected Adam update.
    pub fn step<T: Real>(&mut self, model: &mut Model<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_mut(&mut |_, _, p| {
            if ms.len() <= k {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let w = p.value[i].to_f64().unwrap();
                let g = p.grad[i].to_f64().unwrap() + weight_decay * w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[i] = T::from_f64_lossy(w - update);
            }
            k += 1;
        });
    }
}

/// Learning rate after `epoch` completed epochs: `lr * gamma^(epoch / step)`.
pub fn step_lr(base: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    if step_size == 0 {
        return base;
    }
    base * gamma.powi((epoch / step_size) as i32)
}
