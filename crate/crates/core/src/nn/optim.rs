use serde::{Deserialize, Serialize};

use super::param::Module;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are indexed by the
/// module's parameter visitation order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, lr: f64, module: &mut dyn Module) {
        self.step += 1;
        let c = self.config.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if first.len() <= idx {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for i in 0..p.len() {
                let g = p.grad[i] as f64;
                m[i] = (c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g) as f32;
                v[i] = (c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g) as f32;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                let w = p.value[i] as f64;
                let w = w - lr * c.weight_decay * w - lr * mhat / (vhat.sqrt() + c.eps);
                p.value[i] = w as f32;
            }
            idx += 1;
        });
    }
}
