use indexmap::IndexMap;

use crate::{GradMap, ParameterTree, Result, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Learning rate ramps linearly from `lr / warmup_steps` to `lr` over this many steps.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 100,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.lr
        } else {
            c.lr * (self.step.max(1) as f32 / c.warmup_steps as f32).min(1.0)
        }
    }

    /// Applies one update to every parameter for which `frozen(name)` is false.
    /// Frozen parameters are never written.
    pub fn step(
        &mut self,
        params: &mut ParameterTree,
        grads: &GradMap,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            if frozen(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let lr = self.current_lr();
        let c = self.config.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (name, p) in params.iter_mut() {
            if frozen(name) {
                continue;
            }
            let g = &grads[name];
            let n = p.numel();
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
