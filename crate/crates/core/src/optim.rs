//! Adam with decoupled weight decay over the adaptor factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdaptorGrads, AdaptorSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state. Each step applies
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`, so the decay never passes through
/// the adaptive normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) steps: u64,
    pub(crate) moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    pub(crate) fn from_state(config: AdamWConfig, steps: u64, moments: Vec<Moments>) -> Self {
        Self { config, steps, moments }
    }

    pub fn step(&mut self, params: &mut AdaptorSet, grads: &AdaptorGrads) -> Result<()> {
        let c = &self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;

        for (name, g) in &grads.sites {
            let adaptor = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown site {name}")))?;
            for (suffix, grad) in [("lora_a", &g.a), ("lora_b", &g.b)] {
                let key = format!("{name}.{suffix}");
                let slot = match self.moments.iter().position(|m| m.name == key) {
                    Some(i) => i,
                    None => {
                        self.moments.push(Moments {
                            name: key,
                            m: vec![0.0; grad.as_slice().len()],
                            v: vec![0.0; grad.as_slice().len()],
                        });
                        self.moments.len() - 1
                    }
                };
                let mom = &mut self.moments[slot];
                let param = if suffix == "lora_a" {
                    adaptor.a_mut()
                } else {
                    adaptor.b_mut()
                };
                if param.len() != grad.as_slice().len() || mom.m.len() != param.len() {
                    return Err(Error::Shape(format!(
                        "gradient/parameter size mismatch for {}",
                        mom.name
                    )));
                }
                for (((p, &gv), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.as_slice())
                    .zip(&mut mom.m)
                    .zip(&mut mom.v)
                {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gv;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p = (f64::from(*p) * decay - c.lr * update) as f32;
                }
            }
        }
        Ok(())
    }
}
