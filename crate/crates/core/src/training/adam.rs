use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

/// Adam with bias correction. Moments are created lazily for trainable
/// parameters the first time they receive a gradient; each parameter keeps
/// its own step count, so adapters that sit out a batch are not decayed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: Vec::new(),
            steps: 0,
        }
    }

    /// Optimizer steps taken.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Parameters that currently hold moments.
    pub fn tracked(&self) -> usize {
        self.state.iter().filter(|s| s.is_some()).count()
    }

    pub fn step_count_of(&self, index: usize) -> u64 {
        self.state.get(index).and_then(|s| s.as_ref()).map_or(0, |m| m.step)
    }

    /// Applies one update to every trainable parameter with a gradient and
    /// clears all gradients. Frozen parameters are never touched.
    ///
    /// Fails if no trainable parameter has a gradient: that means the loss
    /// did not depend on anything being trained.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let mut updated = 0;
        for (id, p) in store.iter_mut() {
            let Some(g) = p.grad.take() else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let step_size = lr / bc1;
            for ((w, &g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                let gf = g as f64;
                let mf = beta1 * *m as f64 + (1.0 - beta1) * gf;
                let vf = beta2 * *v as f64 + (1.0 - beta2) * gf * gf;
                *m = mf as f32;
                *v = vf as f32;
                let denom = (vf / bc2).sqrt() + eps;
                *w = (*w as f64 - step_size * mf / denom) as f32;
            }
            updated += 1;
        }
        if updated == 0 {
            return Err(Error::Config("optimizer step without gradients on any trainable parameter".into()));
        }
        self.steps += 1;
        Ok(())
    }
}
