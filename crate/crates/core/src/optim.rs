//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! cosine learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::{invalid, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; gradients above it are rescaled.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWCfg {
    fn default() -> AdamWCfg {
        AdamWCfg {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer state: first/second moment per parameter, aligned with the
/// store's registration order, plus the step counter.
pub struct AdamW {
    cfg: AdamWCfg,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWCfg) -> AdamW {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must cover the store's parameters by name;
    /// parameters without an entry (untouched by the loss) decay only.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let sq: f64 = grads
                    .iter()
                    .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);

        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (idx, name) in names.iter().enumerate() {
            let grad = grads.iter().find(|(n, _)| n == name).map(|(_, g)| g);
            let param = store
                .get_mut(name)
                .ok_or_else(|| invalid("adamw", format!("parameter {name} vanished")))?;
            if let Some(g) = grad {
                if g.len() != param.numel() {
                    return Err(invalid(
                        "adamw",
                        format!("gradient for {name} has {} values, parameter has {}", g.len(), param.numel()),
                    ));
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = param.data_mut();
            for i in 0..data.len() {
                let gi = grad.map_or(0.0, |g| g[i]) * scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * (mh / (vh.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }

    /// Serializes moments and the step counter as extra checkpoint entries
    /// under the `optim/` namespace, keyed by parameter name.
    pub fn state_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (idx, (name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("optim/m/{name}"),
                Tensor::from_vec(&shape, self.m[idx].clone()).expect("aligned state"),
            ));
            out.push((
                format!("optim/v/{name}"),
                Tensor::from_vec(&shape, self.v[idx].clone()).expect("aligned state"),
            ));
        }
        out.push((
            "optim/step".into(),
            Tensor::from_vec(&[1], vec![self.step as f64]).expect("scalar"),
        ));
        out
    }

    /// Restores moments and the step counter from checkpoint entries.
    pub fn load_state(
        &mut self,
        store: &ParamStore,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for (idx, (name, t)) in store.iter().enumerate() {
            for (which, slot) in [("m", &mut self.m[idx]), ("v", &mut self.v[idx])] {
                let key = format!("optim/{which}/{name}");
                let loaded = lookup(&key)
                    .ok_or_else(|| invalid("adamw", format!("missing state entry {key}")))?;
                if loaded.numel() != t.numel() {
                    return Err(invalid(
                        "adamw",
                        format!("state entry {key} has {} values, expected {}", loaded.numel(), t.numel()),
                    ));
                }
                *slot = loaded.into_data();
            }
        }
        let step = lookup("optim/step")
            .ok_or_else(|| invalid("adamw", "missing state entry optim/step".into()))?;
        self.step = step.item() as u64;
        Ok(())
    }
}

/// Cosine decay from `lr_init` at t = 0 to `lr_min` at t = n - 1.
pub fn cosine_lr(t: usize, n: usize, lr_init: f64, lr_min: f64) -> f64 {
    if n <= 1 {
        return lr_init;
    }
    let t = t.min(n - 1) as f64;
    let phase = std::f64::consts::PI * t / (n - 1) as f64;
    lr_min + (lr_init - lr_min) * 0.5 * (1.0 + phase.cos())
}
