use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for the parameters an optimizer touches.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<f64>>>,
    pub v: Vec<Option<Tensor<f64>>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update of the `trainable` parameters, with optional global-norm clipping.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f64>,
        grads: &Gradients<f64>,
        trainable: &[ParamId],
        lr: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate {lr} must be nonnegative")));
        }
        let scale = match clip {
            Some(c) => {
                let norm = trainable
                    .iter()
                    .filter_map(|&id| grads.param(id))
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        for &id in trainable {
            let Some(g) = grads.param(id) else { continue };
            let i = id.0;
            let p = store.get_mut(id);
            match self.config {
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((w, &gr), mm), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        let gr = gr * scale;
                        *mm = beta1 * *mm + (1.0 - beta1) * gr;
                        *vv = beta2 * *vv + (1.0 - beta2) * gr * gr;
                        *w -= lr * (*mm / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { momentum } => {
                    let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((w, &gr), mm) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        *mm = momentum * *mm + gr * scale;
                        *w -= lr * *mm;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    /// Ramp the decay up as `min(d, (1 + n) / (10 + n))` over the first updates.
    pub warmup: bool,
    pub updates: u64,
    pub shadow: Vec<Tensor<f64>>,
}

impl Ema {
    pub fn new(store: &ParamStore<f64>, decay: f64, warmup: bool) -> Self {
        Self {
            decay,
            warmup,
            updates: 0,
            shadow: store.ids().map(|id| store.get(id).clone()).collect(),
        }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, store: &ParamStore<f64>, ids: &[ParamId]) {
        let d = self.effective_decay();
        for &id in ids {
            let s = &mut self.shadow[id.0];
            for (a, &p) in s.data_mut().iter_mut().zip(store.get(id).data()) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
        self.updates += 1;
    }

    /// Copy of `store` with the shadow values.
    pub fn apply_to(&self, store: &ParamStore<f64>) -> ParamStore<f64> {
        let mut out = store.clone();
        for id in store.ids() {
            *out.get_mut(id) = self.shadow[id.0].clone();
        }
        out
    }
}
