//! Parameter update rules. Each step consumes the gradients stored on the
//! parameters and clears them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd, momentum, adam)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    settings: OptimizerSettings,
    step: u64,
    /// Momentum buffer or Adam first moment, per parameter.
    m: Vec<Vec<f64>>,
    /// Adam second moment.
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, settings: OptimizerSettings, store: &ParamStore) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Ok(Self {
            kind,
            lr,
            settings,
            step: 0,
            m: if kind == OptimizerKind::Sgd { Vec::new() } else { zeros() },
            v: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Fails without touching the
    /// store if any parameter lacks a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let s = self.settings;
        let lr = self.lr;
        let t = self.step as i32;
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in values.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((w, &gi), m) in values.iter_mut().zip(g).zip(&mut self.m[i]) {
                        *m = s.momentum * *m + gi;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - s.beta1.powi(t);
                    let c2 = 1.0 - s.beta2.powi(t);
                    let (ms, vs) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &gi), m), v) in values.iter_mut().zip(g).zip(ms).zip(vs) {
                        *m = s.beta1 * *m + (1.0 - s.beta1) * gi;
                        *v = s.beta2 * *v + (1.0 - s.beta2) * gi * gi;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + s.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One update of `store` with a fresh optimizer state.
pub fn optimizer_step(store: &mut ParamStore, lr: f64, kind: OptimizerKind) -> Result<()> {
    Optimizer::new(kind, lr, OptimizerSettings::default(), store)?.step(store)
}
