//! AdamW with decoupled weight decay.

use crate::autodiff::{Element, Parameter};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} must be in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Decoupled-decay Adam over a fixed parameter list.
///
/// Parameters whose gradient slot is empty in a given step are skipped
/// entirely (no moment update, no decay), and parameters frozen after
/// construction are never touched. Per-parameter step counts keep the
/// bias correction right even with such gaps.
pub struct AdamW<E> {
    cfg: AdamWConfig,
    params: Vec<Parameter<E>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl<E: Element> AdamW<E> {
    pub fn new(params: Vec<Parameter<E>>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let m = params
            .iter()
            .map(|p| vec![0.0; p.tensor().numel()])
            .collect();
        let v = params
            .iter()
            .map(|p| vec![0.0; p.tensor().numel()])
            .collect();
        let steps = vec![0; params.len()];
        Ok(AdamW {
            cfg,
            params,
            m,
            v,
            steps,
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor().zero_grad();
        }
    }

    /// Apply one update. Fails without touching any weight if some
    /// gradient is non-finite, naming the offending parameter.
    pub fn step(&mut self) -> Result<()> {
        // Validate every gradient first so a NaN aborts atomically.
        for p in &self.params {
            if !p.trainable() {
                continue;
            }
            if let Some(g) = p.tensor().grad_vec() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient in parameter {:?} at index {pos}",
                        p.name()
                    )));
                }
            }
        }
        let c = self.cfg;
        for (i, p) in self.params.iter().enumerate() {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor().grad_vec() else {
                continue;
            };
            self.steps[i] += 1;
            let t = self.steps[i];
            let bc1 = 1.0 - c.beta1.powi(t as i32);
            let bc2 = 1.0 - c.beta2.powi(t as i32);
            let mut data = p.tensor().data_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &g) in grad.iter().enumerate() {
                let g = g.to_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let w = data[j].to_f64();
                let update = m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w;
                data[j] = E::from_f64(w - c.lr * update);
            }
            p.tensor().set_data(&data);
        }
        Ok(())
    }
}
