//! Adam with decoupled weight decay and the L2,1 proximal map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{column_norms, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    1e-6
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update. `decay[i]` selects whether parameter `i` receives the
    /// decoupled weight decay `p -= lr·wd·p` before the moment step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], decay: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} tensors, got {} params / {} grads / {} decay flags",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Dimension(format!("gradient {i} has the wrong length")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: self.step as usize,
                    reason: format!("non-finite gradient in parameter {i}"),
                    record: Box::default(),
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay[i] { lr * weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= wd * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Block soft-threshold per column: `W₍:,ⱼ₎ ← max(0, 1 − η/‖W₍:,ⱼ₎‖)·W₍:,ⱼ₎`.
pub fn prox_l21(w: &Tensor, eta: f64) -> Result<Tensor> {
    let mut out = w.clone();
    prox_l21_in_place(&mut out, eta)?;
    Ok(out)
}

pub fn prox_l21_in_place(w: &mut Tensor, eta: f64) -> Result<()> {
    if !(eta >= 0.0) {
        return Err(Error::Parameter(format!("prox step must be ≥ 0, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(());
    }
    let (r, c) = w.dims2()?;
    let norms = column_norms(w.data(), r, c);
    let factors: Vec<f64> = norms
        .iter()
        .map(|&n| if n <= eta { 0.0 } else { 1.0 - eta / n })
        .collect();
    for (k, x) in w.data_mut().iter_mut().enumerate() {
        *x *= factors[k % c];
    }
    Ok(())
}
