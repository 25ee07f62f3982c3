//! AdamW and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// `min_lr + ½(base_lr − min_lr)(1 + cos(π·step/total_steps))`.
///
/// Steps past `total_steps` clamp to `min_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return min_lr;
    }
    let progress = step as f64 / total as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + libm::cos(PI * progress))
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, param_lens: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = param_lens
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            first_moment: m,
            second_moment: v,
        }
    }

    /// One AdamW update. `decay[i]` says whether parameter `i` receives weight
    /// decay; missing gradients count as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], decay: &[bool], lr_now: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || decay.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {} (decay flags {})",
                self.first_moment.len(),
                params.len(),
                decay.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.first_moment[i].len() {
                return Err(Error::Usage(format!(
                    "parameter {i} has {} entries, optimizer state has {}",
                    p.len(),
                    self.first_moment[i].len()
                )));
            }
            if p.grad().is_some_and(|g| g.len() != p.len()) {
                return Err(Error::Usage(format!("gradient of parameter {i} is not congruent")));
            }
        }
        if !(lr_now >= 0.0) {
            return Err(Error::Usage(format!("learning rate {lr_now} must be >= 0")));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(|g| g.to_vec());
            let shrink = if decay[i] { 1.0 - lr_now * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + eps);
                *w = *w * shrink - lr_now * update;
            }
        }
        Ok(())
    }
}
