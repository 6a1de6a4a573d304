use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Real;

/// Adam hyperparameters. `clip_norm` rescales the global gradient norm
/// before the update when set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: ParamSet<T>,
    v: ParamSet<T>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        Self { cfg, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        assert_eq!(params.len(), grads.len(), "gradient layout");
        self.step += 1;
        let clip = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.cfg.lr * bc2.sqrt() / bc1);
        let (b1t, b2t, eps, clip) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps * bc2.sqrt()), T::lit(clip));
        let one = T::one();
        for (pi, p) in params.params.iter_mut().enumerate() {
            let g = &grads.params[pi].data;
            let m = &mut self.m.params[pi].data;
            let v = &mut self.v.params[pi].data;
            for i in 0..p.data.len() {
                let gi = g[i] * clip;
                m[i] = b1t * m[i] + (one - b1t) * gi;
                v[i] = b2t * v[i] + (one - b2t) * gi * gi;
                p.data[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSetBuilder;

    #[test]
    fn minimises_a_quadratic() {
        let mut b = ParamSetBuilder::<f64>::new(0);
        let id = b.push("x", &[2], vec![3.0, -2.0]);
        let mut ps = b.finish();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, clip_norm: None, ..Default::default() }, &ps);
        for _ in 0..2000 {
            let mut g = ps.zeros_like();
            for i in 0..2 {
                g.get_mut(id)[i] = 2.0 * (ps.get(id)[i] - 1.0);
            }
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(id).iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
