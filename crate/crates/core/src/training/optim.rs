use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adan,
    Adam,
}

/// Optimizer hyperparameters. Adan uses all three betas (gradient, gradient
/// difference, squared update); Adam uses the first and third.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 3],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adan,
            lr: 1e-3,
            betas: [0.98, 0.92, 0.99],
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(0.0 < *b && *b < 1.0)) {
            return Err(Error::config("betas", format!("each must be in (0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Array2<f64>,
    diff: Array2<f64>,
    n: Array2<f64>,
    prev_grad: Array2<f64>,
}

/// Stateful optimizer over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        let slots = shapes
            .iter()
            .map(|&s| Slot {
                m: Array2::zeros(s),
                diff: Array2::zeros(s),
                n: Array2::zeros(s),
                prev_grad: Array2::zeros(s),
            })
            .collect();
        Ok(Self { config, step: 0, slots })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.slots.len(), "parameter count");
        assert_eq!(grads.len(), self.slots.len(), "gradient count");
        self.step += 1;
        let c = self.config;
        let k = self.step as i32;
        let [b1, b2, b3] = c.betas;
        let (bc1, bc2, bc3) = (1.0 - b1.powi(k), 1.0 - b2.powi(k), 1.0 - b3.powi(k));
        let first = self.step == 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            match c.kind {
                OptimizerKind::Adan => {
                    if first {
                        s.prev_grad.assign(g);
                    }
                    Zip::from(&mut *p)
                        .and(g)
                        .and(&mut s.m)
                        .and(&mut s.diff)
                        .and(&mut s.n)
                        .and(&mut s.prev_grad)
                        .for_each(|p, &g, m, d, n, pg| {
                            let delta = g - *pg;
                            let u = g + b2 * delta;
                            *m = b1 * *m + (1.0 - b1) * g;
                            *d = b2 * *d + (1.0 - b2) * delta;
                            *n = b3 * *n + (1.0 - b3) * u * u;
                            let denom = (*n / bc3).sqrt() + c.eps;
                            let update = (*m / bc1 + b2 * *d / bc2) / denom;
                            *p = *p * (1.0 - c.lr * c.weight_decay) - c.lr * update;
                            *pg = g;
                        });
                }
                OptimizerKind::Adam => {
                    Zip::from(&mut *p)
                        .and(g)
                        .and(&mut s.m)
                        .and(&mut s.n)
                        .for_each(|p, &g, m, n| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *n = b3 * *n + (1.0 - b3) * g * g;
                            let update = (*m / bc1) / ((*n / bc3).sqrt() + c.eps);
                            *p = *p * (1.0 - c.lr * c.weight_decay) - c.lr * update;
                        });
                }
            }
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is g / |g| per element
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            eps: 1e-300,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &[(1, 2)]).unwrap();
        let mut p = vec![array![[1.0, -2.0]]];
        opt.step(&mut p, &[array![[0.3, -5.0]]]);
        assert!((p[0][[0, 0]] - (1.0 - 1e-3)).abs() < 1e-15);
        assert!((p[0][[0, 1]] - (-2.0 + 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn adan_first_step_matches_hand_value() {
        // step 1: diff = 0, m_hat = g, n_hat = g^2, update = g / |g|
        let cfg = OptimizerConfig { eps: 1e-300, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &[(1, 1)]).unwrap();
        let mut p = vec![array![[0.5]]];
        opt.step(&mut p, &[array![[2.0]]]);
        assert!((p[0][[0, 0]] - (0.5 - 1e-3)).abs() < 1e-15);

        // step 2 by hand
        let (b1, b2, b3) = (0.98f64, 0.92f64, 0.99f64);
        let (g1, g2) = (2.0f64, -1.0f64);
        let m = b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2;
        let d = (1.0 - b2) * (g2 - g1);
        let u1 = g1;
        let u2 = g2 + b2 * (g2 - g1);
        let n = b3 * (1.0 - b3) * u1 * u1 + (1.0 - b3) * u2 * u2;
        let upd = (m / (1.0 - b1 * b1) + b2 * d / (1.0 - b2 * b2)) / (n / (1.0 - b3 * b3)).sqrt();
        let want = 0.5 - 1e-3 - 1e-3 * upd;
        opt.step(&mut p, &[array![[g2]]]);
        assert!((p[0][[0, 0]] - want).abs() < 1e-15);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for kind in [OptimizerKind::Adan, OptimizerKind::Adam] {
            let cfg = OptimizerConfig { kind, lr: 0.05, ..Default::default() };
            let mut opt = Optimizer::new(cfg, &[(1, 3)]).unwrap();
            let target = array![[1.0, -2.0, 0.5]];
            let mut p = vec![Array2::zeros((1, 3))];
            for _ in 0..2000 {
                let g = 2.0 * (&p[0] - &target);
                opt.step(&mut p, &[g]);
            }
            assert!((&p[0] - &target).iter().all(|d| d.abs() < 1e-2), "{kind:?}: {:?}", p[0]);
        }
    }

    #[test]
    fn clipping_rescales_globally() {
        let mut g = vec![array![[3.0]], array![[4.0, 0.0]]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig { lr: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig { betas: [0.9, 1.0, 0.99], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
