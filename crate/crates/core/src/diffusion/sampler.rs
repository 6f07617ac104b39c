use std::collections::VecDeque;

use rand::Rng;

/// Number of recent `L_t^2` values kept per timestep.
pub const VLB_HISTORY: usize = 10;
const UNIFORM_MIX: f64 = 0.001;

/// Importance sampler over timesteps with `p_t ∝ sqrt(E[L_t^2])`.
///
/// Sampling is uniform until every timestep has a full history. Single-writer:
/// only the training loop calls [`VlbSampler::record`].
#[derive(Debug, Clone)]
pub struct VlbSampler {
    history: Vec<VecDeque<f64>>,
    warm_count: usize,
}

impl VlbSampler {
    pub fn new(steps: usize) -> Self {
        Self {
            history: vec![VecDeque::with_capacity(VLB_HISTORY); steps],
            warm_count: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    pub fn is_warm(&self) -> bool {
        self.warm_count == self.history.len()
    }

    /// Records a fresh `L_t` for 1-based step `t`.
    pub fn record(&mut self, t: usize, loss: f64) {
        let h = &mut self.history[t - 1];
        let was_full = h.len() == VLB_HISTORY;
        if was_full {
            h.pop_front();
        }
        h.push_back(loss * loss);
        if !was_full && h.len() == VLB_HISTORY {
            self.warm_count += 1;
        }
    }

    /// Current sampling distribution (index `t - 1`).
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.history.len() as f64;
        if !self.is_warm() {
            return vec![1.0 / n; self.history.len()];
        }
        let w: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return vec![1.0 / n; self.history.len()];
        }
        w.iter()
            .map(|x| x / total * (1.0 - UNIFORM_MIX) + UNIFORM_MIX / n)
            .collect()
    }

    /// Draws a 1-based timestep and returns it with its probability.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, f64) {
        let p = self.probabilities();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return (i + 1, pi);
            }
        }
        (p.len(), p[p.len() - 1])
    }
}
