use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Explicit beta table.
    Custom,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::UnknownSchedule(other.to_string())),
        }
    }
}

/// Per-step tables of the forward process. Steps are 1-based: `beta(1)` is the
/// first step, `alpha_bar(0) == 1` by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps", "need at least one diffusion step"));
        }
        let beta = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
            ScheduleKind::Custom => {
                return Err(Error::config("kind", "custom schedules need an explicit beta table"))
            }
        };
        Ok(Self::build(kind, beta))
    }

    /// Parses the kind by name (`"linear"` or `"cosine"`).
    pub fn from_name(steps: usize, kind: &str) -> Result<Self> {
        Self::new(steps, kind.parse()?)
    }

    /// Schedule from an explicit beta table; every beta must lie in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("beta", "empty table"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("beta", format!("{b} outside (0, 1)")));
        }
        Ok(Self::build(ScheduleKind::Custom, beta))
    }

    fn build(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Self {
            kind,
            beta,
            alpha_bar,
            beta_tilde,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance of `q(z_{t-1} | z_t, x)`; step 1 uses `beta(1)`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    /// Coefficients `(c_x, c_z)` of the posterior mean `c_x * x + c_z * z_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c_x = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let c_z = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c_x, c_z)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: NoiseSchedule = serde_json::from_str(&s)?;
        if raw.beta.is_empty() || raw.beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "beta table must be non-empty with entries in (0, 1)".into(),
            });
        }
        // Derived tables are rebuilt from beta so a fixture cannot disagree with itself.
        let rebuilt = Self::build(raw.kind, raw.beta.clone());
        if rebuilt
            .alpha_bar
            .iter()
            .zip(&raw.alpha_bar)
            .any(|(a, b)| (a - b).abs() > 1e-12)
            || raw.alpha_bar.len() != raw.beta.len()
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "alpha_bar disagrees with cumulative product of (1 - beta)".into(),
            });
        }
        Ok(rebuilt)
    }
}

fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let start = (1e-4 * scale).min(MAX_BETA);
    let end = (0.02 * scale).min(MAX_BETA);
    if steps == 1 {
        return vec![start];
    }
    (0..steps)
        .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2);
    (0..steps)
        .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::new(1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        assert_eq!(s.beta_tilde(1), s.beta(1));
    }

    #[test]
    fn cosine_1000_properties() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(1) > 0.999);
        assert!(s.alpha_bar(1000) < 1e-4);
        let mut acc = 1.0;
        for t in 1..=1000 {
            acc *= 1.0 - s.beta(t);
            assert!((acc - s.alpha_bar(t)).abs() <= 1e-12);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            assert!(s.beta_tilde(t) > 0.0 && s.beta_tilde(t) <= s.beta(t));
        }
    }

    #[test]
    fn unknown_kind_and_zero_steps() {
        assert!(matches!(
            NoiseSchedule::from_name(10, "sigmoid"),
            Err(Error::UnknownSchedule(_))
        ));
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let s = NoiseSchedule::new(50, ScheduleKind::Linear).unwrap();
        s.save_json(&p).unwrap();
        assert_eq!(NoiseSchedule::load_json(&p).unwrap(), s);
    }
}
