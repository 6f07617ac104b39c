//! The conditional denoiser: a music encoder of feature/temporal attention
//! blocks and a dance decoder of spatial/temporal attention blocks joined by
//! cross-attention and the alignment module.

pub mod attention;
mod checkpoint;
mod config;
mod model;
mod params;

use ndarray::{Array2, ArrayView2};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use config::{AttentionConfig, BlockOrder};
pub use model::{sinusoidal_embedding, Mode, PopDg, NUM_TOKENS};
pub use params::{Graph, ParamId, ParamStore};

/// Per-frame music features aligned with the motion frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicFeatures {
    pub fps: u32,
    /// `frames x width`.
    pub features: Array2<f64>,
}

impl MusicFeatures {
    pub fn new(features: Array2<f64>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("music features contain non-finite values".into()));
        }
        Ok(Self { fps, features })
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Checks frame alignment against a motion of `frames` frames.
    pub fn check_aligned(&self, frames: usize) -> Result<()> {
        if self.frames() != frames {
            return Err(Error::Alignment {
                motion: frames,
                music: self.frames(),
            });
        }
        Ok(())
    }
}
