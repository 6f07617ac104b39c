pub mod autograd;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod popnet;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
