//! Inpainting localization by conditional diffusion over a binary mask.
//!
//! A pyramid transformer reads the image together with the noisy mask `x_t`; semantic and edge
//! conditions built from its features guide a U-shaped denoiser that predicts the clean mask
//! and its boundary. Sampling runs a short reverse chain from pure noise.

pub mod backbone;
pub mod conditions;
pub mod data;
pub mod denoiser;
pub mod dmfe;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedule;

pub use candle_core::{DType, Device, Tensor};
pub use data::{AttackKind, AttackSpec, Sample};
pub use error::{Error, Result};
pub use eval::{pixel_auc, EvalReport};
pub use model::{LocalizationModel, ModelConfig};
pub use pipeline::{Checkpoint, SampleTrace, SamplerConfig, TrainConfig, Trainer};
pub use schedule::DiffusionSchedule;
