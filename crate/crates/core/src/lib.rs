//! Slot-conditioned licence plate recognition on synthetic degraded plates,
//! built on a small reverse-mode autodiff tape.

pub mod error;
pub mod evaluator;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use evaluator::{AblationReport, EvalReport};
pub use model::{LoraConfig, Mode, Model, ModelConfig};
pub use params::ParamStore;
pub use synth::{Dataset, GrayImage, PlateLayout, Profile};
pub use tensor::{Tensor, TensorError};
pub use trainer::{Checkpoint, RunConfig};
