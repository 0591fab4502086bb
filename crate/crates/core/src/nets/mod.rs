//! Parameterised differentiable functions and the parameter store they read from.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{write_atomic, Checkpoint};
pub use model::{to_absolute, AttentionNorm, EncoderParams, MlpParams, Model, ModelConfig, RefineParams};
pub use params::{Graph, ParamGrads, ParamId, ParamStore};
