//! Reweighted wake-sleep training for deep directed generative models over
//! binary variables.
//!
//! A generative model `p(x, h)` is a stack of conditional layers with an
//! unconditioned top layer; an inference model `q(h | x)` runs the other way
//! and serves as an importance-sampling proposal. Both are trained from the
//! same self-normalized importance weights.

pub mod analysis;
pub mod data;
pub mod error;
pub mod estimators;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod training;

pub use error::{Result, RwsError};
pub use estimators::{ImportanceBatch, NormalizedWeights, Proposal};
pub use layers::{Layer, LayerFamily, ParamGradient};
pub use model::{GenerativeModel, InferenceModel, LatentConfig, ModelSpec, StackGradient};
pub use numerics::RngStream;
pub use training::{QUpdateMode, TrainConfig};
