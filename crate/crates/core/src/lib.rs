//! Compose mixture-of-experts transformer checkpoints from dense experts of one
//! architecture, run them with a deterministic reference decoder, train their
//! routers and estimate their cost.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod analysis;
pub mod arch;
pub mod compose;
pub mod error;
pub mod naming;
pub mod runtime;
pub mod scalar;
pub mod synth;
pub mod tensorstore;
pub mod training;

pub use arch::{check_compatibility, infer_arch, ArchDescriptor, CompatReport};
pub use compose::{compose_moe, extract_expert, swap_expert, ExpertSource, MoeRecipe, RecipeSpec};
pub use error::{Error, Result};
pub use runtime::{GateDecision, Model, RoutingTrace};
pub use scalar::Scalar;
pub use tensorstore::{load_checkpoint, save_checkpoint, DType, Tensor, TensorMap, TensorSpec};

pub type Model32 = runtime::Model<f32>;
pub type Model64 = runtime::Model<f64>;
pub type Matrix32 = runtime::Matrix<f32>;
pub type Matrix64 = runtime::Matrix<f64>;
