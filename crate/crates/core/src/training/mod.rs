//! Router training: loss, reverse-mode gradients, gradient checks and the training loop.

pub mod backprop;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod synthetic;
pub mod trainer;

pub use backprop::{grad, GradMap, Trainable};
pub use data::{load_corpus, Batch, Regime, Sequence};
pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckReport};
pub use loss::lm_loss;
pub use trainer::{train_routers, write_trained, LossCurve, Optimizer, TrainConfig};
