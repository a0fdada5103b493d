//! Small dense networks: init, forward/backward, Adam and EMA targets.

pub mod checkpoint;
mod linalg;
mod mlp;
mod param_set;

pub use mlp::{Activation, Dense, ForwardCache, Gradients, LayerSpec, Mlp, OUTPUT_INIT_SCALE};
pub use param_set::{ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
