//! Safe offline reinforcement learning on a 2D boat navigation task.
//!
//! The pipeline has four phases:
//!
//! 1. [`critics`]: reward critics by expectile regression and reachability
//!    safety critics by a discounted reach-avoid recursion, all from offline data.
//! 2. [`flow`]: a flow-matching behavior teacher trained by cloning only.
//! 3. [`actor`]: a one-step actor distilled from the teacher under a binary
//!    feasibility gate that switches between reward ascent and safety recovery.
//! 4. [`conformal`]: calibration of the safe value level `δ*` from rollouts.
//!
//! [`oracle`] solves the safety value on a grid as independent ground truth,
//! and [`pipeline`] wires everything to files and reports.

pub mod actor;
pub mod conformal;
pub mod critics;
pub mod env;
pub mod error;
pub mod flow;
pub mod instrument;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
