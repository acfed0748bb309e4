//! Reward-model ensembles for RLHF at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over f32 tensors.
//! - [`model`]: a small transformer used both as reward backbone and as
//!   policy, plus low-rank adapters and the checkpoint format.
//! - [`ensemble`]: the three ensemble architectures and mean / LCB
//!   aggregation of member predictions.
//! - [`preftrain`]: Bradley-Terry preference training, including the
//!   two-phase LoRA schedule.
//! - [`rl`]: nucleus sampling, Best-of-n selection and PPO.
//! - [`bench`]: the synthetic gold-reward environment and experiment harness.

pub mod autodiff;
pub mod bench;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod optim;
pub mod preftrain;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};

/// Token id. Ids `0..3` are reserved (see [`model::tokens`]).
pub type Token = u32;
