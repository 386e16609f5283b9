//! Differentially private synthesis of offline reinforcement-learning data.
//!
//! The crate covers the whole path from raw transitions or trajectories to
//! a privately trained diffusion synthesizer and the datasets it emits:
//!
//! - [`numerics`]: tensors, seeded randomness, MLP and attention networks
//!   with reverse-mode gradients.
//! - [`diffusion`]: noise schedules, denoising objectives, ancestral sampling.
//! - [`curiosity`]: random-network-distillation novelty scores and the
//!   batch-replacement rule used during pre-training.
//! - [`dpsgd`] and [`accountant`]: clipped, noised updates and their Rényi-DP
//!   cost.
//! - [`transition`] and [`trajectory`]: the two synthesis pipelines.
//! - [`metrics`] and [`env`]: fidelity scores, a membership-inference probe,
//!   toy environments and behaviour cloning.
//! - [`io`]: binary dataset/checkpoint formats, configs and reports.
//! - [`run`]: the seeded end-to-end stages behind the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod curiosity;
pub mod diffusion;
pub mod dpsgd;
pub mod env;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod run;
pub mod trajectory;
pub mod transition;

pub use error::{Error, Result};
