//! Arrays, randomness, small networks and their gradients.

mod attention;
mod autodiff;
mod layers;
mod mlp;
mod optim;
mod params;
mod rng;
mod tensor;

pub use attention::{AttentionCache, AttentionSpec, AttentionStack};
pub use autodiff::{grad, grad_of_rows, gradient_check, per_example_grads, GradientCheck, Network, RowLoss};
pub use layers::{activate, activate_backward, gemm, Activation, LayerNorm, LayerNormCache, Linear};
pub use mlp::{Mlp, MlpCache, MlpLayout, NetworkSpec};
pub use optim::{Optimizer, OptimizerKind};
pub use params::ParamSet;
pub use rng::{gaussian, SeededRng};
pub use tensor::Tensor;
