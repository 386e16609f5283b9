//! Trajectory-level synthesis: fragments linked to their predecessors, a
//! transformer denoiser over fragment tokens, and stitched generation.

mod data;
mod pipeline;
mod transformer;

pub use data::{flatten, fragment, stitch, Fragment, Trajectory};
pub use pipeline::{
    continuity_error, finetune_j, pretrain_j, synthesize_trajectories, synthesize_trajectory, SynthesizedTrajectory,
    TrajectoryModel,
};
pub use transformer::{
    add_positional, positional_embedding, sinusoid, token_count, TokenSequence, TransformerCache, TransformerDenoiser,
    TransformerSpec, COMPONENTS,
};
