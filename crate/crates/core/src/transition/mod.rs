//! Transition-level synthesis: data layout, encoding, and the pre-train,
//! fine-tune and sample pipeline.

mod data;
mod pipeline;

pub use data::{
    argmax_decode, denormalize, encode_rows, normalize, one_hot_encode, settle_terminal, DiscreteColumn, Encoded,
    NormStats, Schema, TransitionDataset, STD_FLOOR,
};
pub use pipeline::{
    finetune, finetune_planned, pretrain, synthesize_transitions, synthesize_transitions_fast, DraftBounds,
    PipelineConfig, StatsSource, TrainLog, TransitionModel, UpdateRule, CURIOSITY_STREAM,
};
