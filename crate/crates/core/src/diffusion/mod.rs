//! Denoising diffusion: schedules, corruption, training objectives and
//! ancestral sampling.

mod denoiser;
mod objective;
mod sampler;
mod schedule;

pub use denoiser::{pack_inputs, Denoiser, MlpDenoiser, MlpDenoiserCache, MlpDenoiserSpec};
pub use objective::{conditional_loss, diffusion_loss, example_losses, NoisedBatch, Penalty};
pub use sampler::{sample, sample_step, SAMPLE_CHUNK};
pub use schedule::{noise_data, MeanForm, NoiseSchedule};
