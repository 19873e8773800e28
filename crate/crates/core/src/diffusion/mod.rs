//! Variance-preserving diffusion: schedule, score models, training and samplers.

mod sampler;
mod schedule;
mod score;
mod train;

pub use sampler::{
    forward_transition, node_indices, reverse_process, sample, Guidance, SamplerConfig, SamplerMethod, Unconditioned,
};
pub(crate) use sampler::sample_guided;
pub use schedule::{build_schedule, perturb_forward, NoiseLevel, NoiseSchedule};
pub use score::{
    denoise_one_step, score, time_embedding, GaussianPrior, ScoreKind, ScoreModel, ScoreNet, ALPHA_FLOOR, COV_RIDGE,
    TIME_FREQUENCIES,
};
pub use train::{dsm_loss_and_grad, dsm_loss_model, dsm_term, train_score, LossWeighting, ScoreTraining};
