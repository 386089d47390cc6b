//! Diffusion schedules, reverse samplers and sparse-view guidance.

mod guidance;
mod sampling;
mod schedule;

pub use guidance::{
    apply_sparse_guidance, guidance_registry, guidance_weight, lambda_worst_case_bound, optimal_lambda,
    optimal_lambda_oracle, temporal_weight, GuidanceConfig, GuidanceContext, GuidanceMode, GuidanceSchedule,
    GuidedEstimate, LambdaInputs,
};
pub use sampling::{cfg_combine, ddim_sigma, ddim_step, ddpm_posterior_mean, forward_noising, noise_with, predict_x0};
pub use schedule::{NoiseSchedule, VeSchedule};
