//! Generative-model kernels: conditional VAE, coupling flows and
//! score-based diffusion samplers.

pub mod csd;
pub mod flow;
pub mod sde;
pub mod vae;

pub use csd::{csd_star_pipeline, csd_star_sample, CsdStarConfig, CsdStarOutput, PipelineContext};
pub use flow::{CouplingLayer, FlowStack};
pub use sde::{pc_sample, AnalyticGaussianScore, CorrectorConfig, ScoreFunction, ScoreNet, SdeSchedule};
pub use vae::{Cvae, DiagonalGaussian};
