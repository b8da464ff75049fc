//! Deep Gaussian process surrogates fit by elliptical slice sampling within
//! Metropolis-in-Gibbs, with closed-form IMSE and ALC active learning.

pub mod acquisition;
pub mod campaign;
pub mod data;
pub mod dgp;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod sampler;
pub mod selfcheck;

pub use acquisition::{evaluate_candidates, AcqResult, Bounds, Criterion};
pub use campaign::{run_campaign, run_repetitions, Blackbox, CampaignConfig, CampaignFile, CampaignHistory};
pub use data::{Coding, Dataset};
pub use dgp::{fit, fit_from, load_model, predict, save_model, FittedModel, LatentMode, ModelConfig, PredictOptions};
pub use error::{Error, Result};
pub use gp::PredictiveMoments;
pub use kernel::{Design, KernelParams};
pub use sampler::{ChainState, Layers, PriorSet, ProposalSpec, Trace};
