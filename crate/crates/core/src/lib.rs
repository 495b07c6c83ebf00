//! Diffusion sampling engine with adaptive classifier-free guidance.
//!
//! The crate pairs exact Gaussian-mixture score oracles with a deterministic
//! DDIM sampler so that guidance strategies — full CFG, Step AG, SNR AG,
//! Similarity AG — can be compared with exact forward-pass accounting and
//! analytically verifiable quality metrics.

pub mod bench;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod mixture;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use guidance::{cfg_combine, cosine_similarity, EvalBudget, GuidanceStrategy, StepDecision};
pub use mixture::{MixtureModel, ScoreKind};
pub use sampler::{ddim_step, sample, sample_batch, SampleTrace};
pub use schedule::{make_grid, snr_crossing_step, NoiseSchedule, TimestepGrid};
