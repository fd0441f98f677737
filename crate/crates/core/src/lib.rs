//! Score-distillation laboratory.
//!
//! Gradient rules for SDS-family distillation (SDS, NFSD, CSD, Bridge, a
//! fixed-coefficient TNP variant and target-balanced distillation with a
//! closed-form min-norm weighting) evaluated against a pluggable noise
//! prediction oracle. The analytic oracle answers exactly for diagonal
//! Gaussian mixtures; the remote oracle speaks a newline-delimited JSON
//! protocol so a real denoiser can sit behind the same rule engine.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod optim;
pub mod oracle;
pub mod rules;
pub mod validate;
pub mod vector;

pub use diffusion::{NoiseSchedule, Timestep};
pub use error::{Error, Result};
pub use harness::{Metrics, RunRecord};
pub use optim::{RunConfig, StepTrace};
pub use oracle::{AnalyticOracle, GaussianComponent, GaussianMixtureScene, ScoreOracle, Slot};
pub use rules::{FactorSchedule, GuidanceTerms, MgdaResult, RuleConfig};
