//! Hyper-parameter estimation for one patch.
//!
//! The latent vector `x = (ln w, rho, s)` is integrated out by self-normalised
//! importance sampling from an adapted Gaussian proposal; the hyper-parameters
//! `theta` are updated in closed form under a Normal-Inverse-χ² prior, and an
//! ascent-based Monte Carlo EM loop grows the sample size when the
//! improvement cannot be distinguished from Monte Carlo noise.

mod ais;
mod mcem;
mod prior;
mod proposal;

pub use ais::{adaptive_is_round, effective_sample_size, IsRound};
pub use mcem::{
    mcem_estimate, mcem_estimate_patch, IterationRecord, McemConfig, PatchEstimate, ProposalInit, PseudoCount,
    StopReason,
};
pub use prior::{
    block_moments, conjugate_map_update, delta_q, log_latent_prior, normal_log_pdf, q_lower_bound, HyperParams,
    Nix2Prior, NixBlock, BLOCKS, BLOCK_NAMES,
};
pub use proposal::{laplace_proposal, posterior_mode, LaplaceSettings, Proposal};

use serde::{Deserialize, Serialize};

use crate::bone_model::PatchModel;

/// A latent draw with its self-normalised importance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    /// Packed latent vector, see [`crate::bone_model::LatentState::to_vec`].
    pub x: Vec<f64>,
    /// Unnormalised log posterior `ln p(Z | x) + ln p(x | theta)`.
    pub log_target: f64,
    pub log_proposal: f64,
    pub weight: f64,
}

impl WeightedSample {
    pub fn latent(&self) -> crate::bone_model::LatentState {
        crate::bone_model::LatentState::from_slice(&self.x)
    }
}

/// Log-likelihood of packed latent vectors.
pub trait LogLikelihood {
    /// Number of per-profile offsets.
    fn profile_count(&self) -> usize;
    fn log_likelihood(&self, x: &[f64]) -> f64;
}

impl LogLikelihood for PatchModel {
    fn profile_count(&self) -> usize {
        self.len()
    }

    fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.log_likelihood_packed(x)
    }
}
