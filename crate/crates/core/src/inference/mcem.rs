//! Ascent-based Monte Carlo EM for one patch.
//!
//! Each iteration draws an importance-sampling round under the current
//! hyper-parameters, maximises the weighted EM objective in closed form and
//! estimates the improvement `dQ` with its standard error on the same
//! samples. An update whose lower confidence bound is not positive is
//! rejected and the sample size grows; the loop stops once the upper
//! confidence bound falls below the threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bone_model::{NoiseParams, PatchModel};
use crate::error::{Error, Result};
use crate::profiles::ProfileSet;
use crate::psf::KernelBank;

use super::ais::adaptive_is_round;
use super::prior::{conjugate_map_update, delta_q, q_lower_bound, HyperParams, Nix2Prior};
use super::proposal::{laplace_proposal, LaplaceSettings, Proposal};
use super::LogLikelihood;

/// Number of observations credited to the weighted sample in the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoCount {
    /// The effective sample size of the round.
    Ess,
    Fixed(f64),
}

/// How the first proposal of a patch is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalInit {
    /// Gaussian at the latent posterior mode with the inverse Hessian.
    Laplace,
    /// Independent Gaussian at the prior locations and scales.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McemConfig {
    /// Initial sample size; `4 (N + 4)` when unset.
    pub k0: Option<usize>,
    /// Sample size cap; `512 (N + 4)` when unset.
    pub k_max: Option<usize>,
    pub growth_factor: f64,
    pub stop_threshold: f64,
    pub max_iter: usize,
    /// Normal quantile of the one-sided confidence bounds.
    pub z: f64,
    /// Weight of the previous proposal covariance in each adaptation.
    pub shrinkage: f64,
    pub pseudo_count: PseudoCount,
    pub init: ProposalInit,
    pub laplace_inflation: f64,
    /// Rebuild the Laplace proposal at the new hyper-parameters after each
    /// accepted update instead of keeping the moment-adapted one.
    pub recenter: bool,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            k0: None,
            k_max: None,
            growth_factor: 2.0,
            stop_threshold: 0.05,
            max_iter: 200,
            z: 1.645,
            shrinkage: 0.5,
            pseudo_count: PseudoCount::Ess,
            init: ProposalInit::Laplace,
            laplace_inflation: 1.0,
            recenter: true,
        }
    }
}

impl McemConfig {
    pub fn sample_sizes(&self, n_profiles: usize) -> (usize, usize) {
        let d = n_profiles + 4;
        let k0 = self.k0.unwrap_or(4 * d);
        let k_max = self.k_max.unwrap_or(512 * d).max(k0);
        (k0, k_max)
    }

    pub fn validate(&self, n_profiles: usize) -> Result<()> {
        let (k0, _) = self.sample_sizes(n_profiles);
        if k0 < n_profiles + 4 {
            return Err(Error::invalid(format!(
                "k0 = {k0} is below the latent dimension {}",
                n_profiles + 4
            )));
        }
        if !(self.growth_factor > 1.0) {
            return Err(Error::invalid("growth_factor must exceed 1"));
        }
        if !(0.0..1.0).contains(&self.shrinkage) {
            return Err(Error::invalid("shrinkage must lie in [0, 1)"));
        }
        if self.stop_threshold.is_nan() || !(self.z >= 0.0) || self.max_iter == 0 {
            return Err(Error::invalid("stop_threshold, z and max_iter must be valid"));
        }
        if !(self.laplace_inflation > 0.0) {
            return Err(Error::invalid("laplace_inflation must be positive"));
        }
        if let PseudoCount::Fixed(m) = self.pseudo_count {
            if !(m > 0.0) {
                return Err(Error::invalid("fixed pseudo-count must be positive"));
            }
        }
        Ok(())
    }
}

/// One line of the per-patch diagnostic log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub patch_id: usize,
    pub iteration: usize,
    pub k: usize,
    pub ess: f64,
    /// Objective at the proposed hyper-parameters.
    pub q_lower_bound: f64,
    pub delta_q: f64,
    pub delta_q_lower: f64,
    pub delta_q_upper: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEstimate {
    pub patch_id: usize,
    pub n_profiles: usize,
    pub theta: HyperParams,
    /// Log-normal moments of the thickness `2 w` under `theta` (mm).
    pub thickness_mean: f64,
    pub thickness_median: f64,
    pub thickness_sd: f64,
    pub iterations: usize,
    pub final_k: usize,
    pub ess: f64,
    pub delta_q_upper: f64,
    pub stop_reason: StopReason,
    pub diagnostics: Vec<IterationRecord>,
}

impl PatchEstimate {
    pub fn converged(&self) -> bool {
        self.stop_reason == StopReason::Converged
    }

    /// Diagnostics as JSON lines.
    pub fn diagnostics_jsonl(&self) -> String {
        self.diagnostics
            .iter()
            .map(|r| serde_json::to_string(r).expect("serialisable record") + "\n")
            .collect()
    }
}

/// MCEM over an arbitrary likelihood. `init(theta, start)` builds a proposal
/// for given hyper-parameters, optionally near a previous posterior
/// location; it is called at the start, when the weights degenerate and,
/// with `recenter`, after each accepted update.
pub fn mcem_estimate<L: LogLikelihood + ?Sized>(
    target: &L,
    patch_id: usize,
    prior: &Nix2Prior,
    cfg: &McemConfig,
    seed: u64,
    init: impl Fn(&HyperParams, Option<&[f64]>) -> Proposal,
) -> Result<PatchEstimate> {
    let n = target.profile_count();
    cfg.validate(n)?;
    prior.validate()?;
    let (k0, k_max) = cfg.sample_sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = prior.initial_theta();
    let mut q = init(&theta, None);
    let mut k = k0;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIter;
    let mut last_ess = 0.0;
    let mut last_upper = f64::INFINITY;

    for iteration in 1..=cfg.max_iter {
        let mut attempt = 0;
        let round = loop {
            match adaptive_is_round(target, &theta, &q, k, cfg.shrinkage, &mut rng) {
                Ok(r) => break r,
                Err(Error::DegenerateWeights { ess }) if attempt < 4 => {
                    attempt += 1;
                    log::debug!("patch {patch_id}: ESS {ess:.2}, rebuilding proposal (attempt {attempt})");
                    q = init(&theta, None).widened(2f64.powi(attempt));
                }
                Err(e) => return Err(e),
            }
        };
        let m = match cfg.pseudo_count {
            PseudoCount::Ess => round.ess,
            PseudoCount::Fixed(m) => m,
        };
        let proposed = conjugate_map_update(&round.samples, prior, m);
        let (dq, se) = delta_q(&round.samples, &theta, &proposed, prior, m);
        let (lower, upper) = (dq - cfg.z * se, dq + cfg.z * se);
        let accepted = lower > 0.0;
        let (q_new, _) = q_lower_bound(&round.samples, &proposed, prior, m);
        records.push(IterationRecord {
            patch_id,
            iteration,
            k,
            ess: round.ess,
            q_lower_bound: q_new,
            delta_q: dq,
            delta_q_lower: lower,
            delta_q_upper: upper,
            accepted,
        });
        last_ess = round.ess;
        last_upper = upper;
        q = round.proposal;
        if accepted {
            theta = proposed;
            if cfg.recenter {
                q = init(&theta, Some(q.mean()));
            }
        }
        if upper < cfg.stop_threshold && (accepted || k == k_max) {
            stop = StopReason::Converged;
            break;
        }
        if !accepted {
            k = ((k as f64 * cfg.growth_factor).ceil() as usize).min(k_max);
        }
    }

    Ok(PatchEstimate {
        patch_id,
        n_profiles: n,
        theta,
        thickness_mean: theta.thickness_mean(),
        thickness_median: theta.thickness_median(),
        thickness_sd: theta.thickness_sd(),
        iterations: records.len(),
        final_k: k,
        ess: last_ess,
        delta_q_upper: last_upper,
        stop_reason: stop,
        diagnostics: records,
    })
}

/// MCEM for the profiles of one patch.
pub fn mcem_estimate_patch(
    profiles: &ProfileSet,
    bank: &KernelBank,
    noise: NoiseParams,
    prior: &Nix2Prior,
    cfg: &McemConfig,
    seed: u64,
) -> Result<PatchEstimate> {
    if profiles.is_empty() {
        return Err(Error::EmptyPatch(profiles.patch_id));
    }
    let model = PatchModel::new(profiles, bank, noise)?;
    let s_limit = 0.5 * model.half_length();
    let settings = LaplaceSettings {
        inflation: cfg.laplace_inflation,
        ..LaplaceSettings::default()
    };
    let mcem_cfg = McemConfig {
        recenter: cfg.recenter && cfg.init == ProposalInit::Laplace,
        ..*cfg
    };
    mcem_estimate(
        &model,
        profiles.patch_id,
        prior,
        &mcem_cfg,
        seed,
        |theta, start| match cfg.init {
            ProposalInit::Laplace => laplace_proposal(&model, theta, settings, s_limit, start),
            ProposalInit::Prior => Proposal::from_prior(theta, model.len()),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bone_model::mean_profile;
    use crate::profiles::Profile;
    use crate::psf::{fwhm_to_sigma, Aperture, PsfComponent, PsfModel};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn bank() -> KernelBank {
        let m = PsfModel::new(
            vec![
                PsfComponent {
                    a: 0.8,
                    b: 0.0,
                    c: 0.75,
                },
                PsfComponent {
                    a: 0.2,
                    b: 0.0,
                    c: 0.45,
                },
            ],
            fwhm_to_sigma(1.0),
        )
        .unwrap();
        KernelBank::new(m, 0.001, Aperture::default())
    }

    /// Profiles of a plate with half-width `w` and white noise `sd`.
    fn synthetic(bank: &KernelBank, n: usize, w: f64, sd: f64, seed: u64) -> ProfileSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts: Vec<f64> = (-25..=25).map(|i| i as f64 * 0.1).collect();
        let profiles = (0..n)
            .map(|i| {
                let alpha = 90.0 * i as f64 / (n - 1).max(1) as f64;
                let s = 0.1 * rng.sample::<f64, _>(StandardNormal);
                let mean = mean_profile(&bank.kernel(alpha), w, s, [0.0, 1200.0, 200.0], &ts);
                let values = mean
                    .iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Profile::new(0, i, alpha, ts.clone(), values).unwrap()
            })
            .collect();
        ProfileSet {
            patch_id: 0,
            profiles,
            dropped: 0,
        }
    }

    fn noise(sd: f64) -> NoiseParams {
        NoiseParams::new(0.0, sd).unwrap()
    }

    #[test]
    fn recovers_patch_thickness() {
        let b = bank();
        let set = synthetic(&b, 10, 0.15, 15.0, 3);
        let est =
            mcem_estimate_patch(&set, &b, noise(15.0), &Nix2Prior::default(), &McemConfig::default(), 11).unwrap();
        let rel = (est.thickness_mean - 0.3) / 0.3;
        assert!(rel.abs() < 0.10, "{} ({rel:+.3})", est.thickness_mean);
        assert!(est.converged());
        for r in est.diagnostics.iter().filter(|r| r.accepted) {
            assert!(r.delta_q_lower > 0.0);
        }
    }

    #[test]
    fn infinite_threshold_stops_after_first_acceptance() {
        let b = bank();
        let set = synthetic(&b, 5, 0.1, 15.0, 4);
        let cfg = McemConfig {
            stop_threshold: f64::INFINITY,
            ..McemConfig::default()
        };
        let est = mcem_estimate_patch(&set, &b, noise(15.0), &Nix2Prior::default(), &cfg, 1).unwrap();
        let first = est
            .diagnostics
            .iter()
            .position(|r| r.accepted || r.k == cfg.sample_sizes(5).1)
            .unwrap();
        assert_eq!(est.iterations, first + 1);
    }

    #[test]
    fn deterministic_for_seed() {
        let b = bank();
        let set = synthetic(&b, 6, 0.12, 20.0, 5);
        let run =
            || mcem_estimate_patch(&set, &b, noise(20.0), &Nix2Prior::default(), &McemConfig::default(), 77).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn replicated_profiles_contract_sigma_w() {
        let b = bank();
        let base = synthetic(&b, 5, 0.15, 20.0, 6);
        let mut rep = base.clone();
        rep.profiles = (0..10).flat_map(|_| base.profiles.clone()).collect();
        let cfg = McemConfig::default();
        let one = mcem_estimate_patch(&base, &b, noise(20.0), &Nix2Prior::default(), &cfg, 2).unwrap();
        let ten = mcem_estimate_patch(&rep, &b, noise(20.0), &Nix2Prior::default(), &cfg, 2).unwrap();
        assert!(
            ten.theta.sigma_w < one.theta.sigma_w,
            "{} vs {}",
            ten.theta.sigma_w,
            one.theta.sigma_w
        );
    }

    #[test]
    fn prior_initialisation_degenerates_on_sharp_likelihoods() {
        let b = bank();
        let set = synthetic(&b, 3, 0.15, 15.0, 8);
        let cfg = McemConfig {
            init: ProposalInit::Prior,
            max_iter: 5,
            ..McemConfig::default()
        };
        let r = mcem_estimate_patch(&set, &b, noise(15.0), &Nix2Prior::default(), &cfg, 3);
        assert!(matches!(r, Err(Error::DegenerateWeights { .. })));
    }

    #[test]
    fn diagnostics_are_json_lines() {
        let b = bank();
        let set = synthetic(&b, 3, 0.15, 15.0, 9);
        let est = mcem_estimate_patch(&set, &b, noise(15.0), &Nix2Prior::default(), &McemConfig::default(), 4).unwrap();
        let text = est.diagnostics_jsonl();
        assert_eq!(text.lines().count(), est.iterations);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "iteration",
            "k",
            "ess",
            "q_lower_bound",
            "delta_q_lower",
            "delta_q_upper",
            "accepted",
        ] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn config_validation() {
        let cfg = McemConfig {
            k0: Some(3),
            ..McemConfig::default()
        };
        assert!(cfg.validate(4).is_err());
        assert_eq!(McemConfig::default().sample_sizes(10), (56, 7168));
        let parsed: McemConfig = serde_json::from_str(r#"{"pseudo_count": {"fixed": 3.0}, "init": "prior"}"#).unwrap();
        assert_eq!(parsed.pseudo_count, PseudoCount::Fixed(3.0));
        assert!(serde_json::from_str::<McemConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
