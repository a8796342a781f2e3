//! One round of adaptive importance sampling.

use rand::Rng;

use crate::error::{Error, Result};

use super::prior::{log_latent_prior, HyperParams};
use super::proposal::Proposal;
use super::{LogLikelihood, WeightedSample};

#[derive(Debug, Clone)]
pub struct IsRound {
    pub samples: Vec<WeightedSample>,
    /// Proposal moment-matched to the weighted samples.
    pub proposal: Proposal,
    pub ess: f64,
}

/// `1 / sum w^2` of normalised weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Draws `k` samples from `q`, weights them against the unnormalised
/// posterior under `theta` and adapts the proposal.
pub fn adaptive_is_round<L: LogLikelihood + ?Sized, R: Rng + ?Sized>(
    target: &L,
    theta: &HyperParams,
    q: &Proposal,
    k: usize,
    shrinkage: f64,
    rng: &mut R,
) -> Result<IsRound> {
    let d = target.profile_count() + 4;
    if q.dim() != d {
        return Err(Error::invalid("proposal dimension does not match the patch"));
    }
    if k < d {
        return Err(Error::invalid(format!(
            "sample size {k} is below the latent dimension {d}"
        )));
    }
    let mut samples: Vec<WeightedSample> = q
        .sample_many(k, rng)
        .into_iter()
        .map(|(x, log_proposal)| {
            let lt = target.log_likelihood(&x) + log_latent_prior(&x, theta);
            WeightedSample {
                x,
                log_target: if lt.is_nan() { f64::NEG_INFINITY } else { lt },
                log_proposal,
                weight: 0.0,
            }
        })
        .collect();
    let max = samples
        .iter()
        .map(|s| s.log_target - s.log_proposal)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights { ess: 0.0 });
    }
    let mut total = 0.0;
    for s in &mut samples {
        s.weight = (s.log_target - s.log_proposal - max).exp();
        total += s.weight;
    }
    for s in &mut samples {
        s.weight /= total;
    }
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let ess = effective_sample_size(&weights);
    if ess < 2.0 {
        return Err(Error::DegenerateWeights { ess });
    }
    let xs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let proposal = q.adapted(&xs, &weights, shrinkage);
    Ok(IsRound { samples, proposal, ess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::prior::normal_log_pdf;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Flat(usize);

    impl LogLikelihood for Flat {
        fn profile_count(&self) -> usize {
            self.0
        }
        fn log_likelihood(&self, _: &[f64]) -> f64 {
            0.0
        }
    }

    /// One Gaussian observation `y` of `ln w` with SD `tau`.
    struct Observed {
        y: f64,
        tau: f64,
    }

    impl LogLikelihood for Observed {
        fn profile_count(&self) -> usize {
            1
        }
        fn log_likelihood(&self, x: &[f64]) -> f64 {
            normal_log_pdf(self.y, x[0], self.tau)
        }
    }

    fn theta() -> HyperParams {
        HyperParams {
            mu_w: -2.0,
            sigma_w: 0.5,
            mu_rho: [0.0, 1200.0, 150.0],
            sigma_rho: [100.0, 60.0, 100.0],
            mu_s: 0.0,
            sigma_s: 0.3,
        }
    }

    #[test]
    fn proposal_equal_to_target_gives_uniform_weights() {
        let t = theta();
        let q = Proposal::from_prior(&t, 3);
        let r = adaptive_is_round(&Flat(3), &t, &q, 50, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &r.samples {
            assert!((s.weight - 1.0 / 50.0).abs() < 1e-12);
        }
        assert!((r.ess - 50.0).abs() < 1e-9);
    }

    #[test]
    fn conjugate_posterior_mean() {
        let t = theta();
        let obs = Observed { y: -1.6, tau: 0.3 };
        let post_prec = 1.0 / (t.sigma_w * t.sigma_w) + 1.0 / (obs.tau * obs.tau);
        let post_mean = (t.mu_w / (t.sigma_w * t.sigma_w) + obs.y / (obs.tau * obs.tau)) / post_prec;
        let mut q = Proposal::from_prior(&t, 1);
        let mut cov = q.cov().clone();
        cov[(0, 0)] = 0.6 * 0.6;
        q = Proposal::new(q.mean().to_vec(), cov).unwrap();
        let r = adaptive_is_round(&obs, &t, &q, 10_000, 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mean: f64 = r.samples.iter().map(|s| s.weight * s.x[0]).sum();
        assert!(
            (mean - post_mean).abs() < 0.02 * post_mean.abs(),
            "{mean} vs {post_mean}"
        );
        // the adapted proposal moves toward the posterior
        assert!((r.proposal.mean()[0] - post_mean).abs() < 0.05);
    }

    #[test]
    fn deterministic() {
        let t = theta();
        let q = Proposal::from_prior(&t, 2);
        let a = adaptive_is_round(&Flat(2), &t, &q, 40, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = adaptive_is_round(&Flat(2), &t, &q, 40, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.proposal, b.proposal);
    }

    #[test]
    fn weights_normalised_and_ess_bounded() {
        let t = theta();
        let obs = Observed { y: -1.0, tau: 0.1 };
        let q = Proposal::from_prior(&t, 1);
        let r = adaptive_is_round(&obs, &t, &q, 400, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let sum: f64 = r.samples.iter().map(|s| s.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(r.ess >= 1.0 && r.ess <= 400.0);
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let t = theta();
        let obs = Observed { y: 3.0, tau: 1e-3 };
        let q = Proposal::new(vec![-2.0, 0.0, 1200.0, 150.0, 0.0], DMatrix::identity(5, 5) * 1e-4).unwrap();
        let r = adaptive_is_round(&obs, &t, &q, 20, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(r, Err(Error::DegenerateWeights { .. })));
    }

    #[test]
    fn too_few_samples() {
        let t = theta();
        let q = Proposal::from_prior(&t, 4);
        assert!(adaptive_is_round(&Flat(4), &t, &q, 7, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
