//! Hyper-parameters, their Normal-Inverse-χ² prior and the EM objective.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::WeightedSample;

/// Number of scalar blocks: `ln w`, three densities and the pooled offsets.
pub const BLOCKS: usize = 5;
pub const BLOCK_NAMES: [&str; BLOCKS] = ["w", "rho_bg", "rho_ct", "rho_tr", "s"];

/// Location and scale of every latent block. Offsets share one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub mu_w: f64,
    pub sigma_w: f64,
    pub mu_rho: [f64; 3],
    pub sigma_rho: [f64; 3],
    pub mu_s: f64,
    pub sigma_s: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.sigma_w,
            self.sigma_rho[0],
            self.sigma_rho[1],
            self.sigma_rho[2],
            self.sigma_s,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("hyper-parameter scales must be positive and finite"));
        }
        Ok(())
    }

    /// `(mu, sigma)` of block `b` (see [`BLOCK_NAMES`]).
    pub fn block(&self, b: usize) -> (f64, f64) {
        match b {
            0 => (self.mu_w, self.sigma_w),
            1..=3 => (self.mu_rho[b - 1], self.sigma_rho[b - 1]),
            4 => (self.mu_s, self.sigma_s),
            _ => panic!("block index out of range"),
        }
    }

    pub fn set_block(&mut self, b: usize, mu: f64, sigma: f64) {
        match b {
            0 => (self.mu_w, self.sigma_w) = (mu, sigma),
            1..=3 => (self.mu_rho[b - 1], self.sigma_rho[b - 1]) = (mu, sigma),
            4 => (self.mu_s, self.sigma_s) = (mu, sigma),
            _ => panic!("block index out of range"),
        }
    }

    /// `(mu, sigma)` of packed latent coordinate `d`.
    #[inline]
    pub fn coordinate(&self, d: usize) -> (f64, f64) {
        self.block(d.min(4))
    }

    /// Mean of the log-normal thickness `2 w`.
    pub fn thickness_mean(&self) -> f64 {
        2.0 * (self.mu_w + 0.5 * self.sigma_w * self.sigma_w).exp()
    }

    pub fn thickness_median(&self) -> f64 {
        2.0 * self.mu_w.exp()
    }

    pub fn thickness_sd(&self) -> f64 {
        self.thickness_mean() * (self.sigma_w * self.sigma_w).exp_m1().sqrt()
    }
}

#[inline]
pub fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

/// Log-density of a packed latent vector under `theta`.
pub fn log_latent_prior(x: &[f64], theta: &HyperParams) -> f64 {
    x.iter()
        .enumerate()
        .map(|(d, &v)| {
            let (mu, sigma) = theta.coordinate(d);
            normal_log_pdf(v, mu, sigma)
        })
        .sum()
}

/// One scalar NIχ² block: `mu | sigma^2 ~ N(mu0, sigma^2 / kappa0)`,
/// `sigma^2 ~ Inv-χ²(nu0, sigma0_sq)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NixBlock {
    pub mu0: f64,
    pub kappa0: f64,
    pub nu0: f64,
    pub sigma0_sq: f64,
}

impl NixBlock {
    pub fn new(mu0: f64, sigma0: f64) -> Self {
        Self {
            mu0,
            kappa0: 1.0,
            nu0: 1.0,
            sigma0_sq: sigma0 * sigma0,
        }
    }

    /// Posterior mode `(mu, sigma^2)` after `n` observations with mean
    /// `mean` and variance `var`.
    pub fn posterior_mode(&self, n: f64, mean: f64, var: f64) -> (f64, f64) {
        let kn = self.kappa0 + n;
        let nn = self.nu0 + n;
        let mu = (self.kappa0 * self.mu0 + n * mean) / kn;
        let scatter = self.nu0 * self.sigma0_sq + n * var + self.kappa0 * n * (mean - self.mu0).powi(2) / kn;
        (mu, scatter / (nn + 3.0))
    }

    /// Joint log-density of `(mu, sigma^2)`.
    pub fn log_density(&self, mu: f64, var: f64) -> f64 {
        let half_nu = 0.5 * self.nu0;
        let log_inv_chi2 = half_nu * (half_nu * self.sigma0_sq).ln()
            - ln_gamma(half_nu)
            - (half_nu + 1.0) * var.ln()
            - self.nu0 * self.sigma0_sq / (2.0 * var);
        normal_log_pdf(mu, self.mu0, (var / self.kappa0).sqrt()) + log_inv_chi2
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Blocks missing from a serialised prior take their default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Nix2Prior {
    pub w: NixBlock,
    pub rho_bg: NixBlock,
    pub rho_ct: NixBlock,
    pub rho_tr: NixBlock,
    pub s: NixBlock,
}

impl Default for Nix2Prior {
    fn default() -> Self {
        Self {
            w: NixBlock::new(0.1f64.ln(), 0.7),
            rho_bg: NixBlock::new(0.0, 100.0),
            rho_ct: NixBlock::new(1200.0, 60.0),
            rho_tr: NixBlock::new(150.0, 100.0),
            s: NixBlock::new(0.0, 0.3),
        }
    }
}

impl Nix2Prior {
    pub fn block(&self, b: usize) -> &NixBlock {
        match b {
            0 => &self.w,
            1 => &self.rho_bg,
            2 => &self.rho_ct,
            3 => &self.rho_tr,
            4 => &self.s,
            _ => panic!("block index out of range"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in 0..BLOCKS {
            let k = self.block(b);
            if !(k.kappa0 > 0.0 && k.nu0 > 0.0 && k.sigma0_sq > 0.0) || !k.mu0.is_finite() {
                return Err(Error::invalid(format!(
                    "prior block {} needs kappa0, nu0, sigma0_sq > 0",
                    BLOCK_NAMES[b]
                )));
            }
        }
        Ok(())
    }

    /// Starting hyper-parameters: the prior locations and scales.
    pub fn initial_theta(&self) -> HyperParams {
        let mut t = HyperParams {
            mu_w: 0.0,
            sigma_w: 1.0,
            mu_rho: [0.0; 3],
            sigma_rho: [1.0; 3],
            mu_s: 0.0,
            sigma_s: 1.0,
        };
        for b in 0..BLOCKS {
            let k = self.block(b);
            t.set_block(b, k.mu0, k.sigma0_sq.sqrt());
        }
        t
    }

    pub fn log_density(&self, theta: &HyperParams) -> f64 {
        (0..BLOCKS)
            .map(|b| {
                let (mu, sigma) = theta.block(b);
                self.block(b).log_density(mu, sigma * sigma)
            })
            .sum()
    }

    /// Midpoint of the cortical and trabecular prior locations.
    pub fn default_baseline_threshold(&self) -> f64 {
        0.5 * (self.rho_ct.mu0 + self.rho_tr.mu0)
    }

    /// Model-error SD default: 5% of the cortical-trabecular contrast.
    pub fn default_sigma_xi(&self) -> f64 {
        0.05 * (self.rho_ct.mu0 - self.rho_tr.mu0).abs()
    }
}

/// Weighted mean and variance of each block over the sample set. The offset
/// block pools every offset coordinate.
pub fn block_moments(samples: &[WeightedSample]) -> [(f64, f64); BLOCKS] {
    let mut out = [(0.0, 0.0); BLOCKS];
    for (b, slot) in out.iter_mut().enumerate().take(4) {
        let mean: f64 = samples.iter().map(|s| s.weight * s.x[b]).sum();
        let var: f64 = samples.iter().map(|s| s.weight * (s.x[b] - mean).powi(2)).sum();
        *slot = (mean, var);
    }
    let n_off = samples.first().map_or(0, |s| s.x.len() - 4);
    if n_off > 0 {
        let nf = n_off as f64;
        let mean: f64 = samples
            .iter()
            .map(|s| s.weight * s.x[4..].iter().sum::<f64>() / nf)
            .sum();
        let var: f64 = samples
            .iter()
            .map(|s| s.weight * s.x[4..].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf)
            .sum();
        out[4] = (mean, var);
    }
    out
}

/// Closed-form maximiser of `m * sum_k gamma_k ln p(x_k | theta) + ln p(theta)`.
/// The offset block sees `m * N` observations.
pub fn conjugate_map_update(samples: &[WeightedSample], prior: &Nix2Prior, pseudo_count: f64) -> HyperParams {
    let moments = block_moments(samples);
    let n_off = samples.first().map_or(0, |s| s.x.len() - 4);
    let mut theta = prior.initial_theta();
    for (b, &(mean, var)) in moments.iter().enumerate() {
        let n = if b == 4 {
            pseudo_count * n_off as f64
        } else {
            pseudo_count
        };
        let (mu, var) = prior.block(b).posterior_mode(n, mean, var);
        theta.set_block(b, mu, var.sqrt());
    }
    theta
}

/// EM objective per unit pseudo-count,
/// `sum_k gamma_k ln p(x_k | theta) + ln p(theta) / m`, and its
/// self-normalised importance-sampling standard error.
pub fn q_lower_bound(
    samples: &[WeightedSample],
    theta: &HyperParams,
    prior: &Nix2Prior,
    pseudo_count: f64,
) -> (f64, f64) {
    let vals: Vec<f64> = samples.iter().map(|s| log_latent_prior(&s.x, theta)).collect();
    let (mean, se) = weighted_mean_se(samples, &vals);
    (mean + prior.log_density(theta) / pseudo_count, se)
}

/// `Q(new) - Q(old)` on the same samples, with its standard error.
pub fn delta_q(
    samples: &[WeightedSample],
    old: &HyperParams,
    new: &HyperParams,
    prior: &Nix2Prior,
    pseudo_count: f64,
) -> (f64, f64) {
    let diffs: Vec<f64> = samples
        .iter()
        .map(|s| log_latent_prior(&s.x, new) - log_latent_prior(&s.x, old))
        .collect();
    let (mean, se) = weighted_mean_se(samples, &diffs);
    (
        mean + (prior.log_density(new) - prior.log_density(old)) / pseudo_count,
        se,
    )
}

fn weighted_mean_se(samples: &[WeightedSample], vals: &[f64]) -> (f64, f64) {
    let mean: f64 = samples.iter().zip(vals).map(|(s, v)| s.weight * v).sum();
    let var: f64 = samples
        .iter()
        .zip(vals)
        .map(|(s, v)| s.weight * s.weight * (v - mean).powi(2))
        .sum();
    (mean, var.sqrt())
}
