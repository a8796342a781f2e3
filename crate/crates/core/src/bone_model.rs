//! Plate model of the cortex and the Gaussian-process profile likelihood.
//!
//! A profile through a plate of half-width `w` centered at offset `s` is
//! `rho_BG` before the plate, `rho_Ct` inside and `rho_Tr` after it. The
//! measured profile is that step function blurred by the angle-dependent
//! kernel `g`, plus blurred measurement noise and white model error:
//!
//! ```text
//! z(t) = (y * g)(t) + (g * eps)(t) + xi(t)
//! C_ij = sigma_eps^2 (g * g)(t_i - t_j) + sigma_xi^2 delta_ij
//! ```

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{Profile, ProfileSet};
use crate::psf::{DiscreteKernel, KernelBank};

/// Coalesced latent vector `(ln w, rho_BG, rho_Ct, rho_Tr, s_1..s_N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub ln_w: f64,
    pub rho: [f64; 3],
    pub offsets: Vec<f64>,
}

impl LatentState {
    pub fn new(ln_w: f64, rho: [f64; 3], offsets: Vec<f64>) -> Self {
        Self { ln_w, rho, offsets }
    }

    pub fn dim(&self) -> usize {
        self.offsets.len() + 4
    }

    pub fn half_width(&self) -> f64 {
        self.ln_w.exp()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.ln_w);
        v.extend_from_slice(&self.rho);
        v.extend_from_slice(&self.offsets);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 4, "latent vector needs at least 4 entries");
        Self {
            ln_w: v[0],
            rho: [v[1], v[2], v[3]],
            offsets: v[4..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_eps: f64,
    pub sigma_xi: f64,
}

impl NoiseParams {
    pub fn new(sigma_eps: f64, sigma_xi: f64) -> Result<Self> {
        if !(sigma_eps >= 0.0 && sigma_xi >= 0.0) || !sigma_eps.is_finite() || !sigma_xi.is_finite() {
            return Err(Error::invalid("noise SDs must be finite and >= 0"));
        }
        if sigma_eps == 0.0 && sigma_xi == 0.0 {
            return Err(Error::invalid("sigma_eps and sigma_xi cannot both be 0"));
        }
        Ok(Self { sigma_eps, sigma_xi })
    }

    /// Pre-blur noise SD that produces a post-blur voxel SD of `background_sd`
    /// under `kernel`, since `Var(g * eps) = sigma_eps^2 (g * g)(0)`.
    pub fn sigma_eps_from_background(background_sd: f64, kernel: &DiscreteKernel) -> f64 {
        background_sd / kernel.autocorrelation(0.0).sqrt()
    }
}

fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Unblurred plate profile at `t`.
pub fn ideal_profile(w: f64, s: f64, rho: [f64; 3], t: f64) -> f64 {
    let u = t - s;
    rho[0] + (rho[1] - rho[0]) * heaviside(u + w) + (rho[2] - rho[1]) * heaviside(u - w)
}

/// Weights of `(rho_BG, rho_Ct, rho_Tr)` in the blurred profile at `t`.
#[inline]
pub fn mean_basis(kernel: &DiscreteKernel, w: f64, s: f64, t: f64) -> [f64; 3] {
    let k1 = kernel.cdf(t - s + w);
    let k2 = kernel.cdf(t - s - w);
    [1.0 - k1, k1 - k2, k2]
}

/// Plate profile convolved with `kernel`, evaluated at `ts`.
pub fn mean_profile(kernel: &DiscreteKernel, w: f64, s: f64, rho: [f64; 3], ts: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; ts.len()];
    mean_profile_into(kernel, w, s, rho, ts, &mut out);
    out
}

#[inline]
pub fn mean_profile_into(kernel: &DiscreteKernel, w: f64, s: f64, rho: [f64; 3], ts: &[f64], out: &mut [f64]) {
    for (o, &t) in out.iter_mut().zip(ts) {
        let k1 = kernel.cdf(t - s + w);
        let k2 = kernel.cdf(t - s - w);
        *o = rho[0] + (rho[1] - rho[0]) * k1 + (rho[2] - rho[1]) * k2;
    }
}

/// Covariance of the profile noise at positions `ts`.
pub fn noise_covariance(kernel: &DiscreteKernel, ts: &[f64], noise: NoiseParams) -> Result<DMatrix<f64>> {
    let n = ts.len();
    let var_eps = noise.sigma_eps * noise.sigma_eps;
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut v = var_eps * kernel.autocorrelation(ts[i] - ts[j]);
            if i == j {
                v += noise.sigma_xi * noise.sigma_xi;
            }
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    if Cholesky::new(c.clone()).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(c)
}

/// Cholesky factor of a profile covariance.
#[derive(Debug)]
pub struct Factor {
    /// Lower-triangular factor `L` with `C = L L^T`.
    l: DMatrix<f64>,
    log_det: f64,
}

impl Factor {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let chol: Cholesky<f64, Dyn> = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite)?;
        let l = chol.unpack();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { l, log_det })
    }

    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `-0.5 * (n ln 2pi + ln det C)`.
    pub fn normalizer(&self) -> f64 {
        -0.5 * (self.len() as f64 * (2.0 * PI).ln() + self.log_det)
    }

    /// Solves `L y = b` in place.
    #[inline]
    pub fn whiten(&self, b: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let row = self.l.row(i);
            let mut acc = b[i];
            for j in 0..i {
                acc -= row[j] * b[j];
            }
            b[i] = acc / row[i];
        }
    }
}

/// Log-density of `profile` given half-width `w`, densities and offset.
pub fn profile_log_likelihood(
    profile: &Profile,
    ln_w: f64,
    rho: [f64; 3],
    offset: f64,
    kernel: &DiscreteKernel,
    noise: NoiseParams,
) -> Result<f64> {
    let factor = Factor::new(noise_covariance(kernel, &profile.ts, noise)?)?;
    let mut r = mean_profile(kernel, ln_w.exp(), offset, rho, &profile.ts);
    for (ri, z) in r.iter_mut().zip(&profile.values) {
        *ri = z - *ri;
    }
    factor.whiten(&mut r);
    Ok(factor.normalizer() - 0.5 * r.iter().map(|v| v * v).sum::<f64>())
}

/// Sum of per-profile log-densities; profiles are independent given `x`.
pub fn patch_log_likelihood(
    profiles: &ProfileSet,
    x: &LatentState,
    bank: &KernelBank,
    noise: NoiseParams,
) -> Result<f64> {
    if x.offsets.len() != profiles.len() {
        return Err(Error::invalid("latent offsets do not match the profile count"));
    }
    let mut ll = 0.0;
    for (p, &s) in profiles.profiles.iter().zip(&x.offsets) {
        ll += profile_log_likelihood(p, x.ln_w, x.rho, s, &bank.kernel(p.alpha_deg), noise)?;
    }
    Ok(ll)
}

struct PreparedProfile {
    ts: Vec<f64>,
    values: Vec<f64>,
    /// `L^-1 z`.
    white: Vec<f64>,
    kernel: Arc<DiscreteKernel>,
    factor: Arc<Factor>,
}

/// Likelihood of one patch with covariance factors and whitened data
/// computed once. Factors are shared between profiles with the same angle
/// bin, length and sample step.
pub struct PatchModel {
    profiles: Vec<PreparedProfile>,
    noise: NoiseParams,
}

impl PatchModel {
    pub fn new(set: &ProfileSet, bank: &KernelBank, noise: NoiseParams) -> Result<Self> {
        let mut cache: HashMap<(usize, usize, u64), Arc<Factor>> = HashMap::new();
        let mut profiles = Vec::with_capacity(set.len());
        for p in &set.profiles {
            let kernel = bank.kernel(p.alpha_deg);
            let key = (KernelBank::bin(p.alpha_deg), p.len(), p.step().to_bits());
            let factor = match cache.get(&key) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(Factor::new(noise_covariance(&kernel, &p.ts, noise)?)?);
                    cache.insert(key, f.clone());
                    f
                }
            };
            let mut white = p.values.clone();
            factor.whiten(&mut white);
            profiles.push(PreparedProfile {
                ts: p.ts.clone(),
                values: p.values.clone(),
                white,
                kernel,
                factor,
            });
        }
        Ok(Self { profiles, noise })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn noise(&self) -> NoiseParams {
        self.noise
    }

    /// Smallest distance from the profile center to a profile end (mm).
    pub fn half_length(&self) -> f64 {
        self.profiles
            .iter()
            .map(|p| p.ts.first().unwrap().abs().min(p.ts.last().unwrap().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Log-density of profile `i`.
    pub fn profile_log_likelihood(&self, i: usize, w: f64, rho: [f64; 3], s: f64) -> f64 {
        let p = &self.profiles[i];
        let mut m = vec![0.0; p.ts.len()];
        mean_profile_into(&p.kernel, w, s, rho, &p.ts, &mut m);
        p.factor.whiten(&mut m);
        let q: f64 = p.white.iter().zip(&m).map(|(z, y)| (z - y) * (z - y)).sum();
        p.factor.normalizer() - 0.5 * q
    }

    pub fn log_likelihood(&self, x: &LatentState) -> f64 {
        debug_assert_eq!(x.offsets.len(), self.len());
        let w = x.half_width();
        (0..self.len())
            .map(|i| self.profile_log_likelihood(i, w, x.rho, x.offsets[i]))
            .sum()
    }

    /// Log-density from a packed latent vector (see [`LatentState::to_vec`]).
    pub fn log_likelihood_packed(&self, v: &[f64]) -> f64 {
        let w = v[0].exp();
        let rho = [v[1], v[2], v[3]];
        (0..self.len())
            .map(|i| self.profile_log_likelihood(i, w, rho, v[4 + i]))
            .sum()
    }

    /// Whitened density basis of profile `i`: three columns such that
    /// `L^-1 mean = B rho`, and the whitened data `L^-1 z`.
    pub fn whitened_basis(&self, i: usize, w: f64, s: f64) -> (Vec<[f64; 3]>, &[f64]) {
        let p = &self.profiles[i];
        let n = p.ts.len();
        let mut cols = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (j, &t) in p.ts.iter().enumerate() {
            let b = mean_basis(&p.kernel, w, s, t);
            for c in 0..3 {
                cols[c][j] = b[c];
            }
        }
        for c in &mut cols {
            p.factor.whiten(c);
        }
        ((0..n).map(|j| [cols[0][j], cols[1][j], cols[2][j]]).collect(), &p.white)
    }

    /// CSV of measured and synthesized profiles for inspection.
    pub fn residual_csv(&self, x: &LatentState) -> String {
        let mut out = String::from("profile,t,measured,mean,residual\n");
        for (i, p) in self.profiles.iter().enumerate() {
            let m = mean_profile(&p.kernel, x.half_width(), x.offsets[i], x.rho, &p.ts);
            for ((t, z), y) in p.ts.iter().zip(&p.values).zip(&m) {
                let _ = writeln!(out, "{i},{t},{z},{y},{}", z - y);
            }
        }
        out
    }
}

/// Dense evaluation of a multivariate normal log-density, used as an oracle.
#[doc(hidden)]
pub fn dense_mvn_log_density(z: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = z.len();
    let r = DVector::from_iterator(n, z.iter().zip(mean).map(|(a, b)| a - b));
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n as f64 * (2.0 * PI).ln() + cov.determinant().ln() + quad)
}
