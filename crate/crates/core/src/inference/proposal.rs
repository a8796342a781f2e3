//! Gaussian importance proposals over the packed latent vector.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bone_model::PatchModel;
use crate::error::{Error, Result};

use super::prior::{normal_log_pdf, HyperParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Proposal {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("proposal covariance has the wrong shape"));
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?.unpack();
        let log_det_half: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            log_norm: -log_det_half - 0.5 * d as f64 * (2.0 * PI).ln(),
        })
    }

    /// Independent Gaussian at the prior locations and scales of `theta`.
    pub fn from_prior(theta: &HyperParams, n_profiles: usize) -> Self {
        let d = n_profiles + 4;
        let mut mean = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        for i in 0..d {
            let (mu, sigma) = theta.coordinate(i);
            mean.push(mu);
            var.push(sigma * sigma);
        }
        Self::new(mean, DMatrix::from_diagonal(&DVector::from_vec(var))).expect("positive prior scales")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// One draw and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = self.mean.as_slice().to_vec();
        for i in 0..d {
            let row = self.chol.row(i);
            let mut acc = 0.0;
            for j in 0..=i {
                acc += row[j] * eps[j];
            }
            x[i] += acc;
        }
        let q = self.log_norm - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
        (x, q)
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<(Vec<f64>, f64)> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut r: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        for i in 0..d {
            let row = self.chol.row(i);
            let mut acc = r[i];
            for j in 0..i {
                acc -= row[j] * r[j];
            }
            r[i] = acc / row[i];
        }
        self.log_norm - 0.5 * r.iter().map(|e| e * e).sum::<f64>()
    }

    /// Same mean, covariance scaled by `factor`.
    pub fn widened(&self, factor: f64) -> Self {
        Self::new(self.mean.as_slice().to_vec(), &self.cov * factor).expect("scaled covariance stays positive definite")
    }

    /// Moment-matched update: weighted mean, and weighted covariance shrunk
    /// toward the current covariance with weight `shrinkage`.
    pub fn adapted(&self, xs: &[&[f64]], weights: &[f64], shrinkage: f64) -> Self {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (x, &w) in xs.iter().zip(weights) {
            for i in 0..d {
                mean[i] += w * x[i];
            }
        }
        let mut cov = &self.cov * shrinkage;
        let mut r = vec![0.0; d];
        for (x, &w) in xs.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                r[i] = x[i] - mean[i];
            }
            let a = (1.0 - shrinkage) * w;
            for j in 0..d {
                for i in j..d {
                    cov[(i, j)] += a * r[i] * r[j];
                }
            }
        }
        for j in 0..d {
            for i in j + 1..d {
                cov[(j, i)] = cov[(i, j)];
            }
        }
        Self::new(mean.clone(), cov).unwrap_or_else(|_| Self::new(mean, self.cov.clone()).expect("previous covariance"))
    }
}

/// Settings of the Laplace approximation used to initialise proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceSettings {
    /// Covariance multiplier applied to the inverse Hessian.
    pub inflation: f64,
    pub sweeps: usize,
}

impl Default for LaplaceSettings {
    fn default() -> Self {
        Self {
            inflation: 1.0,
            sweeps: 12,
        }
    }
}

/// Golden-section refinement after a coarse grid scan on `[lo, hi]`.
fn maximise_1d(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    if !(hi > lo) {
        return lo;
    }
    let h = (hi - lo) / n as f64;
    let (mut best, mut best_v) = (lo, f64::NEG_INFINITY);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let v = f(x);
        if v > best_v {
            best = x;
            best_v = v;
        }
    }
    let (mut a, mut b) = ((best - h).max(lo), (best + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..30 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) >= best_v {
        x
    } else {
        best
    }
}

/// Densities maximising the posterior for fixed `w` and offsets: the
/// likelihood is Gaussian and linear in `rho`.
fn best_rho(model: &PatchModel, w: f64, offsets: &[f64], theta: &HyperParams) -> [f64; 3] {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, (&mu, &sigma)) in theta.mu_rho.iter().zip(&theta.sigma_rho).enumerate() {
        a[(c, c)] += 1.0 / (sigma * sigma);
        b[c] += mu / (sigma * sigma);
    }
    for (i, &s) in offsets.iter().enumerate() {
        let (basis, white) = model.whitened_basis(i, w, s);
        for (row, z) in basis.iter().zip(white) {
            for p in 0..3 {
                b[p] += row[p] * z;
                for q in 0..3 {
                    a[(p, q)] += row[p] * row[q];
                }
            }
        }
    }
    match a.cholesky() {
        Some(ch) => {
            let r = ch.solve(&b);
            [r[0], r[1], r[2]]
        }
        None => theta.mu_rho,
    }
}

fn log_rho_prior(rho: &[f64; 3], theta: &HyperParams) -> f64 {
    (0..3)
        .map(|c| normal_log_pdf(rho[c], theta.mu_rho[c], theta.sigma_rho[c]))
        .sum()
}

/// Mode of the latent posterior under `theta` by coordinate ascent. With a
/// `start` point (for example the current proposal mean) the line searches
/// are restricted to a neighbourhood of it; otherwise they span four prior
/// scales.
pub fn posterior_mode(
    model: &PatchModel,
    theta: &HyperParams,
    sweeps: usize,
    s_limit: f64,
    start: Option<&[f64]>,
) -> Vec<f64> {
    let n = model.len();
    let (mut g, mut offsets, grid) = match start {
        Some(x) => (x[0], x[4..].iter().map(|s| s.clamp(-s_limit, s_limit)).collect(), 12),
        None => (theta.mu_w, vec![theta.mu_s.clamp(-s_limit, s_limit); n], 24),
    };
    let g_range = |g: f64| match start {
        Some(_) => (g - 0.25, g + 0.25),
        None => (theta.mu_w - 4.0 * theta.sigma_w, theta.mu_w + 4.0 * theta.sigma_w),
    };
    let s_range = |s: f64| match start {
        Some(_) => ((s - 0.15).max(-s_limit), (s + 0.15).min(s_limit)),
        None => (
            (theta.mu_s - 4.0 * theta.sigma_s).max(-s_limit),
            (theta.mu_s + 4.0 * theta.sigma_s).min(s_limit),
        ),
    };
    let mut rho;
    for _ in 0..sweeps {
        // densities are profiled out so the search follows the w-rho ridge
        let (lo, hi) = g_range(g);
        let g_new = maximise_1d(lo, hi, grid, |g| {
            let w = g.exp();
            let r = best_rho(model, w, &offsets, theta);
            normal_log_pdf(g, theta.mu_w, theta.sigma_w)
                + log_rho_prior(&r, theta)
                + (0..n)
                    .map(|i| model.profile_log_likelihood(i, w, r, offsets[i]))
                    .sum::<f64>()
        });
        let w = g_new.exp();
        rho = best_rho(model, w, &offsets, theta);
        let mut moved = (g_new - g).abs();
        g = g_new;
        for (i, s) in offsets.iter_mut().enumerate() {
            let (lo, hi) = s_range(*s);
            let s_new = maximise_1d(lo, hi, grid, |s| {
                model.profile_log_likelihood(i, w, rho, s) + normal_log_pdf(s, theta.mu_s, theta.sigma_s)
            });
            moved = moved.max((s_new - *s).abs());
            *s = s_new;
        }
        if moved < 1e-4 {
            break;
        }
    }
    rho = best_rho(model, g.exp(), &offsets, theta);
    let mut x = vec![g, rho[0], rho[1], rho[2]];
    x.extend(offsets);
    x
}

/// Gaussian centered at the posterior mode with the (optionally inflated)
/// inverse negative Hessian as covariance. The Hessian has arrow structure: the
/// shared coordinates `(ln w, rho)` couple to every offset, offsets do not
/// couple to each other.
pub fn laplace_proposal(
    model: &PatchModel,
    theta: &HyperParams,
    settings: LaplaceSettings,
    s_limit: f64,
    start: Option<&[f64]>,
) -> Proposal {
    let n = model.len();
    let d = n + 4;
    let mode = posterior_mode(model, theta, settings.sweeps, s_limit, start);
    let h = [0.05, 1.0, 1.0, 1.0, 0.02];
    let mut prec = DMatrix::zeros(d, d);
    for k in 0..d {
        let (_, sigma) = theta.coordinate(k);
        prec[(k, k)] += 1.0 / (sigma * sigma);
    }
    for i in 0..n {
        let idx = [0, 1, 2, 3, 4 + i];
        let eval = |u: &[f64; 5]| model.profile_log_likelihood(i, u[0].exp(), [u[1], u[2], u[3]], u[4]);
        let base = [mode[0], mode[1], mode[2], mode[3], mode[4 + i]];
        let f0 = eval(&base);
        let shifted = |a: usize, da: f64, b: usize, db: f64| {
            let mut u = base;
            u[a] += da;
            u[b] += db;
            eval(&u)
        };
        for a in 0..5 {
            let fp = shifted(a, h[a], a, 0.0);
            let fm = shifted(a, -h[a], a, 0.0);
            prec[(idx[a], idx[a])] -= (fp - 2.0 * f0 + fm) / (h[a] * h[a]);
            for b in 0..a {
                let v = (shifted(a, h[a], b, h[b]) - shifted(a, h[a], b, -h[b]) - shifted(a, -h[a], b, h[b])
                    + shifted(a, -h[a], b, -h[b]))
                    / (4.0 * h[a] * h[b]);
                prec[(idx[a], idx[b])] -= v;
                prec[(idx[b], idx[a])] -= v;
            }
        }
    }
    let cov = invert_precision(prec, theta, d) * settings.inflation;
    Proposal::new(mode.clone(), cov).unwrap_or_else(|_| {
        let mut p = Proposal::from_prior(theta, n);
        p.mean = DVector::from_vec(mode);
        p
    })
}

/// Inverse of a precision matrix whose eigenvalues are floored at the
/// smallest prior precision, so curvature estimated with the wrong sign
/// falls back to the prior scale.
fn invert_precision(prec: DMatrix<f64>, theta: &HyperParams, d: usize) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(prec.clone()) {
        return ch.inverse();
    }
    let floor = (0..d)
        .map(|k| {
            let (_, s) = theta.coordinate(k);
            1.0 / (s * s)
        })
        .fold(f64::INFINITY, f64::min);
    let eig = prec.symmetric_eigen();
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(mean: Vec<f64>, var: f64) -> Proposal {
        let d = mean.len();
        Proposal::new(mean, DMatrix::identity(d, d) * var).unwrap()
    }

    #[test]
    fn zero_covariance_limit() {
        let p = diag(vec![1.0, -2.0, 3.0, 0.5], 1e-24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (x, _) in p.sample_many(50, &mut rng) {
            for (a, b) in x.iter().zip(p.mean()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sample_mean_converges() {
        let mut cov = DMatrix::identity(4, 4);
        cov[(0, 1)] = 0.5;
        cov[(1, 0)] = 0.5;
        cov[(2, 2)] = 4.0;
        let p = Proposal::new(vec![1.0, 2.0, -1.0, 0.0], cov.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut sum = [0.0; 4];
        for (x, _) in p.sample_many(n, &mut rng) {
            for i in 0..4 {
                sum[i] += x[i];
            }
        }
        for i in 0..4 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((sum[i] / n as f64 - p.mean()[i]).abs() < 3.0 * se, "dim {i}");
        }
    }

    #[test]
    fn deterministic_draws() {
        let p = diag(vec![0.0; 6], 2.0);
        let a = p.sample_many(10, &mut ChaCha8Rng::seed_from_u64(7));
        let b = p.sample_many(10, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_log_density_is_consistent() {
        let mut cov = DMatrix::identity(3, 3) * 2.0;
        cov[(0, 2)] = 0.7;
        cov[(2, 0)] = 0.7;
        let p = Proposal::new(vec![0.5, 0.0, -1.0], cov.clone()).unwrap();
        let (x, q) = p.sample(&mut ChaCha8Rng::seed_from_u64(3));
        assert!((p.log_density(&x) - q).abs() < 1e-12);
        let r = DVector::from_iterator(3, x.iter().zip(p.mean()).map(|(a, b)| a - b));
        let dense = -0.5 * (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)]
            - 0.5 * (cov * (2.0 * PI)).determinant().ln();
        assert!((q - dense).abs() < 1e-12);
    }

    #[test]
    fn adaptation_moves_to_weighted_moments() {
        let p = diag(vec![0.0, 0.0, 0.0, 0.0], 1.0);
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0, 0.0], vec![3.0, 0.0, 0.0, 0.0]];
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let q = p.adapted(&refs, &[0.5, 0.5], 0.5);
        assert_eq!(q.mean(), &[2.0, 0.0, 0.0, 0.0]);
        assert!((q.cov()[(0, 0)] - (0.5 + 0.5 * 1.0)).abs() < 1e-12);
        assert!((q.cov()[(1, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn maximiser_finds_interior_peak() {
        let x = maximise_1d(-3.0, 5.0, 24, |x| -(x - 1.234f64).powi(2));
        assert!((x - 1.234).abs() < 1e-6);
        assert_eq!(maximise_1d(0.0, 1.0, 24, |x| x), 1.0);
    }
}
