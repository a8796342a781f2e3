//! Angle-dependent 1-D kernels along a profile.
//!
//! A profile at angle `alpha` to the z-axis sees the in-plane LSF scaled by
//! `sin(alpha)` convolved with the out-of-plane Gaussian scaled by
//! `cos(alpha)`. Because the in-plane model is a sum of Gaussians in the
//! Fourier domain, the convolution stays a sum of Gaussian-windowed
//! cosines and is evaluated in closed form before discretisation.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::PsfModel;

/// Half-width of the kernel support in units of the widest term's standard
/// deviation; the truncated mass is below 1e-8.
const SUPPORT_SIGMAS: f64 = 6.5;
const DIRAC_EPS: f64 = 1e-3;

/// Extra isotropic Gaussian blur added to the PSF, expressed as variances
/// (mm^2) in-plane and along z. Zero by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    pub in_plane_var: f64,
    pub out_of_plane_var: f64,
}

impl Aperture {
    /// Box average over a voxel plus linear interpolation between voxel
    /// centers, approximated by their combined variance `spacing^2 / 4`.
    pub fn voxel_sampling(in_plane_spacing: f64, slice_spacing: f64) -> Self {
        Self {
            in_plane_var: in_plane_spacing * in_plane_spacing / 4.0,
            out_of_plane_var: slice_spacing * slice_spacing / 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    alpha_deg: f64,
    step: f64,
    /// Values at `(i - half) * step`, `i = 0..2 * half + 1`.
    taps: Vec<f64>,
    /// Running integral at the tap cell edges; `cdf[0] = 0`, `cdf[last] = 1`.
    cdf: Vec<f64>,
    half: usize,
}

struct Term {
    weight: f64,
    freq: f64,
    /// Gaussian width in the frequency domain.
    width: f64,
}

fn terms(model: &PsfModel, alpha_deg: f64, aperture: Aperture) -> Option<Vec<Term>> {
    let alpha = alpha_deg.to_radians();
    let mut s = alpha.sin();
    let mut c = alpha.cos();
    if s < DIRAC_EPS {
        s = 0.0;
    }
    if c < DIRAC_EPS {
        c = 0.0;
    }
    let sz2 = model.out_of_plane_sigma().powi(2) + aperture.out_of_plane_var;
    let gauss_var = aperture.in_plane_var * s * s + sz2 * c * c;
    let n = model.norm_const();
    let mut out = Vec::with_capacity(model.components().len());
    for k in model.components() {
        let ck2 = k.c * k.c;
        let a = s * s / (2.0 * ck2) + 2.0 * PI * PI * gauss_var;
        if a <= 0.0 {
            return None;
        }
        let b = s * k.b / ck2;
        out.push(Term {
            weight: n * k.a * (b * b / (4.0 * a) - k.b * k.b / (2.0 * ck2)).exp(),
            freq: b / (2.0 * a),
            width: (1.0 / (2.0 * a)).sqrt(),
        });
    }
    Some(out)
}

fn eval_terms(terms: &[Term], t: f64) -> f64 {
    let s2pi = (2.0 * PI).sqrt();
    terms
        .iter()
        .map(|k| {
            k.weight
                * 2.0
                * s2pi
                * k.width
                * (-2.0 * PI * PI * k.width * k.width * t * t).exp()
                * (2.0 * PI * k.freq * t).cos()
        })
        .sum()
}

pub fn combined_kernel(model: &PsfModel, alpha_deg: f64, step: f64) -> DiscreteKernel {
    combined_kernel_with_aperture(model, alpha_deg, step, Aperture::default())
}

pub fn combined_kernel_with_aperture(
    model: &PsfModel,
    alpha_deg: f64,
    step: f64,
    aperture: Aperture,
) -> DiscreteKernel {
    assert!(step > 0.0, "kernel step must be positive");
    let alpha_deg = alpha_deg.clamp(0.0, 90.0);
    let Some(terms) = terms(model, alpha_deg, aperture) else {
        return DiscreteKernel::from_taps(alpha_deg, step, vec![1.0 / step]);
    };
    let sigma_max = terms.iter().map(|k| 1.0 / (2.0 * PI * k.width)).fold(0.0, f64::max);
    let half = (SUPPORT_SIGMAS * sigma_max / step).ceil() as usize;
    let mut taps = vec![0.0; 2 * half + 1];
    for i in 0..=half {
        let v = eval_terms(&terms, i as f64 * step);
        taps[half + i] = v;
        taps[half - i] = v;
    }
    DiscreteKernel::from_taps(alpha_deg, step, taps)
}

impl DiscreteKernel {
    /// Builds a kernel from symmetric taps, renormalising to unit mass.
    pub fn from_taps(alpha_deg: f64, step: f64, mut taps: Vec<f64>) -> Self {
        assert!(taps.len() % 2 == 1, "kernel taps must be odd in number");
        let mass: f64 = taps.iter().sum::<f64>() * step;
        taps.iter_mut().for_each(|v| *v /= mass);
        let mut cdf = Vec::with_capacity(taps.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for v in &taps {
            acc += v * step;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        let half = taps.len() / 2;
        Self {
            alpha_deg,
            step,
            taps,
            cdf,
            half,
        }
    }

    pub fn alpha_deg(&self) -> f64 {
        self.alpha_deg
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Half-width (mm) beyond which the kernel is zero.
    pub fn support(&self) -> f64 {
        (self.half as f64 + 0.5) * self.step
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.taps.len()).map(move |i| (i as f64 - self.half as f64) * self.step)
    }

    /// Piecewise-constant kernel value at `t`.
    pub fn value(&self, t: f64) -> f64 {
        let x = t / self.step + self.half as f64 + 0.5;
        if x < 0.0 || x >= self.taps.len() as f64 {
            return 0.0;
        }
        self.taps[x as usize]
    }

    /// Running integral of the kernel up to `t`, linear between cell edges.
    #[inline]
    pub fn cdf(&self, t: f64) -> f64 {
        let x = (t + self.support()) / self.step;
        if x <= 0.0 {
            return 0.0;
        }
        let i = x as usize;
        if i >= self.taps.len() {
            return 1.0;
        }
        let f = x - i as f64;
        self.cdf[i] + f * (self.cdf[i + 1] - self.cdf[i])
    }

    fn autocorr_at_index(&self, lag: usize) -> f64 {
        if lag >= self.taps.len() {
            return 0.0;
        }
        self.taps[..self.taps.len() - lag]
            .iter()
            .zip(&self.taps[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.step
    }

    /// `(g * g)(lag)`, linear between multiples of the kernel step.
    pub fn autocorrelation(&self, lag: f64) -> f64 {
        let x = lag.abs() / self.step;
        let i = x.floor();
        let f = x - i;
        let i = i as usize;
        let a = self.autocorr_at_index(i);
        if f < 1e-9 {
            return a;
        }
        a + f * (self.autocorr_at_index(i + 1) - a)
    }

    pub fn autocorrelations(&self, lags: &[f64]) -> Vec<f64> {
        lags.iter().map(|&l| self.autocorrelation(l)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.positions().zip(&self.taps).map(|(t, v)| t * v).sum::<f64>() * self.step
    }

    pub fn second_moment(&self) -> f64 {
        self.positions().zip(&self.taps).map(|(t, v)| t * t * v).sum::<f64>() * self.step
    }
}

/// Kernels for whole-degree angle bins, built on first use.
#[derive(Debug)]
pub struct KernelBank {
    model: PsfModel,
    step: f64,
    aperture: Aperture,
    bins: Vec<OnceLock<Arc<DiscreteKernel>>>,
}

impl KernelBank {
    pub fn new(model: PsfModel, step: f64, aperture: Aperture) -> Self {
        Self {
            model,
            step,
            aperture,
            bins: (0..=90).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn model(&self) -> &PsfModel {
        &self.model
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn bin(alpha_deg: f64) -> usize {
        alpha_deg.round().clamp(0.0, 90.0) as usize
    }

    pub fn kernel(&self, alpha_deg: f64) -> Arc<DiscreteKernel> {
        let b = Self::bin(alpha_deg);
        self.bins[b]
            .get_or_init(|| {
                Arc::new(combined_kernel_with_aperture(
                    &self.model,
                    b as f64,
                    self.step,
                    self.aperture,
                ))
            })
            .clone()
    }

    pub fn max_support(&self) -> f64 {
        [0.0, 90.0]
            .iter()
            .map(|&a| self.kernel(a).support())
            .fold(0.0, f64::max)
    }
}
