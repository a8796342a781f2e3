//! Point spread function model.
//!
//! The in-plane line-spread function is a normalised symmetric sum of
//! Gaussians in the Fourier domain,
//!
//! ```text
//! MTF(f) = N * sum_k a_k [exp(-(f - b_k)^2 / 2c_k^2) + exp(-(f + b_k)^2 / 2c_k^2)]
//! N      = (2 sum_k a_k exp(-b_k^2 / 2c_k^2))^-1
//! ```
//!
//! whose inverse transform is a sum of Gaussian-windowed cosines. The
//! out-of-plane PSF is a Gaussian with standard deviation `sigma_z`.

mod fit;
mod kernel;

pub use fit::{fit_mtf, fit_mtf_auto, read_mtf_csv, MtfSamples};
pub use kernel::{combined_kernel, combined_kernel_with_aperture, Aperture, DiscreteKernel, KernelBank};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfComponent {
    /// Weight.
    pub a: f64,
    /// Center frequency (1/mm).
    pub b: f64,
    /// Width (1/mm), strictly positive.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PsfModelFile", into = "PsfModelFile")]
pub struct PsfModel {
    components: Vec<PsfComponent>,
    out_of_plane_sigma: f64,
    norm_const: f64,
    fit_rms: Option<f64>,
}

/// On-disk JSON layout.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsfModelFile {
    components: Vec<PsfComponent>,
    out_of_plane_sigma_mm: f64,
    #[serde(default)]
    fit_rms: Option<f64>,
}

impl TryFrom<PsfModelFile> for PsfModel {
    type Error = Error;

    fn try_from(f: PsfModelFile) -> Result<Self> {
        let mut m = PsfModel::new(f.components, f.out_of_plane_sigma_mm)?;
        m.fit_rms = f.fit_rms;
        Ok(m)
    }
}

impl From<PsfModel> for PsfModelFile {
    fn from(m: PsfModel) -> Self {
        PsfModelFile {
            components: m.components,
            out_of_plane_sigma_mm: m.out_of_plane_sigma,
            fit_rms: m.fit_rms,
        }
    }
}

/// `sigma` of a Gaussian with the given full width at half maximum.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * 2f64.ln()).sqrt()
}

impl PsfModel {
    pub fn new(components: Vec<PsfComponent>, out_of_plane_sigma: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("PSF model needs at least one component"));
        }
        if components
            .iter()
            .any(|k| !(k.c > 0.0) || !k.a.is_finite() || !k.b.is_finite())
        {
            return Err(Error::invalid("PSF components need finite a, b and c > 0"));
        }
        if !(out_of_plane_sigma >= 0.0) || !out_of_plane_sigma.is_finite() {
            return Err(Error::invalid("out-of-plane sigma must be >= 0"));
        }
        let z: f64 = 2.0
            * components
                .iter()
                .map(|k| k.a * (-k.b * k.b / (2.0 * k.c * k.c)).exp())
                .sum::<f64>();
        if !(z.abs() > 1e-300) || !z.is_finite() {
            return Err(Error::invalid("PSF model has zero DC gain"));
        }
        Ok(Self {
            components,
            out_of_plane_sigma,
            norm_const: 1.0 / z,
            fit_rms: None,
        })
    }

    /// Single Gaussian in-plane component with standard deviation `sigma` (mm).
    pub fn gaussian(sigma_in_plane: f64, out_of_plane_sigma: f64) -> Result<Self> {
        Self::new(
            vec![PsfComponent {
                a: 1.0,
                b: 0.0,
                c: 1.0 / (2.0 * PI * sigma_in_plane),
            }],
            out_of_plane_sigma,
        )
    }

    pub fn components(&self) -> &[PsfComponent] {
        &self.components
    }

    pub fn out_of_plane_sigma(&self) -> f64 {
        self.out_of_plane_sigma
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    pub fn fit_rms(&self) -> Option<f64> {
        self.fit_rms
    }

    pub fn with_fit_rms(mut self, rms: f64) -> Self {
        self.fit_rms = Some(rms);
        self
    }

    pub fn with_out_of_plane_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::invalid("out-of-plane sigma must be >= 0"));
        }
        self.out_of_plane_sigma = sigma;
        Ok(self)
    }

    /// Modelled MTF at frequency `f` (1/mm).
    pub fn mtf(&self, f: f64) -> f64 {
        self.norm_const
            * self
                .components
                .iter()
                .map(|k| {
                    let d = 2.0 * k.c * k.c;
                    k.a * ((-(f - k.b).powi(2) / d).exp() + (-(f + k.b).powi(2) / d).exp())
                })
                .sum::<f64>()
    }

    /// In-plane line-spread function at `t` (mm), in 1/mm.
    pub fn in_plane_psf(&self, t: f64) -> f64 {
        let s2pi = (2.0 * PI).sqrt();
        self.norm_const
            * self
                .components
                .iter()
                .map(|k| {
                    k.a * 2.0 * s2pi * k.c * (-2.0 * PI * PI * k.c * k.c * t * t).exp() * (2.0 * PI * k.b * t).cos()
                })
                .sum::<f64>()
    }

    /// Second moment of the in-plane LSF, from the curvature of the MTF at 0.
    pub fn in_plane_variance(&self) -> f64 {
        let curv: f64 = self
            .components
            .iter()
            .map(|k| {
                let c2 = k.c * k.c;
                2.0 * k.a * (-k.b * k.b / (2.0 * c2)).exp() * (k.b * k.b - c2) / (c2 * c2)
            })
            .sum::<f64>()
            * self.norm_const;
        -curv / (4.0 * PI * PI)
    }

    /// Standard deviation of a Gaussian with the same second moment as the in-plane LSF.
    pub fn in_plane_sigma_equivalent(&self) -> f64 {
        self.in_plane_variance().max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_comp() -> PsfModel {
        PsfModel::new(
            vec![
                PsfComponent {
                    a: 0.8,
                    b: 0.0,
                    c: 0.75,
                },
                PsfComponent {
                    a: 0.2,
                    b: 0.15,
                    c: 0.45,
                },
            ],
            0.4,
        )
        .unwrap()
    }

    #[test]
    fn mtf_is_normalised() {
        assert!((two_comp().mtf(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_centered_component_collapses() {
        let m = PsfModel::new(vec![PsfComponent { a: 3.0, b: 0.0, c: 0.5 }], 0.0).unwrap();
        for f in [0.1, 0.4, 1.3] {
            assert!((m.mtf(f) - (-f * f / (2.0 * 0.25)).exp()).abs() < 1e-14);
        }
        // Gaussian LSF with sigma = 1 / (2 pi c)
        let sigma = 1.0 / (2.0 * PI * 0.5);
        for t in [0.0, 0.2, 0.7] {
            let g = (-t * t / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt());
            assert!((m.in_plane_psf(t) - g).abs() < 1e-12);
        }
        assert!((m.in_plane_sigma_equivalent() - sigma).abs() < 1e-12);
    }

    #[test]
    fn mtf_decays() {
        let m = two_comp();
        let f = 0.15 + 10.0 * 0.75 + 1e-6;
        assert!(m.mtf(f).abs() < 1e-12);
    }

    #[test]
    fn lsf_integrates_to_one_and_matches_mtf() {
        let m = two_comp();
        let h = 1e-3;
        let ts: Vec<f64> = (-5000..=5000).map(|i| i as f64 * h).collect();
        let g: Vec<f64> = ts.iter().map(|&t| m.in_plane_psf(t)).collect();
        let mass: f64 = g.iter().sum::<f64>() * h;
        assert!((mass - 1.0).abs() < 1e-6);
        // numerical Fourier transform
        for i in 0..30 {
            let f = i as f64 * 0.1;
            let ft: f64 = ts
                .iter()
                .zip(&g)
                .map(|(&t, &v)| v * (2.0 * PI * f * t).cos())
                .sum::<f64>()
                * h;
            assert!((ft - m.mtf(f)).abs() < 1e-6, "f = {f}: {ft} vs {}", m.mtf(f));
        }
        // second moment
        let var: f64 = ts.iter().zip(&g).map(|(&t, &v)| v * t * t).sum::<f64>() * h;
        assert!((var - m.in_plane_variance()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn lsf_is_even(t in -3.0..3.0f64) {
            let m = two_comp();
            prop_assert!((m.in_plane_psf(t) - m.in_plane_psf(-t)).abs() < 1e-14);
        }
    }

    #[test]
    fn json_layout() {
        let m = two_comp().with_fit_rms(1e-5);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"out_of_plane_sigma_mm\":0.4"));
        assert!(s.contains("\"fit_rms\""));
        let back: PsfModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<PsfModel>(
            r#"{"components":[{"a":1,"b":0,"c":-1}],"out_of_plane_sigma_mm":0.4}"#
        )
        .is_err());
    }

    #[test]
    fn fwhm_conversion() {
        assert!((fwhm_to_sigma(1.0) - 0.424_660_900_144_009_5).abs() < 1e-12);
    }
}
