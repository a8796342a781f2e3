//! Serialisable description of an estimation run.
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{McemConfig, Nix2Prior};
use crate::io::metaimage::read_metaimage;
use crate::io::ply::read_ply;
use crate::mesh::SurfaceMesh;
use crate::pipeline::{EstimateConfig, KernelConfig, NoiseConfig, PatchConfig};
use crate::profiles::ProfileConfig;
use crate::psf::{fit_mtf_auto, fwhm_to_sigma, read_mtf_csv, PsfModel};
use crate::volume::Volume;

/// Linear map from scanner units to density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// MetaImage header of the scan.
    pub volume: PathBuf,
    /// ASCII PLY mid-cortex mesh.
    pub mesh: PathBuf,
    /// Fitted PSF model JSON; exclusive with `mtf`.
    #[serde(default)]
    pub psf_model: Option<PathBuf>,
    /// MTF samples CSV fitted at start-up; exclusive with `psf_model`.
    #[serde(default)]
    pub mtf: Option<PathBuf>,
    /// Slice-profile FWHM (mm) used with `mtf`.
    #[serde(default)]
    pub out_of_plane_fwhm: Option<f64>,
    pub output_dir: PathBuf,
    /// Scanner-to-density map; without it the volume is taken as density.
    #[serde(default)]
    pub calibration: Option<Calibration>,
    #[serde(default)]
    pub patches: PatchConfig,
    #[serde(default)]
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub prior: Nix2Prior,
    #[serde(default)]
    pub mcem: McemConfig,
    #[serde(default)]
    pub baseline_threshold: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(path, "config", e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.volume);
        fix(&mut self.mesh);
        fix(&mut self.output_dir);
        if let Some(p) = self.psf_model.as_mut() {
            fix(p);
        }
        if let Some(p) = self.mtf.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.psf_model, &self.mtf) {
            (Some(_), Some(_)) => return Err(Error::invalid("config sets both psf_model and mtf")),
            (None, None) => return Err(Error::invalid("config needs psf_model or mtf")),
            _ => {}
        }
        if self.mtf.is_some() && self.out_of_plane_fwhm.is_none() {
            return Err(Error::invalid("config with mtf needs out_of_plane_fwhm"));
        }
        for p in [
            Some(&self.volume),
            Some(&self.mesh),
            self.psf_model.as_ref(),
            self.mtf.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(Error::format(p, "path", "input file does not exist"));
            }
        }
        if self.patches.count == 0 {
            return Err(Error::invalid("patches.count must be positive"));
        }
        if !(self.kernel.step > 0.0) {
            return Err(Error::invalid("kernel.step must be positive"));
        }
        self.prior.validate()
    }

    pub fn estimate_config(&self) -> EstimateConfig {
        EstimateConfig {
            patches: self.patches,
            profiles: self.profiles,
            noise: self.noise,
            kernel: self.kernel,
            mcem: self.mcem,
            baseline_threshold: self.baseline_threshold,
            master_seed: self.master_seed,
        }
    }

    /// Reads and calibrates the scan.
    pub fn load_volume(&self) -> Result<Volume> {
        let v = read_metaimage(&self.volume)?;
        match self.calibration {
            Some(c) => v.calibrate_density(c.slope, c.intercept),
            None => Ok(v.assume_calibrated()),
        }
    }

    pub fn load_mesh(&self) -> Result<SurfaceMesh> {
        read_ply(&self.mesh)
    }

    /// Reads the PSF model or fits it from the MTF samples.
    pub fn load_psf(&self) -> Result<PsfModel> {
        if let Some(p) = &self.psf_model {
            return read_psf_model(p);
        }
        let path = self
            .mtf
            .as_ref()
            .ok_or_else(|| Error::invalid("config needs psf_model or mtf"))?;
        let fwhm = self.out_of_plane_fwhm.unwrap_or(0.0);
        fit_mtf_auto(&read_mtf_csv(path)?, self.master_seed)?.with_out_of_plane_sigma(fwhm_to_sigma(fwhm))
    }
}

pub fn read_psf_model(path: &Path) -> Result<PsfModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, "psf model", e.to_string()))
}
