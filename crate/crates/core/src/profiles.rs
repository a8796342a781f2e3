//! 1-D density profiles sampled perpendicular to the mesh.
//!
//! Profile coordinates run along `-n`, where the unit normal `n` points
//! from the trabecular side toward the background: negative `t` lies on the
//! background side of the vertex, positive `t` inside the bone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::patches::Patch;
use crate::volume::Volume;
use crate::{vec3, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub patch_id: usize,
    pub vertex_id: usize,
    /// Angle between profile direction and the scanner z-axis, degrees in [0, 90].
    pub alpha_deg: f64,
    /// Sample positions (mm), uniform and strictly increasing.
    pub ts: Vec<f64>,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn new(patch_id: usize, vertex_id: usize, alpha_deg: f64, ts: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if ts.len() != values.len() || ts.len() < 2 {
            return Err(Error::invalid("profile needs >= 2 samples and matching lengths"));
        }
        let step = ts[1] - ts[0];
        if !(step > 0.0) {
            return Err(Error::invalid("profile positions must be strictly increasing"));
        }
        for w in ts.windows(2) {
            if ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0) {
                return Err(Error::invalid("profile positions must be uniformly spaced"));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("profile values must be finite"));
        }
        if !(0.0..=90.0).contains(&alpha_deg) {
            return Err(Error::invalid(format!("profile angle {alpha_deg} outside [0, 90]")));
        }
        Ok(Self {
            patch_id,
            vertex_id,
            alpha_deg,
            ts,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.ts[1] - self.ts[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub patch_id: usize,
    pub profiles: Vec<Profile>,
    /// Profiles discarded because a sample fell outside the volume.
    pub dropped: usize,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Profiles span `[-half_length, half_length]` mm.
    pub half_length: f64,
    pub step: f64,
    pub min_profiles: usize,
    pub max_profiles: usize,
    /// Flip normals so they point toward the lower-density (background) side.
    pub orient: bool,
    /// Probe distance (mm) used for orientation.
    pub orient_probe: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            half_length: 3.0,
            step: 0.1,
            min_profiles: 11,
            max_profiles: 31,
            orient: true,
            orient_probe: 2.0,
        }
    }
}

impl ProfileConfig {
    pub fn positions(&self) -> Vec<f64> {
        let n = (self.half_length / self.step + 1e-9).floor() as i64;
        (-n..=n).map(|i| i as f64 * self.step).collect()
    }
}

/// Angle (degrees) between a direction and the z-axis, folded into [0, 90].
pub fn alpha_of(normal: Vec3) -> f64 {
    let c = (normal[2].abs() / vec3::norm(normal)).min(1.0);
    c.acos().to_degrees()
}

fn side_mean(volume: &Volume, p: Vec3, dir: Vec3, probe: f64) -> Option<f64> {
    let mut acc = 0.0;
    for f in [0.75, 1.0, 1.25] {
        acc += volume
            .trilinear_sample(vec3::add(p, vec3::scale(dir, f * probe)))
            .ok()?;
    }
    Some(acc / 3.0)
}

/// Normal pointing toward the background side of `p`.
pub fn oriented_normal(volume: &Volume, p: Vec3, normal: Vec3, probe: f64) -> Vec3 {
    let plus = side_mean(volume, p, normal, probe);
    let minus = side_mean(volume, p, vec3::scale(normal, -1.0), probe);
    match (plus, minus) {
        (Some(a), Some(b)) if a > b => vec3::scale(normal, -1.0),
        _ => normal,
    }
}

/// Samples the volume along `-normal` at `ts`; `None` if any sample leaves the volume.
pub fn sample_line(volume: &Volume, p: Vec3, normal: Vec3, ts: &[f64]) -> Option<Vec<f64>> {
    ts.iter()
        .map(|&t| volume.trilinear_sample(vec3::sub(p, vec3::scale(normal, t))).ok())
        .collect()
}

pub fn extract_profiles(
    volume: &Volume,
    mesh: &SurfaceMesh,
    patch: &Patch,
    cfg: &ProfileConfig,
    seed: u64,
) -> Result<ProfileSet> {
    if !volume.is_calibrated() {
        return Err(Error::invalid("profiles must be extracted from a calibrated volume"));
    }
    if !(cfg.step > 0.0) || !(cfg.half_length >= cfg.step) {
        return Err(Error::invalid(
            "profile step must be positive and below the half length",
        ));
    }
    let mut vertices = patch.vertex_ids.clone();
    if vertices.len() > cfg.max_profiles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vertices.shuffle(&mut rng);
        vertices.truncate(cfg.max_profiles);
        vertices.sort_unstable();
    }
    let ts = cfg.positions();
    let mut profiles = Vec::with_capacity(vertices.len());
    let mut dropped = 0;
    for v in vertices {
        let p = mesh.vertices[v];
        let mut n = mesh.normals[v];
        if cfg.orient {
            n = oriented_normal(volume, p, n, cfg.orient_probe);
        }
        match sample_line(volume, p, n, &ts) {
            Some(values) => profiles.push(Profile {
                patch_id: patch.id,
                vertex_id: v,
                alpha_deg: alpha_of(n),
                ts: ts.clone(),
                values,
            }),
            None => dropped += 1,
        }
    }
    if profiles.is_empty() {
        return Err(Error::EmptyPatch(patch.id));
    }
    Ok(ProfileSet {
        patch_id: patch.id,
        profiles,
        dropped,
    })
}
