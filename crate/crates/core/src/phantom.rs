//! Synthetic ground-truth scans of plates and cylindrical shells.
//!
//! The ideal density field is rasterised on a grid `super_sampling` times
//! finer than the output. Each fine sample takes the partial-volume mix of
//! the three densities over its footprint across the local surface, so thin
//! layers are represented without aliasing. The fine field is blurred by the
//! separable PSF (in-plane line-spread function along x and y, Gaussian
//! along z) and box-averaged onto the output grid. Blur and box average are
//! fused into one decimating kernel per axis, so the fine field is only ever
//! materialised one scanline at a time.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::metaimage::{encode_metaimage, raw_path_for, ElementType};
use crate::io::ply::encode_ply;
use crate::io::OutputSet;
use crate::mesh::SurfaceMesh;
use crate::psf::{combined_kernel, PsfModel};
use crate::volume::Volume;
use crate::{derive_seed, vec3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// Infinite plate through the origin whose normal makes `alpha_deg` with
    /// the z-axis (tilted in the x-z plane) and points to the background.
    /// The mesh covers a `size` x `size` mm square of the mid-plane.
    Plate {
        alpha_deg: f64,
        thickness: f64,
        #[serde(default = "default_plate_size")]
        size: f64,
    },
    /// Infinite cylindrical shell around `axis` through the origin, with
    /// trabecular density inside and background outside. The mesh covers
    /// `length` mm of the mid-surface centered on the origin.
    Shell {
        radius: f64,
        thickness: f64,
        axis: Vec3,
        #[serde(default = "default_shell_length")]
        length: f64,
    },
}

fn default_plate_size() -> f64 {
    4.0
}

fn default_shell_length() -> f64 {
    4.0
}

impl Geometry {
    pub fn thickness(&self) -> f64 {
        match *self {
            Geometry::Plate { thickness, .. } | Geometry::Shell { thickness, .. } => thickness,
        }
    }

    /// Signed distance from the mid-surface (positive toward the background)
    /// and the unit surface normal at the closest mid-surface point.
    fn signed_distance(&self, p: Vec3) -> (f64, Vec3) {
        match *self {
            Geometry::Plate { alpha_deg, .. } => {
                let n = plate_normal(alpha_deg);
                (vec3::dot(n, p), n)
            }
            Geometry::Shell { radius, axis, .. } => {
                let u = vec3::normalize(axis);
                let v = vec3::sub(p, vec3::scale(u, vec3::dot(p, u)));
                let r = vec3::norm(v);
                let n = if r > 0.0 {
                    vec3::scale(v, 1.0 / r)
                } else {
                    perpendicular(u)
                };
                (r - radius, n)
            }
        }
    }
}

fn plate_normal(alpha_deg: f64) -> Vec3 {
    let a = alpha_deg.to_radians();
    [a.sin(), 0.0, a.cos()]
}

/// A unit vector perpendicular to `u`, preferring the x-z plane.
fn perpendicular(u: Vec3) -> Vec3 {
    let c = vec3::cross(u, [0.0, 1.0, 0.0]);
    if vec3::norm(c) > 1e-6 {
        vec3::normalize(c)
    } else {
        vec3::normalize(vec3::cross(u, [1.0, 0.0, 0.0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub spacing: [f64; 3],
    /// Output dimensions; when unset the grid covers the mesh plus `margin`.
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// White noise added on the output grid.
    #[default]
    PostBlur,
    /// White noise added to the fine field before blurring, scaled so that
    /// its SD on the output grid equals `noise_sd`.
    PreBlur,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub geometry: Geometry,
    /// Background, cortical and trabecular density.
    pub densities: [f64; 3],
    pub grid: GridSpec,
    pub noise_sd: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    pub super_sampling: usize,
    pub seed: u64,
    /// Target mesh edge length (mm).
    #[serde(default = "default_mesh_spacing")]
    pub mesh_spacing: f64,
}

fn default_mesh_spacing() -> f64 {
    0.25
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let t = self.geometry.thickness();
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid("phantom thickness must be positive"));
        }
        if self.grid.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("phantom grid spacing must be positive"));
        }
        if self.super_sampling < 4 {
            return Err(Error::invalid("super_sampling must be at least 4"));
        }
        let fine = self.grid.spacing.iter().copied().fold(f64::INFINITY, f64::min) / self.super_sampling as f64;
        if fine > t / 4.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "fine spacing {fine:.4} mm resolves the {t} mm layer by fewer than 4 samples; raise super_sampling"
            )));
        }
        if !(self.noise_sd >= 0.0) || self.densities.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("noise_sd must be >= 0 and densities finite"));
        }
        if !(self.mesh_spacing > 0.0) || !(self.grid.margin >= 0.0) {
            return Err(Error::invalid("mesh_spacing must be positive and margin >= 0"));
        }
        match self.geometry {
            Geometry::Plate { size, .. } if !(size > 0.0) => Err(Error::invalid("plate size must be positive")),
            Geometry::Shell {
                radius, axis, length, ..
            } => {
                if !(radius > t) {
                    return Err(Error::invalid("shell radius must exceed its thickness"));
                }
                if !(vec3::norm(axis) > 0.0) || !(length > 0.0) {
                    return Err(Error::invalid("shell axis must be nonzero and length positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth record written next to a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub thickness_mm: f64,
    pub densities: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mesh: SurfaceMesh,
    pub truth: GroundTruth,
}

impl Phantom {
    /// Writes `<stem>.mhd` / `<stem>.raw`, `<stem>.ply` and
    /// `<stem>_truth.json` into `dir`, all or nothing.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mhd = dir.join(format!("{stem}.mhd"));
        let raw = raw_path_for(&mhd);
        let raw_name = format!("{stem}.raw");
        let (header, bytes) = encode_metaimage(&self.volume, ElementType::Float, &raw_name);
        let mut out = OutputSet::new();
        out.stage(&raw, &bytes)?;
        out.stage(&mhd, header.as_bytes())?;
        out.stage(dir.join(format!("{stem}.ply")), encode_ply(&self.mesh).as_bytes())?;
        let truth = serde_json::to_string_pretty(&self.truth)? + "\n";
        out.stage(dir.join(format!("{stem}_truth.json")), truth.as_bytes())?;
        out.commit()
    }
}

/// Triangulated mid-surface of a plate phantom, normals toward the background.
pub fn plate_mesh(spec: &PhantomSpec) -> Result<SurfaceMesh> {
    let Geometry::Plate {
        alpha_deg,
        thickness,
        size,
    } = spec.geometry
    else {
        return Err(Error::invalid("plate_mesh needs a plate geometry"));
    };
    let n = plate_normal(alpha_deg);
    let e1 = perpendicular(n);
    let e2 = vec3::cross(n, e1);
    let cells = (size / spec.mesh_spacing).ceil().max(1.0) as usize;
    let h = size / cells as f64;
    let mut vertices = Vec::with_capacity((cells + 1) * (cells + 1));
    for b in 0..=cells {
        for a in 0..=cells {
            let (u, v) = (a as f64 * h - size / 2.0, b as f64 * h - size / 2.0);
            vertices.push(vec3::add(vec3::scale(e1, u), vec3::scale(e2, v)));
        }
    }
    let triangles = grid_triangles(cells + 1, cells + 1, false);
    finish_mesh(vertices, vec![n; (cells + 1) * (cells + 1)], triangles, thickness)
}

/// Triangulated mid-surface of a shell phantom with outward normals.
pub fn shell_mesh(spec: &PhantomSpec) -> Result<SurfaceMesh> {
    let Geometry::Shell {
        radius,
        thickness,
        axis,
        length,
    } = spec.geometry
    else {
        return Err(Error::invalid("shell_mesh needs a shell geometry"));
    };
    let u = vec3::normalize(axis);
    let e1 = perpendicular(u);
    let e2 = vec3::cross(u, e1);
    // a multiple of four so the vertices include the extreme normal angles
    let around = ((2.0 * std::f64::consts::PI * radius / spec.mesh_spacing / 4.0).ceil() as usize).max(4) * 4;
    let rings = (length / spec.mesh_spacing).ceil().max(1.0) as usize + 1;
    let mut vertices = Vec::with_capacity(around * rings);
    let mut normals = Vec::with_capacity(around * rings);
    for b in 0..rings {
        let a = (b as f64 / (rings - 1) as f64 - 0.5) * length;
        for k in 0..around {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / around as f64;
            let n = vec3::add(vec3::scale(e1, phi.cos()), vec3::scale(e2, phi.sin()));
            vertices.push(vec3::add(vec3::scale(u, a), vec3::scale(n, radius)));
            normals.push(n);
        }
    }
    let triangles = grid_triangles(around, rings, true);
    finish_mesh(vertices, normals, triangles, thickness)
}

/// Mid-surface mesh of any phantom geometry.
pub fn phantom_mesh(spec: &PhantomSpec) -> Result<SurfaceMesh> {
    match spec.geometry {
        Geometry::Plate { .. } => plate_mesh(spec),
        Geometry::Shell { .. } => shell_mesh(spec),
    }
}

/// Two triangles per cell of an `nu` x `nv` vertex grid stored u-fastest;
/// `wrap` closes the grid along u.
fn grid_triangles(nu: usize, nv: usize, wrap: bool) -> Vec<[usize; 3]> {
    let cells_u = if wrap { nu } else { nu - 1 };
    let mut tris = Vec::with_capacity(2 * cells_u * (nv - 1));
    for b in 0..nv - 1 {
        for a in 0..cells_u {
            let a1 = (a + 1) % nu;
            let (v00, v10, v01, v11) = (b * nu + a, b * nu + a1, (b + 1) * nu + a, (b + 1) * nu + a1);
            tris.push([v00, v10, v11]);
            tris.push([v00, v11, v01]);
        }
    }
    tris
}

fn finish_mesh(
    vertices: Vec<Vec3>,
    normals: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    thickness: f64,
) -> Result<SurfaceMesh> {
    let n = vertices.len();
    let mut mesh = SurfaceMesh::new(vertices, normals, triangles)?;
    mesh.thickness = Some(vec![thickness; n]);
    Ok(mesh)
}

/// Output grid dimensions and origin: explicit dims are centered on the
/// origin, otherwise the grid covers the mesh bounding box plus the margin.
fn output_grid(spec: &PhantomSpec, mesh: &SurfaceMesh) -> ([usize; 3], Vec3) {
    let s = spec.grid.spacing;
    let mut dims = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let n = match spec.grid.dims {
            Some(d) => d[a].max(1),
            None => {
                let ext = mesh.vertices.iter().map(|v| v[a].abs()).fold(0.0, f64::max) + spec.grid.margin;
                2 * (ext / s[a]).ceil() as usize + 1
            }
        };
        dims[a] = n;
        origin[a] = -((n - 1) as f64) * s[a] / 2.0;
    }
    (dims, origin)
}

/// Partial-volume mix of the three densities over a fine sample whose
/// footprint across the surface is modelled as a uniform interval of
/// width `a` centered at signed distance `d`.
fn mix(d: f64, a: f64, half: f64, rho: [f64; 3]) -> f64 {
    let above = ((d + a / 2.0 - half) / a).clamp(0.0, 1.0);
    let below = ((-half - (d - a / 2.0)) / a).clamp(0.0, 1.0);
    above * rho[0] + (1.0 - above - below) * rho[1] + below * rho[2]
}

/// Ideal field averaged over the fine sample centered at `p` with extents `h`.
fn fine_value(geom: &Geometry, p: Vec3, h: [f64; 3], rho: [f64; 3]) -> f64 {
    let (d, n) = geom.signed_distance(p);
    let a = ((n[0] * h[0]).powi(2) + (n[1] * h[1]).powi(2) + (n[2] * h[2]).powi(2)).sqrt();
    mix(d, a, geom.thickness() / 2.0, rho)
}

/// Blur kernel on the fine grid convolved with the `ss`-sample box average,
/// as weights over `ss + taps - 1` consecutive fine samples.
fn decimating_kernel(taps: &[f64], ss: usize) -> Vec<f64> {
    let sum: f64 = taps.iter().sum();
    let mut k = vec![0.0; taps.len() + ss - 1];
    for q in 0..ss {
        for (m, t) in taps.iter().enumerate() {
            k[q + m] += t / (sum * ss as f64);
        }
    }
    k
}

/// Applies a decimating kernel along a line of `n_out * ss` fine samples
/// with mirrored edges. Output `i` averages fine samples `i*ss..(i+1)*ss`.
fn decimate_line(line: &[f64], kernel: &[f64], ss: usize, out: &mut [f64]) {
    let half = (kernel.len() - ss) / 2;
    let n = line.len() as isize;
    let reflect = |j: isize| {
        let period = 2 * n;
        let r = j.rem_euclid(period);
        (if r < n { r } else { period - 1 - r }) as usize
    };
    for (i, o) in out.iter_mut().enumerate() {
        let start = (i * ss) as isize - half as isize;
        let mut acc = 0.0;
        for (m, k) in kernel.iter().enumerate() {
            acc += k * line[reflect(start + m as isize)];
        }
        *o = acc;
    }
}

/// Rasterises, blurs, downsamples and adds noise.
pub fn synthesize_phantom(spec: &PhantomSpec, psf: &PsfModel) -> Result<Phantom> {
    spec.validate()?;
    let mesh = phantom_mesh(spec)?;
    let (dims, origin) = output_grid(spec, &mesh);
    let ss = spec.super_sampling;
    let sp = spec.grid.spacing;
    let h = [sp[0] / ss as f64, sp[1] / ss as f64, sp[2] / ss as f64];
    let fine = [dims[0] * ss, dims[1] * ss, dims[2] * ss];
    let fine_pos = |a: usize, j: usize| origin[a] - sp[a] / 2.0 + (j as f64 + 0.5) * h[a];

    // x and y see the in-plane line-spread function, z the slice profile
    let kernels: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let alpha = if a == 2 { 0.0 } else { 90.0 };
            decimating_kernel(combined_kernel(psf, alpha, h[a]).taps(), ss)
        })
        .collect();
    let pre_blur_sd = match spec.noise_mode {
        NoiseMode::PreBlur if spec.noise_sd > 0.0 => {
            let gain: f64 = kernels.iter().map(|k| k.iter().map(|v| v * v).sum::<f64>()).product();
            Some(spec.noise_sd / gain.sqrt())
        }
        _ => None,
    };

    // x pass: rasterise each fine x-line and decimate it
    let geom = spec.geometry;
    let rho = spec.densities;
    let mut stage_x = vec![0.0; dims[0] * fine[1] * fine[2]];
    stage_x.par_chunks_mut(dims[0]).enumerate().for_each(|(row, out)| {
        let (jy, jz) = (row % fine[1], row / fine[1]);
        let (y, z) = (fine_pos(1, jy), fine_pos(2, jz));
        let mut line: Vec<f64> = (0..fine[0])
            .map(|jx| fine_value(&geom, [fine_pos(0, jx), y, z], h, rho))
            .collect();
        if let Some(sd) = pre_blur_sd {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, row as u64));
            let normal = Normal::new(0.0, sd).expect("finite noise SD");
            line.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        decimate_line(&line, &kernels[0], ss, out);
    });

    // y pass over lines of fixed (ix, jz)
    let mut stage_y = vec![0.0; dims[0] * dims[1] * fine[2]];
    stage_y
        .par_chunks_mut(dims[0] * dims[1])
        .enumerate()
        .for_each(|(jz, plane)| {
            let mut line = vec![0.0; fine[1]];
            let mut out = vec![0.0; dims[1]];
            for ix in 0..dims[0] {
                for (jy, v) in line.iter_mut().enumerate() {
                    *v = stage_x[ix + dims[0] * (jy + fine[1] * jz)];
                }
                decimate_line(&line, &kernels[1], ss, &mut out);
                for (iy, v) in out.iter().enumerate() {
                    plane[ix + dims[0] * iy] = *v;
                }
            }
        });
    drop(stage_x);

    // z pass over lines of fixed (ix, iy)
    let plane = dims[0] * dims[1];
    let columns: Vec<Vec<f64>> = (0..plane)
        .into_par_iter()
        .map(|c| {
            let line: Vec<f64> = (0..fine[2]).map(|jz| stage_y[c + plane * jz]).collect();
            let mut out = vec![0.0; dims[2]];
            decimate_line(&line, &kernels[2], ss, &mut out);
            out
        })
        .collect();
    let mut data = vec![0.0; plane * dims[2]];
    for (c, col) in columns.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            data[c + plane * k] = *v;
        }
    }

    if spec.noise_mode == NoiseMode::PostBlur && spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sd).expect("finite noise SD");
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    let volume = Volume::new(dims, sp, origin, data)?.assume_calibrated();
    Ok(Phantom {
        volume,
        mesh,
        truth: GroundTruth {
            thickness_mm: geom.thickness(),
            densities: rho,
            seed: spec.seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bone_model::mean_profile;
    use crate::profiles::alpha_of;
    use crate::psf::fwhm_to_sigma;

    fn psf() -> PsfModel {
        PsfModel::gaussian(0.3, fwhm_to_sigma(1.0)).unwrap()
    }

    fn plate_spec(alpha: f64, thickness: f64, ss: usize, noise: f64) -> PhantomSpec {
        PhantomSpec {
            geometry: Geometry::Plate {
                alpha_deg: alpha,
                thickness,
                size: 2.0,
            },
            densities: [0.0, 1200.0, 200.0],
            grid: GridSpec {
                spacing: [0.234, 0.234, 1.0],
                dims: None,
                margin: 3.5,
            },
            noise_sd: noise,
            noise_mode: NoiseMode::PostBlur,
            super_sampling: ss,
            seed: 11,
            mesh_spacing: 0.25,
        }
    }

    fn shell_spec(axis: Vec3) -> PhantomSpec {
        PhantomSpec {
            geometry: Geometry::Shell {
                radius: 4.0,
                thickness: 0.3,
                axis,
                length: 3.0,
            },
            mesh_spacing: 0.2,
            ..plate_spec(90.0, 0.3, 4, 0.0)
        }
    }

    /// Profile through the volume center along x, at voxel centers.
    fn x_line(v: &Volume) -> (Vec<f64>, Vec<f64>) {
        let d = v.dims();
        let (j, k) = (d[1] / 2, d[2] / 2);
        (0..d[0]).map(|i| (v.voxel_center(i, j, k)[0], v.get(i, j, k))).unzip()
    }

    #[test]
    fn plate_profile_matches_forward_model() {
        let spec = plate_spec(90.0, 0.3, 8, 0.0);
        let ph = synthesize_phantom(&spec, &psf()).unwrap();
        let (xs, vals) = x_line(&ph.volume);
        // profile coordinate t runs against the background-pointing normal
        let ts: Vec<f64> = xs.iter().map(|x| -x).collect();
        let kernel = combined_kernel(&psf(), 90.0, 0.002);
        let model = mean_profile(&kernel, 0.15, 0.0, [0.0, 1200.0, 200.0], &ts);
        let worst = vals.iter().zip(&model).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.02 * 1200.0, "max deviation {worst}");
    }

    #[test]
    fn constant_densities_give_constant_volume() {
        let mut spec = plate_spec(30.0, 0.3, 4, 0.0);
        spec.densities = [321.0; 3];
        let ph = synthesize_phantom(&spec, &psf()).unwrap();
        assert!(ph.volume.data().iter().all(|v| (v - 321.0).abs() < 1e-9));
    }

    #[test]
    fn doubling_super_sampling_barely_changes_values() {
        let a = synthesize_phantom(&plate_spec(60.0, 0.3, 6, 0.0), &psf()).unwrap();
        let b = synthesize_phantom(&plate_spec(60.0, 0.3, 12, 0.0), &psf()).unwrap();
        assert_eq!(a.volume.dims(), b.volume.dims());
        let worst = a
            .volume
            .data()
            .iter()
            .zip(b.volume.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.005 * 1200.0, "max change {worst}");
    }

    #[test]
    fn blur_conserves_mass() {
        let spec = plate_spec(90.0, 0.3, 6, 0.0);
        let ph = synthesize_phantom(&spec, &psf()).unwrap();
        // exact ideal mean from the overlap of each voxel with the three layers
        let v = &ph.volume;
        let d = v.dims();
        let s = v.spacing()[0];
        let overlap = |a: f64, b: f64, lo: f64, hi: f64| (b.min(hi) - a.max(lo)).max(0.0);
        let mut ideal = 0.0;
        for i in 0..d[0] {
            let a = v.voxel_center(i, 0, 0)[0] - s / 2.0;
            let b = a + s;
            ideal += 200.0 * overlap(a, b, f64::NEG_INFINITY, -0.15) + 1200.0 * overlap(a, b, -0.15, 0.15);
        }
        let ideal_mean = ideal / (d[0] as f64 * s);
        let mean = v.data().iter().sum::<f64>() / v.data().len() as f64;
        assert!((mean - ideal_mean).abs() <= 1e-3 * ideal_mean, "{mean} vs {ideal_mean}");
    }

    #[test]
    fn noise_sd_is_reproduced() {
        let mut spec = plate_spec(90.0, 0.3, 4, 0.0);
        spec.grid.dims = Some([60, 60, 30]);
        let clean = synthesize_phantom(&spec, &psf()).unwrap();
        spec.noise_sd = 25.0;
        let noisy = synthesize_phantom(&spec, &psf()).unwrap();
        let diff: Vec<f64> = noisy
            .volume
            .data()
            .iter()
            .zip(clean.volume.data())
            .map(|(a, b)| a - b)
            .collect();
        assert!(diff.len() >= 100_000);
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
        assert!((sd / 25.0 - 1.0).abs() < 0.03, "sd {sd}");
    }

    #[test]
    fn pre_blur_noise_is_scaled_to_the_output_sd() {
        let mut spec = plate_spec(90.0, 0.3, 4, 0.0);
        spec.grid.dims = Some([64, 64, 24]);
        let clean = synthesize_phantom(&spec, &psf()).unwrap();
        spec.noise_sd = 20.0;
        spec.noise_mode = NoiseMode::PreBlur;
        let noisy = synthesize_phantom(&spec, &psf()).unwrap();
        // interior voxels only: mirrored edges correlate the border noise
        let (a, b) = (&noisy.volume, &clean.volume);
        let mut sq = Vec::new();
        for k in 4..20 {
            for j in 10..54 {
                for i in 10..54 {
                    sq.push((a.get(i, j, k) - b.get(i, j, k)).powi(2));
                }
            }
        }
        let sd = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
        // strongly correlated noise: few independent samples, loose tolerance
        assert!((sd / 20.0 - 1.0).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = plate_spec(45.0, 0.2, 6, 30.0);
        let a = synthesize_phantom(&spec, &psf()).unwrap();
        let b = synthesize_phantom(&spec, &psf()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shell_along_z_has_horizontal_normals() {
        let mesh = shell_mesh(&shell_spec([0.0, 0.0, 1.0])).unwrap();
        assert!(mesh.normals.iter().all(|&n| (alpha_of(n) - 90.0).abs() < 1e-9));
    }

    #[test]
    fn tilted_shell_covers_45_to_90_degrees() {
        let mesh = shell_mesh(&shell_spec([1.0, 0.0, 1.0])).unwrap();
        let alphas: Vec<f64> = mesh.normals.iter().map(|&n| alpha_of(n)).collect();
        let lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = alphas.iter().copied().fold(0.0, f64::max);
        assert!((lo - 45.0).abs() < 0.1 && (hi - 90.0).abs() < 1e-9, "{lo} {hi}");
        // no gaps wider than 3 degrees in the covered range
        let mut sorted = alphas.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted.windows(2).all(|w| w[1] - w[0] < 3.0));
    }

    #[test]
    fn shell_area_matches_cylinder() {
        let mesh = shell_mesh(&shell_spec([1.0, 0.0, 1.0])).unwrap();
        let exact = 2.0 * std::f64::consts::PI * 4.0 * 3.0;
        assert!((mesh.area() / exact - 1.0).abs() < 0.01, "{} vs {exact}", mesh.area());
    }

    #[test]
    fn shell_normals_point_to_background() {
        let spec = shell_spec([1.0, 0.0, 1.0]);
        let ph = synthesize_phantom(&spec, &psf()).unwrap();
        let v = &ph.mesh.vertices[5];
        let n = ph.mesh.normals[5];
        let out = ph.volume.trilinear_sample(vec3::add(*v, vec3::scale(n, 2.0))).unwrap();
        let inn = ph.volume.trilinear_sample(vec3::sub(*v, vec3::scale(n, 2.0))).unwrap();
        assert!(out < 20.0 && (inn - 200.0).abs() < 20.0, "{out} {inn}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(plate_spec(90.0, 0.15, 4, 0.0).validate().is_err());
        assert!(plate_spec(90.0, 0.15, 7, 0.0).validate().is_ok());
        assert!(plate_spec(90.0, 0.3, 3, 0.0).validate().is_err());
        assert!(plate_spec(90.0, -0.3, 8, 0.0).validate().is_err());
        let json = r#"{"geometry":{"type":"plate","alpha_deg":0,"thickness":0.3,"bogus":1},
            "densities":[0,1,2],"grid":{"spacing":[1,1,1]},"noise_sd":0,"super_sampling":4,"seed":0}"#;
        assert!(serde_json::from_str::<PhantomSpec>(json).is_err());
    }

    #[test]
    fn write_emits_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let ph = synthesize_phantom(&plate_spec(90.0, 0.3, 4, 5.0), &psf()).unwrap();
        ph.write(dir.path(), "p").unwrap();
        for f in ["p.mhd", "p.raw", "p.ply", "p_truth.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let truth: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("p_truth.json")).unwrap()).unwrap();
        assert_eq!(truth.thickness_mm, 0.3);
        assert_eq!(truth.seed, 11);
    }
}
