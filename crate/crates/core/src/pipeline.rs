//! Specimen-level estimation: patch placement, per-patch MCEM, merging of
//! overlapping patches, the threshold baseline and comparison statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bone_model::NoiseParams;
use crate::error::{Error, Result};
use crate::inference::{mcem_estimate_patch, McemConfig, Nix2Prior, PatchEstimate};
use crate::mesh::SurfaceMesh;
use crate::patches::{multiplicity, place_patches, Patch};
use crate::profiles::{extract_profiles, ProfileConfig, ProfileSet};
use crate::psf::{Aperture, KernelBank, PsfModel};
use crate::volume::Volume;
use crate::{derive_seed, Vec3};

/// Stream tags for seeds derived from the master seed.
const STREAM_PATCHES: u64 = 0;
const STREAM_PROFILES: u64 = 1 << 32;
const STREAM_MCEM: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub count: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { count: 48 }
    }
}

/// Noise settings. `sigma_eps` wins over `background_roi`; with neither the
/// blurred noise term is off. `sigma_xi` defaults to a fraction of the
/// prior cortical-trabecular contrast.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma_eps: Option<f64>,
    pub sigma_xi: Option<f64>,
    /// Axis-aligned box (lower and upper corner, mm) of pure background.
    pub background_roi: Option<[Vec3; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Sampling step of the discretised profile kernels (mm).
    pub step: f64,
    /// Add the voxel box-average and interpolation blur to the PSF.
    pub voxel_aperture: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            step: 0.005,
            voxel_aperture: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub patches: PatchConfig,
    pub profiles: ProfileConfig,
    pub noise: NoiseConfig,
    pub kernel: KernelConfig,
    pub mcem: McemConfig,
    /// Threshold of the apparent-thickness baseline; defaults to the
    /// midpoint of the cortical and trabecular prior means.
    pub baseline_threshold: Option<f64>,
    pub master_seed: u64,
}

/// Noise parameters for a run. The background SD is converted to the
/// measurement-noise scale with the in-plane (90 degree) kernel.
pub fn resolve_noise(volume: &Volume, bank: &KernelBank, prior: &Nix2Prior, cfg: &NoiseConfig) -> Result<NoiseParams> {
    let sigma_xi = cfg.sigma_xi.unwrap_or_else(|| prior.default_sigma_xi());
    let sigma_eps = match (cfg.sigma_eps, cfg.background_roi) {
        (Some(s), _) => s,
        (None, Some([lo, hi])) => {
            let (_, sd, n) = volume
                .roi_stats(lo, hi)
                .ok_or_else(|| Error::invalid("background ROI contains no voxels"))?;
            log::info!("background ROI: {n} voxels, SD {sd:.3}");
            NoiseParams::sigma_eps_from_background(sd, &bank.kernel(90.0))
        }
        (None, None) => {
            log::warn!("no sigma_eps or background ROI given; measurement-noise term disabled");
            0.0
        }
    };
    NoiseParams::new(sigma_eps, sigma_xi)
}

/// Result of one patch: an estimate or the reason it was skipped.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchOutcome {
    Estimated {
        estimate: PatchEstimate,
        /// Apparent thickness of every profile of the patch (mm).
        baseline: Vec<f64>,
    },
    Skipped {
        patch_id: usize,
        reason: String,
    },
}

impl PatchOutcome {
    pub fn patch_id(&self) -> usize {
        match self {
            PatchOutcome::Estimated { estimate, .. } => estimate.patch_id,
            PatchOutcome::Skipped { patch_id, .. } => *patch_id,
        }
    }

    /// One-line status for progress output.
    pub fn status_line(&self) -> String {
        match self {
            PatchOutcome::Estimated { estimate: e, .. } => format!(
                "patch {}: {} profiles, thickness {:.4} +/- {:.4} mm, {} iterations, K {}, {:?}",
                e.patch_id, e.n_profiles, e.thickness_mean, e.thickness_sd, e.iterations, e.final_k, e.stop_reason
            ),
            PatchOutcome::Skipped { patch_id, reason } => format!("patch {patch_id}: skipped ({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessModel {
    /// Input mesh with per-vertex thickness and multiplicity filled.
    pub mesh: SurfaceMesh,
    pub patches: Vec<Patch>,
    /// Successful patch estimates, ordered by patch id.
    pub patch_estimates: Vec<PatchEstimate>,
    /// Patches that produced no estimate, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub specimen_mean: f64,
    pub specimen_sd: f64,
    /// Number of successful patches covering each vertex.
    pub coverage: Vec<u32>,
    /// In-region vertices no successful patch covers; they carry the
    /// specimen mean.
    pub uncovered: usize,
    pub noise: NoiseParams,
    /// Apparent thickness of every extracted profile (mm).
    pub baseline: Vec<f64>,
}

impl ThicknessModel {
    pub fn converged_patches(&self) -> usize {
        self.patch_estimates.iter().filter(|e| e.converged()).count()
    }

    pub fn all_converged(&self) -> bool {
        self.converged_patches() == self.patch_estimates.len()
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }
}

#[allow(clippy::too_many_arguments)]
fn estimate_patch(
    volume: &Volume,
    mesh: &SurfaceMesh,
    patch: &Patch,
    bank: &KernelBank,
    noise: NoiseParams,
    prior: &Nix2Prior,
    cfg: &EstimateConfig,
    threshold: f64,
) -> PatchOutcome {
    let skip = |e: Error| PatchOutcome::Skipped {
        patch_id: patch.id,
        reason: e.to_string(),
    };
    let seed = derive_seed(cfg.master_seed, STREAM_PROFILES + patch.id as u64);
    let set = match extract_profiles(volume, mesh, patch, &cfg.profiles, seed) {
        Ok(s) => s,
        Err(e) => return skip(e),
    };
    if set.len() < cfg.profiles.min_profiles {
        log::warn!(
            "patch {}: {} profiles, below the configured minimum {}",
            patch.id,
            set.len(),
            cfg.profiles.min_profiles
        );
    }
    let seed = derive_seed(cfg.master_seed, STREAM_MCEM + patch.id as u64);
    match mcem_estimate_patch(&set, bank, noise, prior, &cfg.mcem, seed) {
        Ok(estimate) => PatchOutcome::Estimated {
            estimate,
            baseline: apparent_thickness_baseline(&set, threshold),
        },
        Err(e) => skip(e),
    }
}

/// Runs the whole specimen. Patches are processed on the current rayon
/// pool; `progress` sees each outcome as it completes.
pub fn estimate_specimen(
    volume: &Volume,
    mesh: &SurfaceMesh,
    psf: &PsfModel,
    prior: &Nix2Prior,
    cfg: &EstimateConfig,
    progress: &(dyn Fn(&PatchOutcome) + Sync),
) -> Result<ThicknessModel> {
    if !volume.is_calibrated() {
        return Err(Error::invalid("estimation needs a calibrated volume"));
    }
    prior.validate()?;
    let region = mesh.region_vertices().len();
    if region == 0 {
        return Err(Error::NoPatchSucceeded);
    }
    let count = cfg.patches.count.min(region);
    if count < cfg.patches.count {
        log::warn!("only {region} in-region vertices; placing {count} patches");
    }
    let patches = place_patches(mesh, count, derive_seed(cfg.master_seed, STREAM_PATCHES))?;
    let aperture = if cfg.kernel.voxel_aperture {
        let s = volume.spacing();
        Aperture::voxel_sampling(s[0].max(s[1]), s[2])
    } else {
        Aperture::default()
    };
    let bank = KernelBank::new(psf.clone(), cfg.kernel.step, aperture);
    let noise = resolve_noise(volume, &bank, prior, &cfg.noise)?;
    log::info!(
        "noise: sigma_eps {:.3}, sigma_xi {:.3}",
        noise.sigma_eps,
        noise.sigma_xi
    );
    let threshold = cfg
        .baseline_threshold
        .unwrap_or_else(|| prior.default_baseline_threshold());

    let outcomes: Vec<PatchOutcome> = patches
        .par_iter()
        .map(|p| {
            let out = estimate_patch(volume, mesh, p, &bank, noise, prior, cfg, threshold);
            progress(&out);
            out
        })
        .collect();

    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    let mut baseline = Vec::new();
    for o in outcomes {
        match o {
            PatchOutcome::Estimated { estimate, baseline: b } => {
                estimates.push(estimate);
                baseline.extend(b);
            }
            PatchOutcome::Skipped { patch_id, reason } => {
                log::warn!("patch {patch_id} skipped: {reason}");
                skipped.push((patch_id, reason));
            }
        }
    }
    if estimates.is_empty() {
        return Err(Error::NoPatchSucceeded);
    }
    estimates.sort_by_key(|e| e.patch_id);

    let agg = aggregate_patches(&estimates, &patches, mesh)?;
    let mut mesh = mesh.clone();
    let mut thickness = agg.vertex_thickness;
    let mut uncovered = 0;
    for (v, t) in thickness.iter_mut().enumerate() {
        if mesh.region[v] && agg.multiplicity[v] == 0 {
            *t = agg.specimen_mean;
            uncovered += 1;
        }
    }
    if uncovered > 0 {
        log::warn!("{uncovered} in-region vertices lost their covering patches; assigned the specimen mean");
    }
    mesh.thickness = Some(thickness);
    mesh.multiplicity = Some(agg.multiplicity.clone());
    Ok(ThicknessModel {
        mesh,
        patches,
        patch_estimates: estimates,
        skipped,
        specimen_mean: agg.specimen_mean,
        specimen_sd: agg.specimen_sd,
        coverage: agg.multiplicity,
        uncovered,
        noise,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Equal-weight mean of the covering patch means; 0 where uncovered.
    pub vertex_thickness: Vec<f64>,
    /// Number of estimated patches covering each vertex.
    pub multiplicity: Vec<u32>,
    /// Mixture weight of each estimate before normalisation: the sum of
    /// `1 / multiplicity` over its vertices.
    pub patch_weights: Vec<f64>,
    pub specimen_mean: f64,
    pub specimen_sd: f64,
}

/// Merges patch estimates. `estimates` refer to `patches` by id; patches
/// without an estimate do not count toward multiplicity.
pub fn aggregate_patches(estimates: &[PatchEstimate], patches: &[Patch], mesh: &SurfaceMesh) -> Result<Aggregate> {
    if estimates.is_empty() {
        return Err(Error::NoPatchSucceeded);
    }
    let patch_of = |id: usize| {
        patches
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::invalid(format!("estimate for unknown patch {id}")))
    };
    let used: Vec<&Patch> = estimates.iter().map(|e| patch_of(e.patch_id)).collect::<Result<_>>()?;
    let n = mesh.vertex_count();
    let owned: Vec<Patch> = used.iter().map(|p| (*p).clone()).collect();
    let mult = multiplicity(&owned, n);

    let mut sum = vec![0.0; n];
    for (e, p) in estimates.iter().zip(&used) {
        for &v in &p.vertex_ids {
            sum[v] += e.thickness_mean;
        }
    }
    let vertex_thickness = sum
        .iter()
        .zip(&mult)
        .map(|(s, &m)| if m > 0 { s / m as f64 } else { 0.0 })
        .collect();

    let patch_weights: Vec<f64> = used
        .iter()
        .map(|p| p.vertex_ids.iter().map(|&v| 1.0 / mult[v] as f64).sum())
        .collect();
    let total: f64 = patch_weights.iter().sum();
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (e, w) in estimates.iter().zip(&patch_weights) {
        let pi = w / total;
        m1 += pi * e.thickness_mean;
        m2 += pi * (e.thickness_sd * e.thickness_sd + e.thickness_mean * e.thickness_mean);
    }
    Ok(Aggregate {
        vertex_thickness,
        multiplicity: mult,
        patch_weights,
        specimen_mean: m1,
        specimen_sd: (m2 - m1 * m1).max(0.0).sqrt(),
    })
}

/// Per profile, the length of the run of samples above `threshold` that
/// contains the sample nearest the profile center. If the center sample is
/// below threshold the closest run is used; 0 when no sample exceeds it.
pub fn apparent_thickness_baseline(profiles: &ProfileSet, threshold: f64) -> Vec<f64> {
    profiles
        .profiles
        .iter()
        .map(|p| {
            let above: Vec<bool> = p.values.iter().map(|&v| v > threshold).collect();
            let center = (0..p.ts.len())
                .min_by(|&a, &b| p.ts[a].abs().total_cmp(&p.ts[b].abs()))
                .unwrap_or(0);
            // runs as (start, end) inclusive
            let mut runs = Vec::new();
            let mut i = 0;
            while i < above.len() {
                if above[i] {
                    let s = i;
                    while i + 1 < above.len() && above[i + 1] {
                        i += 1;
                    }
                    runs.push((s, i));
                }
                i += 1;
            }
            let gap = |&(s, e): &(usize, usize)| s.saturating_sub(center) + center.saturating_sub(e);
            runs.iter()
                .min_by(|a, b| gap(a).cmp(&gap(b)).then((b.1 - b.0).cmp(&(a.1 - a.0))))
                .map_or(0.0, |&(s, e)| (e - s + 1) as f64 * p.step())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n: usize,
    pub mean_deviation_mm: f64,
    pub sd_deviation_mm: f64,
    pub mean_deviation_pct: f64,
    pub sd_deviation_pct: f64,
    pub r2: f64,
    pub p_value: f64,
    pub rmse_mm: f64,
    pub rmse_pct: f64,
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Deviation, correlation and RMSE of `estimates` against `reference`.
pub fn compare_to_reference(estimates: &[f64], reference: &[f64]) -> Result<ComparisonReport> {
    if estimates.len() != reference.len() {
        return Err(Error::LengthMismatch {
            estimates: estimates.len(),
            reference: reference.len(),
        });
    }
    let n = estimates.len();
    if n < 3 {
        return Err(Error::invalid(format!("comparison needs at least 3 values, got {n}")));
    }
    if reference.iter().any(|&r| !(r > 0.0)) || estimates.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("reference values must be positive and estimates finite"));
    }
    let dev: Vec<f64> = estimates.iter().zip(reference).map(|(e, r)| e - r).collect();
    let pct: Vec<f64> = dev.iter().zip(reference).map(|(d, r)| 100.0 * d / r).collect();

    let (me, mr) = (mean(estimates), mean(reference));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (e, r) in estimates.iter().zip(reference) {
        sxy += (e - me) * (r - mr);
        sxx += (e - me) * (e - me);
        syy += (r - mr) * (r - mr);
    }
    // variances at rounding level count as zero
    let spread = |s: f64, m: f64| s > 1e-20 * n as f64 * m * m;
    let (r2, p_value) = if spread(sxx, me) && spread(syy, mr) {
        let r2 = (sxy * sxy / (sxx * syy)).min(1.0);
        let df = (n - 2) as f64;
        let p = if r2 >= 1.0 {
            0.0
        } else {
            let t = (r2 * df / (1.0 - r2)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
            2.0 * (1.0 - dist.cdf(t))
        };
        (r2, p)
    } else {
        (0.0, 1.0)
    };
    let rmse = (dev.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    Ok(ComparisonReport {
        n,
        mean_deviation_mm: mean(&dev),
        sd_deviation_mm: sample_sd(&dev),
        mean_deviation_pct: mean(&pct),
        sd_deviation_pct: sample_sd(&pct),
        r2,
        p_value,
        rmse_mm: rmse,
        rmse_pct: 100.0 * rmse / mr,
    })
}

/// One row per estimated patch.
pub fn patch_csv(model: &ThicknessModel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patch_id", "mean_mm", "sd_mm", "ess", "iterations"])?;
    for e in &model.patch_estimates {
        w.write_record([
            e.patch_id.to_string(),
            e.thickness_mean.to_string(),
            e.thickness_sd.to_string(),
            e.ess.to_string(),
            e.iterations.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// One row per in-region vertex.
pub fn vertex_csv(model: &ThicknessModel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["vertex_id", "thickness_mm", "multiplicity"])?;
    let t = model.mesh.thickness.as_deref().unwrap_or(&[]);
    for v in model.mesh.region_vertices() {
        w.write_record([v.to_string(), t[v].to_string(), model.coverage[v].to_string()])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Diagnostics of every patch as JSON lines.
pub fn diagnostics_jsonl(model: &ThicknessModel) -> String {
    model.patch_estimates.iter().map(|e| e.diagnostics_jsonl()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPatch {
    pub patch_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenSummary {
    pub specimen_mean_mm: f64,
    pub specimen_sd_mm: f64,
    pub patches_estimated: usize,
    pub patches_converged: usize,
    pub skipped: Vec<SkippedPatch>,
    pub uncovered_vertices: usize,
    pub sigma_eps: f64,
    pub sigma_xi: f64,
    pub baseline_mean_mm: f64,
    pub comparison: Option<ComparisonReport>,
    /// The run configuration, echoed for reproducibility.
    pub config: serde_json::Value,
}

impl SpecimenSummary {
    pub fn new(model: &ThicknessModel, comparison: Option<ComparisonReport>, config: serde_json::Value) -> Self {
        Self {
            specimen_mean_mm: model.specimen_mean,
            specimen_sd_mm: model.specimen_sd,
            patches_estimated: model.patch_estimates.len(),
            patches_converged: model.converged_patches(),
            skipped: model
                .skipped
                .iter()
                .map(|(id, r)| SkippedPatch {
                    patch_id: *id,
                    reason: r.clone(),
                })
                .collect(),
            uncovered_vertices: model.uncovered,
            sigma_eps: model.noise.sigma_eps,
            sigma_xi: model.noise.sigma_xi,
            baseline_mean_mm: model.baseline_mean(),
            comparison,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Reads a per-unit thickness column from a CSV with a header: the
/// `thickness_mm` column if present, else `mean_mm`.
pub fn read_thickness_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, "csv", e.to_string()))?;
    let headers = r
        .headers()
        .map_err(|e| Error::format(path, "header", e.to_string()))?
        .clone();
    let col = ["thickness_mm", "mean_mm"]
        .iter()
        .find_map(|name| headers.iter().position(|h| h.trim() == *name))
        .ok_or_else(|| Error::format(path, "header", "no thickness_mm or mean_mm column"))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}", i + 1), e.to_string()))?;
        let cell = rec.get(col).unwrap_or("");
        let v: f64 = cell.trim().parse().map_err(|_| {
            Error::format(
                path,
                format!("row {} {}", i + 1, &headers[col]),
                format!("'{cell}' is not a number"),
            )
        })?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bone_model::mean_profile;
    use crate::inference::{HyperParams, StopReason};
    use crate::profiles::Profile;
    use crate::psf::{combined_kernel, fwhm_to_sigma};
    use proptest::prelude::*;

    fn estimate(id: usize, mean: f64, sd: f64) -> PatchEstimate {
        let theta = HyperParams {
            mu_w: 0.0,
            sigma_w: 0.1,
            mu_rho: [0.0; 3],
            sigma_rho: [1.0; 3],
            mu_s: 0.0,
            sigma_s: 0.1,
        };
        PatchEstimate {
            patch_id: id,
            n_profiles: 1,
            theta,
            thickness_mean: mean,
            thickness_median: mean,
            thickness_sd: sd,
            iterations: 1,
            final_k: 8,
            ess: 8.0,
            delta_q_upper: 0.0,
            stop_reason: StopReason::Converged,
            diagnostics: vec![],
        }
    }

    fn patch(id: usize, vertex_ids: Vec<usize>) -> Patch {
        Patch {
            id,
            center: vertex_ids[0],
            vertex_ids,
            radius: 1.0,
        }
    }

    fn line_mesh(n: usize) -> SurfaceMesh {
        let v = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        SurfaceMesh::new(v, vec![[0.0, 0.0, 1.0]; n], vec![]).unwrap()
    }

    #[test]
    fn single_patch_passes_through() {
        let mesh = line_mesh(5);
        let agg = aggregate_patches(&[estimate(0, 0.3, 0.05)], &[patch(0, (0..5).collect())], &mesh).unwrap();
        assert!(agg.vertex_thickness.iter().all(|&t| t == 0.3));
        assert!((agg.specimen_mean - 0.3).abs() < 1e-15);
        assert!((agg.specimen_sd - 0.05).abs() < 1e-12);
    }

    #[test]
    fn disjoint_equal_patches_average() {
        let mesh = line_mesh(6);
        let agg = aggregate_patches(
            &[estimate(0, 0.2, 0.0), estimate(1, 0.4, 0.0)],
            &[patch(0, vec![0, 1, 2]), patch(1, vec![3, 4, 5])],
            &mesh,
        )
        .unwrap();
        assert!((agg.specimen_mean - 0.3).abs() < 1e-15);
        assert!((agg.specimen_sd - 0.1).abs() < 1e-12);
    }

    #[test]
    fn overlap_weights_match_per_vertex_accounting() {
        let mesh = line_mesh(7);
        let patches = [
            patch(0, vec![0, 1, 2, 3]),
            patch(1, vec![2, 3, 4]),
            patch(2, vec![3, 4, 5, 6]),
        ];
        let ests = [estimate(0, 0.2, 0.01), estimate(1, 0.5, 0.02), estimate(2, 0.3, 0.03)];
        let agg = aggregate_patches(&ests, &patches, &mesh).unwrap();
        // hand multiplicities: v0 1, v1 1, v2 2, v3 3, v4 2, v5 1, v6 1
        let hand = [1.0, 1.0, 2.0, 3.0, 2.0, 1.0, 1.0];
        let mut weight = [0.0; 3];
        let mut per_vertex = [0.0; 7];
        for v in 0..7 {
            for (k, p) in patches.iter().enumerate() {
                if p.vertex_ids.contains(&v) {
                    weight[k] += 1.0 / hand[v];
                    per_vertex[v] += ests[k].thickness_mean / hand[v];
                }
            }
        }
        for k in 0..3 {
            assert!((agg.patch_weights[k] - weight[k]).abs() < 1e-12);
        }
        for v in 0..7 {
            assert!((agg.vertex_thickness[v] - per_vertex[v]).abs() < 1e-12);
        }
        let total: f64 = weight.iter().sum();
        let m: f64 = (0..3).map(|k| weight[k] * ests[k].thickness_mean).sum::<f64>() / total;
        assert!((agg.specimen_mean - m).abs() < 1e-12);
        assert!((agg.patch_weights.iter().sum::<f64>() - 7.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn total_weight_equals_covered_vertices(
            sets in prop::collection::vec(prop::collection::btree_set(0usize..20, 1..8), 1..6)
        ) {
            let mesh = line_mesh(20);
            let patches: Vec<Patch> = sets.iter().enumerate().map(|(i, s)| patch(i, s.iter().copied().collect())).collect();
            let ests: Vec<PatchEstimate> = (0..patches.len()).map(|i| estimate(i, 0.1 + i as f64 * 0.05, 0.01)).collect();
            let agg = aggregate_patches(&ests, &patches, &mesh).unwrap();
            let covered = agg.multiplicity.iter().filter(|&&m| m > 0).count() as f64;
            prop_assert!((agg.patch_weights.iter().sum::<f64>() - covered).abs() < 1e-9);
        }
    }

    fn profile_set(values: Vec<Vec<f64>>, step: f64) -> ProfileSet {
        let profiles = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let h = (v.len() / 2) as f64;
                let ts = (0..v.len()).map(|k| (k as f64 - h) * step).collect();
                Profile::new(0, i, 90.0, ts, v).unwrap()
            })
            .collect();
        ProfileSet {
            patch_id: 0,
            profiles,
            dropped: 0,
        }
    }

    #[test]
    fn baseline_overestimates_blurred_thin_plate() {
        let psf = PsfModel::gaussian(fwhm_to_sigma(1.0), fwhm_to_sigma(1.0)).unwrap();
        let k = combined_kernel(&psf, 0.0, 0.002);
        let ts: Vec<f64> = (-30..=30).map(|i| i as f64 * 0.1).collect();
        // threshold below the blurred peak
        let vals = mean_profile(&k, 0.15, 0.0, [0.0, 1200.0, 200.0], &ts);
        let b = apparent_thickness_baseline(&profile_set(vec![vals], 0.1), 300.0)[0];
        assert!(b > 0.6, "{b}");
    }

    #[test]
    fn baseline_zero_without_samples_above() {
        let b = apparent_thickness_baseline(&profile_set(vec![vec![10.0; 11]], 0.1), 50.0);
        assert_eq!(b, vec![0.0]);
    }

    #[test]
    fn baseline_thick_plate_within_one_step() {
        let ts: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let vals: Vec<f64> = ts
            .iter()
            .map(|&t| {
                if t < -1.0 {
                    0.0
                } else if t <= 1.0 {
                    1200.0
                } else {
                    200.0
                }
            })
            .collect();
        let b = apparent_thickness_baseline(&profile_set(vec![vals], 0.1), 700.0)[0];
        assert!((b - 2.0).abs() <= 0.1 + 1e-12, "{b}");
    }

    #[test]
    fn baseline_prefers_the_run_nearest_the_center() {
        let mut v = vec![0.0; 21];
        v[12] = 1000.0;
        v[13] = 1000.0;
        v[0..6].iter_mut().for_each(|x| *x = 1000.0);
        let b = apparent_thickness_baseline(&profile_set(vec![v], 0.1), 500.0)[0];
        assert!((b - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identical_values_compare_perfectly() {
        let r = compare_to_reference(&[0.2, 0.3, 0.4, 0.5], &[0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(r.mean_deviation_mm, 0.0);
        assert_eq!(r.rmse_mm, 0.0);
        assert!((r.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_values_keep_correlation() {
        let refs = [0.2, 0.3, 0.4, 0.5];
        let est: Vec<f64> = refs.iter().map(|r| r + 0.1).collect();
        let r = compare_to_reference(&est, &refs).unwrap();
        assert!((r.mean_deviation_mm - 0.1).abs() < 1e-12);
        assert!(r.sd_deviation_mm < 1e-12);
        assert!((r.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn five_point_statistics_oracle() {
        let est = [0.31, 0.22, 0.45, 0.28, 0.39];
        let refs = [0.30, 0.25, 0.40, 0.33, 0.36];
        let r = compare_to_reference(&est, &refs).unwrap();
        // independent evaluation with textbook formulas
        let n = 5.0;
        let d: Vec<f64> = est.iter().zip(&refs).map(|(a, b)| a - b).collect();
        let md = d.iter().sum::<f64>() / n;
        let sdd = (d.iter().map(|x| (x - md) * (x - md)).sum::<f64>() / (n - 1.0)).sqrt();
        let sx: f64 = est.iter().sum();
        let sy: f64 = refs.iter().sum();
        let sxx: f64 = est.iter().map(|x| x * x).sum();
        let syy: f64 = refs.iter().map(|y| y * y).sum();
        let sxy: f64 = est.iter().zip(&refs).map(|(x, y)| x * y).sum();
        let rr = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let rmse = (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        assert!((r.mean_deviation_mm - md).abs() < 1e-12);
        assert!((r.sd_deviation_mm - sdd).abs() < 1e-12);
        assert!((r.r2 - rr * rr).abs() < 1e-12);
        assert!((r.rmse_mm - rmse).abs() < 1e-12);
        assert!((r.rmse_pct - 100.0 * rmse / (sy / n)).abs() < 1e-12);
        // p-value with 3 degrees of freedom from the closed-form t CDF
        let t = rr.abs() * (3.0 / (1.0 - rr * rr)).sqrt();
        let th = (t / 3f64.sqrt()).atan();
        let cdf_tail = 1.0 - (2.0 / std::f64::consts::PI) * (th + th.sin() * th.cos());
        assert!((r.p_value - cdf_tail).abs() < 1e-9, "{} vs {cdf_tail}", r.p_value);
    }

    #[test]
    fn swapping_negates_deviation_and_keeps_r2() {
        let a = [0.31, 0.22, 0.45, 0.28, 0.39];
        let b = [0.30, 0.25, 0.40, 0.33, 0.36];
        let ab = compare_to_reference(&a, &b).unwrap();
        let ba = compare_to_reference(&b, &a).unwrap();
        assert!((ab.mean_deviation_mm + ba.mean_deviation_mm).abs() < 1e-15);
        assert!((ab.r2 - ba.r2).abs() < 1e-12);
    }

    #[test]
    fn constant_reference_has_no_correlation() {
        let r = compare_to_reference(&[0.31, 0.29, 0.30], &[0.3, 0.3, 0.3]).unwrap();
        assert_eq!((r.r2, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn comparison_input_errors() {
        assert!(matches!(
            compare_to_reference(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(compare_to_reference(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(compare_to_reference(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn empty_region_has_no_patches() {
        let mut mesh = line_mesh(4);
        mesh.region = vec![false; 4];
        let vol = Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 8])
            .unwrap()
            .assume_calibrated();
        let psf = PsfModel::gaussian(0.3, 0.4).unwrap();
        let r = estimate_specimen(
            &vol,
            &mesh,
            &psf,
            &Nix2Prior::default(),
            &EstimateConfig::default(),
            &|_| {},
        );
        assert!(matches!(r, Err(Error::NoPatchSucceeded)));
    }

    #[test]
    fn thickness_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "vertex_id,thickness_mm\n0,0.3\n1,0.25\n").unwrap();
        assert_eq!(read_thickness_csv(&p).unwrap(), vec![0.3, 0.25]);
        std::fs::write(&p, "patch_id,mean_mm\n0,abc\n").unwrap();
        let e = read_thickness_csv(&p).unwrap_err().to_string();
        assert!(e.contains("mean_mm") && e.contains("t.csv"), "{e}");
    }
}
