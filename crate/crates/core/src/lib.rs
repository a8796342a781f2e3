//! Cortical thickness estimation from clinical QCT by analysis-by-synthesis.
//!
//! A plate model of the cortex (background / cortical / trabecular densities,
//! half-width `w`, per-profile offset `s`) is blurred with an angle-dependent
//! PSF and fitted to 1-D density profiles sampled perpendicular to a mid-cortex
//! mesh. Hyper-parameters are estimated per patch with ascent-based Monte Carlo
//! EM driven by adaptive importance sampling, and patch estimates are merged
//! into per-vertex and per-specimen thickness.
//!
//! Module map:
//! - [`volume`], [`mesh`], [`patches`], [`profiles`]: scan/mesh containers,
//!   patch placement, profile extraction
//! - [`psf`]: in-plane MTF model, fitting, angle-dependent kernels
//! - [`bone_model`]: mean profiles and the Gaussian-process likelihood
//! - [`inference`]: NIχ² prior, adaptive importance sampling, MCEM
//! - [`pipeline`]: specimen runs, aggregation, baseline, statistics
//! - [`phantom`]: synthetic ground-truth scans
//! - [`config`]: serialisable run description used by the CLI

// Negated comparisons are used on purpose so that NaN fails validation, and
// index loops mirror the matrix notation of the numerics.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bone_model;
pub mod config;
pub mod error;
pub mod inference;
pub mod io;
pub mod mesh;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod profiles;
pub mod psf;
pub mod volume;

pub use error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Small helpers for `[f64; 3]` arithmetic.
pub mod vec3 {
    use super::Vec3;

    #[inline]
    pub fn add(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    #[inline]
    pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    pub fn scale(a: Vec3, s: f64) -> Vec3 {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    #[inline]
    pub fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[inline]
    pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[inline]
    pub fn norm(a: Vec3) -> f64 {
        dot(a, a).sqrt()
    }

    #[inline]
    pub fn dist(a: Vec3, b: Vec3) -> f64 {
        norm(sub(a, b))
    }

    pub fn normalize(a: Vec3) -> Vec3 {
        scale(a, 1.0 / norm(a))
    }
}

/// Deterministic 64-bit seed mixing (splitmix64 finaliser), used to derive
/// independent per-patch RNG streams from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        ^ stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
