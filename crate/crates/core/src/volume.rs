//! Scalar density volumes on an anisotropic voxel grid.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i, j, k) * spacing`; the
//! third index runs along the scanner z-axis. Data is stored x-fastest.

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vec3,
    data: Vec<f64>,
    calibrated: bool,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Vec3, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "volume spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::invalid(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
            calibrated: false,
        })
    }

    /// Volume of the given shape filled with `f(center)` at every voxel center.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], origin: Vec3, mut f: impl FnMut(Vec3) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = [
                        origin[0] + i as f64 * spacing[0],
                        origin[1] + j as f64 * spacing[1],
                        origin[2] + k as f64 * spacing[2],
                    ];
                    data.push(f(p));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    /// Marks the data as already being in calibrated density units.
    pub fn assume_calibrated(mut self) -> Self {
        self.calibrated = true;
        self
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Lower and upper corners of the hull spanned by the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = [
            self.origin[0] + (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * self.spacing[2],
        ];
        (self.origin, hi)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.continuous_index(p).is_some()
    }

    fn continuous_index(&self, p: Vec3) -> Option<[f64; 3]> {
        let mut u = [0.0; 3];
        for a in 0..3 {
            let c = (p[a] - self.origin[a]) / self.spacing[a];
            let max = (self.dims[a] - 1) as f64;
            // tolerate round-off at the hull faces
            if !(c >= -1e-9 && c <= max + 1e-9) {
                return None;
            }
            u[a] = c.clamp(0.0, max);
        }
        Some(u)
    }

    /// Trilinear interpolation of the eight voxels surrounding `p` (mm).
    pub fn trilinear_sample(&self, p: Vec3) -> Result<f64> {
        let u = self.continuous_index(p).ok_or(Error::OutOfBounds(p[0], p[1], p[2]))?;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = self.dims[a] - 1;
            let f = u[a].floor() as usize;
            // the upper face belongs to the last cell
            let b = f.min(max.saturating_sub(1));
            base[a] = b;
            frac[a] = if max == 0 { 0.0 } else { u[a] - b as f64 };
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let (sx, sy, sz) = (step(0), step(1), step(2));
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let c000 = self.get(i, j, k);
        let c100 = self.get(i + sx, j, k);
        let c010 = self.get(i, j + sy, k);
        let c110 = self.get(i + sx, j + sy, k);
        let c001 = self.get(i, j, k + sz);
        let c101 = self.get(i + sx, j, k + sz);
        let c011 = self.get(i, j + sy, k + sz);
        let c111 = self.get(i + sx, j + sy, k + sz);
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        Ok(c0 + (c1 - c0) * fz)
    }

    /// Linear calibration to hydroxyapatite-equivalent density.
    pub fn calibrate_density(mut self, slope: f64, intercept: f64) -> Result<Self> {
        if self.calibrated {
            return Err(Error::AlreadyCalibrated);
        }
        if !(slope > 0.0) {
            return Err(Error::invalid(format!(
                "calibration slope must be positive, got {slope}"
            )));
        }
        for v in &mut self.data {
            *v = slope * *v + intercept;
        }
        self.calibrated = true;
        Ok(self)
    }

    /// Mean and standard deviation over voxel centers inside the axis-aligned box.
    pub fn roi_stats(&self, lo: Vec3, hi: Vec3) -> Option<(f64, f64, usize)> {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let c = self.voxel_center(i, j, k);
                    if (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]) {
                        let v = self.get(i, j, k);
                        sum += v;
                        sum_sq += v * v;
                        n += 1;
                    }
                }
            }
        }
        if n < 2 {
            return None;
        }
        let mean = sum / n as f64;
        let var = ((sum_sq - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
        Some((mean, var.sqrt(), n))
    }
}

/// Slope and intercept mapping two raw readings onto two known densities.
pub fn two_point_calibration(raw: [f64; 2], density: [f64; 2]) -> Result<(f64, f64)> {
    let dr = raw[1] - raw[0];
    if dr == 0.0 {
        return Err(Error::invalid("calibration rods have identical raw values"));
    }
    let slope = (density[1] - density[0]) / dr;
    Ok((slope, density[0] - slope * raw[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Volume {
        Volume::from_fn([6, 5, 4], [0.25, 0.5, 1.0], [1.0, -2.0, 3.0], |p| {
            2.0 * p[0] + 3.0 * p[1] - p[2]
        })
        .unwrap()
    }

    #[test]
    fn voxel_center_returns_voxel_value() {
        let v = ramp();
        for (i, j, k) in [(0, 0, 0), (3, 2, 1), (5, 4, 3)] {
            let c = v.voxel_center(i, j, k);
            assert_eq!(v.trilinear_sample(c).unwrap(), v.get(i, j, k));
        }
    }

    #[test]
    fn midpoint_between_two_voxels() {
        let mut data = vec![0.0; 8];
        for k in 0..2 {
            for j in 0..2 {
                data[1 + 2 * (j + 2 * k)] = 100.0;
            }
        }
        let v = Volume::new([2, 2, 2], [1.0, 1.0, 1.0], [0.0; 3], data).unwrap();
        assert!((v.trilinear_sample([0.5, 0.3, 0.7]).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn affine_field_is_reproduced() {
        let v = ramp();
        let (lo, hi) = v.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [
                rng.random_range(lo[0]..=hi[0]),
                rng.random_range(lo[1]..=hi[1]),
                rng.random_range(lo[2]..=hi[2]),
            ];
            let want = 2.0 * p[0] + 3.0 * p[1] - p[2];
            assert!((v.trilinear_sample(p).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_hull_is_an_error() {
        let v = ramp();
        let (_, hi) = v.bounds();
        assert!(matches!(
            v.trilinear_sample([hi[0] + 0.01, hi[1], hi[2]]),
            Err(Error::OutOfBounds(..))
        ));
        assert!(v.trilinear_sample(hi).is_ok());
    }

    #[test]
    fn calibration() {
        let v = ramp();
        let same = v.clone().calibrate_density(1.0, 0.0).unwrap();
        assert_eq!(same.data(), v.data());
        assert!(same.is_calibrated());
        assert!(matches!(
            same.calibrate_density(1.0, 0.0),
            Err(Error::AlreadyCalibrated)
        ));

        let zero = Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![0.0]).unwrap();
        assert_eq!(zero.calibrate_density(2.0, -50.0).unwrap().data(), &[-50.0]);

        assert!(v.clone().calibrate_density(0.0, 1.0).is_err());
    }

    #[test]
    fn two_point_fit_reproduces_rods() {
        let raw = [112.0, 871.5];
        let rods = [50.0, 800.0];
        let (slope, intercept) = two_point_calibration(raw, rods).unwrap();
        let v = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], raw.to_vec())
            .unwrap()
            .calibrate_density(slope, intercept)
            .unwrap();
        assert!((v.data()[0] - rods[0]).abs() < 1e-9);
        assert!((v.data()[1] - rods[1]).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0; 8]).is_err());
    }
}
