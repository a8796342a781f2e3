//! Least-squares fit of the sum-of-Gaussians MTF model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PsfComponent, PsfModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MtfSamples {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
}

impl MtfSamples {
    /// Validates the samples; if the first frequency is 0 the values are
    /// rescaled so that MTF(0) = 1.
    pub fn new(freqs: Vec<f64>, mut values: Vec<f64>) -> Result<Self> {
        if freqs.len() != values.len() || freqs.is_empty() {
            return Err(Error::invalid(
                "MTF needs matching, non-empty frequency and value columns",
            ));
        }
        if freqs[0] < 0.0 || freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("MTF frequencies must be >= 0 and strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("MTF values must be finite"));
        }
        if freqs[0] == 0.0 {
            let dc = values[0];
            if !(dc > 0.0) {
                return Err(Error::invalid("MTF at zero frequency must be positive"));
            }
            values.iter_mut().for_each(|v| *v /= dc);
        }
        if values.iter().any(|&v| !(-0.05..=1.05).contains(&v)) {
            return Err(Error::invalid("normalised MTF values must lie in [0, 1.05]"));
        }
        Ok(Self { freqs, values })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Reads `frequency_per_mm,mtf` CSV.
pub fn read_mtf_csv(path: &Path) -> Result<MtfSamples> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, "csv", e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(path, "header", e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, name, "missing column"))
    };
    let (fi, vi) = (col("frequency_per_mm")?, col("mtf")?);
    let mut freqs = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}", row + 1), e.to_string()))?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("row {} {name}", row + 1), "not a number"))
        };
        freqs.push(parse(fi, "frequency_per_mm")?);
        values.push(parse(vi, "mtf")?);
    }
    MtfSamples::new(freqs, values).map_err(|e| Error::format(path, "mtf", e.to_string()))
}

/// Parameter layout: `[b_0, ln c_0, a_1, b_1, ln c_1, ...]`; `a_0 = 1` is
/// fixed because the model is invariant to a common weight scale.
fn unpack(p: &[f64], n: usize) -> Vec<PsfComponent> {
    (0..n)
        .map(|k| {
            let (a, off) = if k == 0 { (1.0, 0) } else { (p[3 * k - 1], 3 * k) };
            PsfComponent {
                a,
                b: p[off],
                c: p[off + 1].exp(),
            }
        })
        .collect()
}

fn residuals(p: &[f64], n: usize, s: &MtfSamples) -> Option<DVector<f64>> {
    let m = PsfModel::new(unpack(p, n), 0.0).ok()?;
    let r = DVector::from_iterator(s.len(), s.freqs.iter().zip(&s.values).map(|(&f, &v)| m.mtf(f) - v));
    r.iter().all(|x| x.is_finite()).then_some(r)
}

fn rms(r: &DVector<f64>) -> f64 {
    (r.norm_squared() / r.len() as f64).sqrt()
}

fn levenberg_marquardt(mut p: Vec<f64>, n: usize, s: &MtfSamples) -> Option<(Vec<f64>, f64)> {
    let np = p.len();
    let mut r = residuals(&p, n, s)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jac = DMatrix::zeros(s.len(), np);
        for j in 0..np {
            let h = 1e-6 * p[j].abs().max(1e-3);
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += h;
            lo[j] -= h;
            let (rh, rl) = (residuals(&hi, n, s)?, residuals(&lo, n, s)?);
            jac.set_column(j, &((rh - rl) / (2.0 * h)));
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for d in 0..np {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = p.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
            if let Some(rc) = residuals(&cand, n, s) {
                let c = rc.norm_squared();
                if c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    p = cand;
                    r = rc;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-14 {
                        return Some((p, rms(&r)));
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved || cost < 1e-28 {
            break;
        }
    }
    Some((p, rms(&r)))
}

/// Fits `n_components` to the samples from several seeded starts and
/// returns the best in-plane model (out-of-plane sigma 0) with its residual
/// RMS attached.
pub fn fit_mtf(samples: &MtfSamples, n_components: usize, seed: u64) -> Result<PsfModel> {
    if n_components == 0 {
        return Err(Error::invalid("n_components must be >= 1"));
    }
    if samples.len() < 3 * n_components {
        return Err(Error::invalid(format!(
            "{} MTF samples cannot constrain {n_components} components",
            samples.len()
        )));
    }
    // width guess from the half-modulation frequency of a Gaussian MTF
    let f_half = samples
        .freqs
        .iter()
        .zip(&samples.values)
        .find(|(_, &v)| v < 0.5)
        .map(|(&f, _)| f)
        .unwrap_or(*samples.freqs.last().unwrap())
        .max(1e-3);
    let c0 = f_half / (2.0 * 2f64.ln()).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_starts = 8;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..n_starts {
        let mut p = Vec::with_capacity(3 * n_components);
        for k in 0..n_components {
            let spread = k as f64 - (n_components - 1) as f64 / 2.0;
            let (a, b, c) = match start {
                0 => (1.0 / n_components as f64, 0.0, c0 * 1.6f64.powf(spread)),
                1 => (1.0, 0.0, c0 * rng.random_range(-0.7f64..0.7).exp()),
                _ => (
                    rng.random_range(0.1..1.0),
                    if rng.random_bool(0.5) {
                        0.0
                    } else {
                        rng.random_range(0.0..c0)
                    },
                    c0 * rng.random_range(-1.0f64..1.0).exp(),
                ),
            };
            if k > 0 {
                p.push(a);
            }
            p.push(b);
            p.push(c.ln());
        }
        if let Some((p, r)) = levenberg_marquardt(p, n_components, samples) {
            if best.as_ref().is_none_or(|(_, br)| r < *br) {
                best = Some((p, r));
            }
        }
    }

    let mean = samples.values.iter().sum::<f64>() / samples.len() as f64;
    let baseline = (samples.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
    match best {
        Some((p, r)) if r < baseline => {
            let mut comps = unpack(&p, n_components);
            for k in &mut comps {
                k.b = k.b.abs();
            }
            Ok(PsfModel::new(comps, 0.0)?.with_fit_rms(r))
        }
        _ => Err(Error::FitDiverged),
    }
}

/// Two components, or three if the two-component residual RMS exceeds 0.01.
/// A single component is kept when it already fits to 1e-4 RMS; extra
/// components would only fit rounding noise.
pub fn fit_mtf_auto(samples: &MtfSamples, seed: u64) -> Result<PsfModel> {
    if let Ok(one) = fit_mtf(samples, 1, seed) {
        if one.fit_rms().is_some_and(|r| r <= 1e-4) {
            return Ok(one);
        }
    }
    let two = fit_mtf(samples, 2, seed)?;
    if two.fit_rms().unwrap_or(0.0) > 0.01 && samples.len() >= 9 {
        if let Ok(three) = fit_mtf(samples, 3, seed) {
            if three.fit_rms() < two.fit_rms() {
                return Ok(three);
            }
        }
    }
    Ok(two)
}
