//! Characterization statistics: force accuracy, hysteresis gap, noise
//! band, durability drop and force smoothness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("loading and unloading branches share no force interval")]
    NoOverlap,
    #[error("{0}")]
    Domain(String),
}

/// Mean and max absolute error as fractions of `range`.
pub fn relative_error(
    estimates: &[f64],
    truth: &[f64],
    range: f64,
) -> Result<(f64, f64), MetricsError> {
    if estimates.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(estimates.len(), truth.len()));
    }
    if estimates.is_empty() {
        return Err(MetricsError::TooFewSamples { need: 1, got: 0 });
    }
    if !(range > 0.0) {
        return Err(MetricsError::Domain(format!("range must be positive, got {range}")));
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for (e, t) in estimates.iter().zip(truth) {
        let err = (e - t).abs();
        sum += err;
        max = max.max(err);
    }
    Ok((sum / estimates.len() as f64 / range, max / range))
}

/// Sorts `(true, estimate)` pairs by true force and averages duplicates.
fn monotone_branch(branch: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = branch.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize)> = Vec::with_capacity(pts.len());
    for (x, y) in pts {
        match out.last_mut() {
            Some(last) if last.0 == x => {
                last.1 += y;
                last.2 += 1;
            }
            _ => out.push((x, y, 1)),
        }
    }
    out.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
}

fn interp(points: &[(f64, f64)], x: f64) -> f64 {
    let i = points.partition_point(|p| p.0 < x);
    if i == 0 {
        return points[0].1;
    }
    if i == points.len() {
        return points[i - 1].1;
    }
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    if x1 == x {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Largest estimate discrepancy between the loading and unloading branches
/// over their common true-force interval. Each branch is a list of
/// `(true force, estimated force)` samples; both are interpolated onto the
/// union of their abscissae, which is where the piecewise-linear difference
/// attains its maximum. Returns `(gap N, gap / range)`.
pub fn hysteresis_error(
    loading: &[(f64, f64)],
    unloading: &[(f64, f64)],
    range: f64,
) -> Result<(f64, f64), MetricsError> {
    if loading.is_empty() || unloading.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    if !(range > 0.0) {
        return Err(MetricsError::Domain(format!("range must be positive, got {range}")));
    }
    let up = monotone_branch(loading);
    let down = monotone_branch(unloading);
    let lo = up[0].0.max(down[0].0);
    let hi = up[up.len() - 1].0.min(down[down.len() - 1].0);
    if lo > hi {
        return Err(MetricsError::NoOverlap);
    }
    let gap = up
        .iter()
        .chain(down.iter())
        .map(|p| p.0)
        .filter(|&x| x >= lo && x <= hi)
        .map(|x| (interp(&up, x) - interp(&down, x)).abs())
        .fold(0.0, f64::max);
    Ok((gap, gap / range))
}

pub const MIN_NOISE_SAMPLES: usize = 100;

/// `6 × sample standard deviation`, in pF and as a fraction of `range`.
pub fn noise_band(samples: &[f64], range: f64) -> Result<(f64, f64), MetricsError> {
    if samples.len() < MIN_NOISE_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            need: MIN_NOISE_SAMPLES,
            got: samples.len(),
        });
    }
    if !(range > 0.0) {
        return Err(MetricsError::Domain(format!("range must be positive, got {range}")));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let band = 6.0 * var.sqrt();
    Ok((band, band / range))
}

pub const DEFAULT_SMOOTHNESS_EPSILON: f64 = 1e-3;

/// Reciprocal of the central second difference of a uniformly sampled
/// force, with `|f''|` floored at `epsilon`. Returns the interior series
/// (two shorter than the input) and its maximum.
pub fn smoothness(force: &[f64], dt: f64, epsilon: f64) -> Result<(Vec<f64>, f64), MetricsError> {
    if force.len() < 3 {
        return Err(MetricsError::TooFewSamples {
            need: 3,
            got: force.len(),
        });
    }
    if !(dt > 0.0) || !(epsilon > 0.0) {
        return Err(MetricsError::Domain("dt and epsilon must be positive".into()));
    }
    let series: Vec<f64> = force
        .windows(3)
        .map(|w| {
            let second = (w[2] - 2.0 * w[1] + w[0]) / (dt * dt);
            1.0 / second.abs().max(epsilon)
        })
        .collect();
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((series, max))
}

/// Accuracy drop in percentage points.
pub fn durability_report(accuracy_before: f64, accuracy_after: f64) -> Result<f64, MetricsError> {
    for a in [accuracy_before, accuracy_after] {
        if !(0.0..=1.0).contains(&a) {
            return Err(MetricsError::Domain(format!("accuracy {a} outside [0, 1]")));
        }
    }
    Ok((accuracy_before - accuracy_after) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessStats {
    pub mean: f64,
    pub sd: f64,
    pub per_taxel_max: Vec<f64>,
}

impl SmoothnessStats {
    pub fn from_maxima(per_taxel_max: Vec<f64>) -> Self {
        let n = per_taxel_max.len() as f64;
        let mean = if n > 0.0 {
            per_taxel_max.iter().sum::<f64>() / n
        } else {
            0.0
        };
        let sd = if n > 1.0 {
            (per_taxel_max.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SmoothnessStats {
            mean,
            sd,
            per_taxel_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        let t = [0.0, 10.0, 20.0];
        assert_eq!(relative_error(&t, &t, 55.0).unwrap(), (0.0, 0.0));
        let biased: Vec<f64> = t.iter().map(|v| v + 0.55).collect();
        let (mean, max) = relative_error(&biased, &t, 55.0).unwrap();
        assert!((mean - 0.01).abs() < 1e-12 && (max - 0.01).abs() < 1e-12);
        let (mean, max) = relative_error(&[5.0, 6.1], &[5.0, 5.0], 55.0).unwrap();
        assert!((mean - 0.01).abs() < 1e-12 && (max - 0.02).abs() < 1e-12);
        assert_eq!(
            relative_error(&[1.0], &[1.0, 2.0], 55.0),
            Err(MetricsError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn hysteresis_examples() {
        let load: Vec<(f64, f64)> = (0..=40).map(|i| (i as f64, i as f64)).collect();
        assert_eq!(hysteresis_error(&load, &load, 55.0).unwrap().0, 0.0);
        let unload: Vec<(f64, f64)> = (0..=40).rev().map(|i| (i as f64, i as f64 + 3.0)).collect();
        let (gap, frac) = hysteresis_error(&load, &unload, 55.0).unwrap();
        assert!((gap - 3.0).abs() < 1e-12);
        assert!((frac - 3.0 / 55.0).abs() < 1e-15);
        let far = [(100.0, 1.0), (110.0, 2.0)];
        assert_eq!(hysteresis_error(&load, &far, 55.0), Err(MetricsError::NoOverlap));
    }

    #[test]
    fn hysteresis_interpolates_misaligned_grids() {
        let load = [(0.0, 0.0), (10.0, 10.0)];
        let unload = [(2.5, 4.5), (7.5, 9.5)];
        let (gap, _) = hysteresis_error(&load, &unload, 55.0).unwrap();
        assert!((gap - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_band_examples() {
        assert_eq!(noise_band(&[1.5; 200], 5.0).unwrap().0, 0.0);
        assert!(noise_band(&[1.0; 10], 5.0).is_err());
        let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (band, frac) = noise_band(&alt, 5.0).unwrap();
        let sd = (1000.0_f64 / 999.0).sqrt();
        assert!((band - 6.0 * sd).abs() < 1e-12);
        assert!((frac - band / 5.0).abs() < 1e-15);
    }

    #[test]
    fn smoothness_examples() {
        let quad: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let (s, max) = smoothness(&quad, 1.0, 1e-3).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|v| (*v - 0.5).abs() < 1e-12));
        assert_eq!(max, 0.5);
        let ramp: Vec<f64> = (0..10).map(|i| 3.0 * i as f64 + 1.0).collect();
        let (_, max) = smoothness(&ramp, 0.1, 1e-3).unwrap();
        assert!((max - 1e3).abs() < 1e-6);
        let doubled: Vec<f64> = quad.iter().map(|v| 2.0 * v).collect();
        let (s2, _) = smoothness(&doubled, 1.0, 1e-3).unwrap();
        assert!(s2.iter().zip(&s).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
        assert!(smoothness(&[1.0, 2.0], 1.0, 1e-3).is_err());
    }

    #[test]
    fn durability_examples() {
        assert!((durability_report(0.9880, 0.98746).unwrap() - 0.054).abs() < 1e-9);
        assert_eq!(durability_report(0.7, 0.7).unwrap(), 0.0);
        assert!(durability_report(1.2, 0.7).is_err());
    }
}
