// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-position aggregation with standard errors and BCa bootstrap intervals.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::mean;
use crate::rng::{keyed_rng, Key};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 10_000,
            seed: 42,
            level: 0.95,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 100 {
            return Err(Error::Config(format!(
                "bootstrap B must be at least 100, got {}",
                self.b
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "bootstrap level must be in (0,1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// One row of a per-position curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; missing for a single value.
    pub se: Option<f64>,
    pub n: usize,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_excluded: usize,
}

/// Sample standard deviation (denominator `n - 1`).
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    Some((crate::metrics::pairwise_sum(&ss) / (xs.len() - 1) as f64).sqrt())
}

pub fn standard_error(xs: &[f64]) -> Option<f64> {
    sample_std(xs).map(|s| s / (xs.len() as f64).sqrt())
}

/// Bootstrap distribution of the mean, drawn from the stream keyed by
/// `(seed, metric, k)`. Resample `b` takes `n` indices uniformly with
/// replacement, in order.
pub fn resample_means(values: &[f64], cfg: &BootstrapConfig, metric: &str, k: usize) -> Vec<f64> {
    let mut rng = keyed_rng(cfg.seed, &[Key::Str(metric), Key::Int(k as u64)]);
    let n = values.len();
    let mut draw = vec![0.0; n];
    (0..cfg.b)
        .map(|_| {
            for slot in draw.iter_mut() {
                *slot = values[rng.random_range(0..n)];
            }
            mean(&draw)
        })
        .collect()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Order statistic used for quantile `q` of a sorted sample.
pub fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let idx = ((q * b as f64).ceil() as usize).clamp(1, b) - 1;
    sorted[idx]
}

/// BCa interval for the mean.
///
/// `z0` counts bootstrap means strictly below the estimate plus half of
/// the ties; the acceleration comes from jackknife skewness. Endpoints are
/// order statistics of the bootstrap distribution.
pub fn bca_ci(values: &[f64], cfg: &BootstrapConfig, metric: &str, k: usize) -> Result<(f64, f64)> {
    cfg.validate()?;
    if values.len() < 3 {
        return Err(Error::NotEnoughData(format!(
            "BCa needs at least 3 values, got {}",
            values.len()
        )));
    }
    let theta = mean(values);
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], values[0]));
    }
    let mut boot = resample_means(values, cfg, metric, k);
    boot.sort_by(f64::total_cmp);
    let b = boot.len() as f64;

    let below = boot.iter().filter(|&&v| v < theta).count() as f64;
    let ties = boot.iter().filter(|&&v| v == theta).count() as f64;
    let p0 = ((below + 0.5 * ties) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let normal = std_normal();
    let z0 = normal.inverse_cdf(p0);

    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    let jack: Vec<f64> = values.iter().map(|v| (total - v) / (n - 1.0)).collect();
    let jbar = mean(&jack);
    let (num, den) = jack.iter().fold((0.0, 0.0), |(s3, s2), j| {
        let d = jbar - j;
        (s3 + d * d * d, s2 + d * d)
    });
    let a = if den > 0.0 { num / (6.0 * den.powf(1.5)) } else { 0.0 };

    let adjust = |z: f64| {
        let w = z0 + z;
        normal.cdf(z0 + w / (1.0 - a * w))
    };
    let alpha = (1.0 - cfg.level) / 2.0;
    let lo = adjust(normal.inverse_cdf(alpha));
    let hi = adjust(normal.inverse_cdf(1.0 - alpha));
    Ok((order_statistic(&boot, lo), order_statistic(&boot, hi)))
}

/// Aggregate `(k, value)` rows into a curve. `None` values are excluded
/// rows, counted per position. Positions whose rows are all excluded are
/// absent. Intervals are computed when `bootstrap` is given and at least
/// three values remain.
pub fn aggregate_curve(
    rows: &[(usize, Option<f64>)],
    metric: &str,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<Vec<CurvePoint>> {
    let mut cells: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for &(k, v) in rows {
        let cell = cells.entry(k).or_default();
        match v {
            Some(v) => cell.0.push(v),
            None => cell.1 += 1,
        }
    }
    let cells: Vec<_> = cells.into_iter().filter(|(_, (vals, _))| !vals.is_empty()).collect();
    cells
        .into_par_iter()
        .map(|(k, (vals, n_excluded))| {
            let (ci_lo, ci_hi) = match bootstrap {
                Some(cfg) if vals.len() >= 3 => {
                    let (lo, hi) = bca_ci(&vals, cfg, metric, k)?;
                    (Some(lo), Some(hi))
                }
                _ => (None, None),
            };
            Ok(CurvePoint {
                k,
                mean: mean(&vals),
                se: standard_error(&vals),
                n: vals.len(),
                ci_lo,
                ci_hi,
                n_excluded,
            })
        })
        .collect()
}

/// Count of excluded rows at positions with no surviving value.
pub fn fully_excluded(rows: &[(usize, Option<f64>)]) -> BTreeMap<usize, usize> {
    let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(k, v) in rows {
        let e = seen.entry(k).or_default();
        if v.is_some() {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    seen.into_iter()
        .filter(|(_, (u, _))| *u == 0)
        .map(|(k, (_, x))| (k, x))
        .collect()
}
