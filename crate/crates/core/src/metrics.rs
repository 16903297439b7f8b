// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioral, representational and geometric diagnostics.
//!
//! - calibration constant `S` and the standardized margin `LD`
//! - NLDD, the percentage of clean margin lost under corruption
//! - Pearson-distance RDMs and Spearman RSA, including the sliding-window
//!   variant over stacked multi-sample trajectories
//! - TAS, displacement over path length of a hidden-state trajectory

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Matrix, TraceRecord};

/// Clean margins smaller than this are excluded from NLDD.
pub const EXCLUSION_EPS: f64 = 1e-6;

/// Number of trajectories averaged for the batch TAS.
pub const TAS_BATCH: usize = 50;

pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub tag: String,
}

/// Mean full-vocabulary logit standard deviation over clean records.
pub fn calibrate_s<'a, I>(clean: I, tag: &str) -> Result<Calibration>
where
    I: IntoIterator<Item = &'a TraceRecord>,
{
    let sigmas: Vec<f64> = clean.into_iter().map(|r| r.logit_sigma).collect();
    if sigmas.len() < 2 {
        return Err(Error::NotEnoughData(format!(
            "calibration needs at least 2 clean records, got {}",
            sigmas.len()
        )));
    }
    let s = pairwise_sum(&sigmas) / sigmas.len() as f64;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateCalibration(s));
    }
    Ok(Calibration {
        s,
        m: sigmas.len(),
        tag: tag.to_string(),
    })
}

/// Summation by recursive halving; the result depends only on input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// `LD = (max_correct - max_other) / S`.
pub fn logit_margin(record: &TraceRecord, cal: &Calibration) -> f64 {
    (record.max_logit_correct - record.max_logit_other) / cal.s
}

/// Percentage of the clean margin lost; `None` when the clean margin is
/// below [`EXCLUSION_EPS`] in magnitude.
pub fn nldd(ld_clean: f64, ld_corrupt: f64) -> Option<f64> {
    if ld_clean.abs() < EXCLUSION_EPS {
        None
    } else {
        Some((ld_clean - ld_corrupt) / ld_clean.abs() * 100.0)
    }
}

/// Pearson correlation with population moments. `None` if either side is
/// constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Symmetric dissimilarity matrix with zero diagonal, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Rdm {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Strict upper triangle in row-major order.
    pub fn upper(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// `RDM_ij = 1 - corr(h_i, h_j)`.
pub fn rdm<R: AsRef<[f64]>>(rows: &[R]) -> Result<Rdm> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Shape(format!("rdm needs at least 2 rows, got {n}")));
    }
    let d = rows[0].as_ref().len();
    if d < 2 {
        return Err(Error::Shape(format!("rdm needs width at least 2, got {d}")));
    }
    // center and normalize each row once; corr is then a dot product
    let mut unit = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::Shape(format!("row {i} has width {}, expected {d}", r.len())));
        }
        let m = r.iter().sum::<f64>() / d as f64;
        let c: Vec<f64> = r.iter().map(|v| v - m).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::ConstantRow(i));
        }
        unit.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let corr: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let v = 1.0 - corr.clamp(-1.0, 1.0);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(Rdm { n, values })
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks. `None` when either side has no
/// rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// RSA between two RDMs: Spearman correlation of their strict upper
/// triangles. `Ok(None)` when a triangle is constant.
pub fn rsa_pair(clean: &Rdm, corrupt: &Rdm) -> Result<Option<f64>> {
    if clean.n != corrupt.n {
        return Err(Error::Shape(format!("RDM sizes differ: {} vs {}", clean.n, corrupt.n)));
    }
    if clean.n < 3 {
        return Err(Error::NotEnoughData(format!("rsa needs n >= 3, got {}", clean.n)));
    }
    Ok(spearman(&clean.upper(), &corrupt.upper()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaSeries {
    /// One value per window start; `None` where the triangle was constant.
    pub series: Vec<Option<f64>>,
    /// Unweighted mean of the defined window values.
    pub scalar: Option<f64>,
}

fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

fn stack<R: AsRef<[f64]>>(set: &[Vec<R>], span: std::ops::Range<usize>) -> Vec<&[f64]> {
    set.iter()
        .flat_map(|traj| traj[span.clone()].iter().map(AsRef::as_ref))
        .collect()
}

/// Sliding-window RSA over a set of aligned trajectories.
///
/// Sample `i` contributes rows `t..t + window` of its trajectory to the
/// stack at window `t`, so each RDM is over `window * N` rows. Windows run
/// over the shortest trajectory in either set.
pub fn windowed_rsa<R: AsRef<[f64]>>(clean: &[Vec<R>], corrupt: &[Vec<R>], window: usize) -> Result<RsaSeries> {
    if clean.len() != corrupt.len() {
        return Err(Error::Shape(format!(
            "{} clean vs {} corrupt trajectories",
            clean.len(),
            corrupt.len()
        )));
    }
    if clean.len() < 2 {
        return Err(Error::NotEnoughData("windowed RSA needs at least 2 samples".into()));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let len = clean.iter().chain(corrupt).map(Vec::len).min().unwrap_or(0);
    if len < window {
        return Err(Error::NotEnoughData(format!(
            "shared prefix {len} shorter than window {window}"
        )));
    }
    let series = (0..=len - window)
        .map(|t| {
            rsa_pair(
                &rdm(&stack(clean, t..t + window))?,
                &rdm(&stack(corrupt, t..t + window))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let scalar = mean_defined(&series);
    Ok(RsaSeries { series, scalar })
}

/// Alternative reduction: one RDM over the stacked step-terminal states of
/// all samples, compared clean against corrupt.
pub fn step_terminal_rsa<R: AsRef<[f64]>>(clean: &[Vec<R>], corrupt: &[Vec<R>]) -> Result<Option<f64>> {
    let len = clean.iter().chain(corrupt).map(Vec::len).min().unwrap_or(0);
    rsa_pair(&rdm(&stack(clean, 0..len))?, &rdm(&stack(corrupt, 0..len))?)
}

/// Rows of `m` up to (exclusive) `prefix`, widened to f64.
pub fn trajectory(m: &Matrix, prefix: usize) -> Vec<Vec<f64>> {
    (0..prefix.min(m.rows)).map(|i| m.row_f64(i)).collect()
}

/// Shared clean/corrupt prefix length: every token up to and including the
/// final token of corrupted step `k` in both records.
pub fn shared_prefix(clean: &TraceRecord, corrupt: &TraceRecord, k: usize) -> Result<usize> {
    let end = |r: &TraceRecord| {
        r.step_end_positions
            .get(k - 1)
            .copied()
            .ok_or_else(|| Error::MissingStepEnds(format!("{}: no end position for step {k}", r.record_id)))
    };
    Ok(end(clean)?.min(end(corrupt)?) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub tas: f64,
    pub displacement: f64,
    pub path_length: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||h_T - h_0|| / sum_t ||h_t - h_{t-1}||`.
pub fn tas<R: AsRef<[f64]>>(traj: &[R]) -> Result<TrajectoryStats> {
    if traj.len() < 2 {
        return Err(Error::NotEnoughData(format!("trajectory has {} points", traj.len())));
    }
    let steps: Vec<f64> = traj.windows(2).map(|w| dist(w[0].as_ref(), w[1].as_ref())).collect();
    let path_length = pairwise_sum(&steps);
    if !(path_length > 0.0) {
        return Err(Error::ZeroPathLength);
    }
    let displacement = dist(traj[0].as_ref(), traj[traj.len() - 1].as_ref());
    Ok(TrajectoryStats {
        tas: (displacement / path_length).min(1.0),
        displacement,
        path_length,
    })
}

/// Mean TAS over the first [`TAS_BATCH`] trajectories.
pub fn batch_tas<R: AsRef<[f64]>>(trajs: &[Vec<R>]) -> Result<f64> {
    let vals = trajs
        .iter()
        .take(TAS_BATCH)
        .map(|t| tas(t).map(|s| s.tas))
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Error::NotEnoughData("no trajectories for TAS".into()));
    }
    Ok(mean(&vals))
}
