// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reasoning-horizon detection on mean-NLDD-by-position curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::CurvePoint;

/// Fraction of the peak below which post-peak positions form the pruning zone.
pub const PRUNING_FRACTION: f64 = 0.2;

pub const INVERTED_ZONE_NOTE: &str = "peak <= 0: zone semantics inverted";

/// Mean NLDD keyed by corruption position.
pub type Curve = BTreeMap<usize, f64>;

pub fn curve_from_points(points: &[CurvePoint]) -> Curve {
    points.iter().map(|p| (p.k, p.mean)).collect()
}

/// `argmax_{k > 1}` of the curve; ties go to the smallest `k`.
pub fn detect_horizon(curve: &Curve) -> Result<usize> {
    curve
        .range(2..)
        .fold(None, |best: Option<(usize, f64)>, (&k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k)
        .ok_or_else(|| Error::NotEnoughData("no position k > 1 in curve".into()))
}

/// Position `k > 1` with the most negative forward difference
/// `curve[k + 1] - curve[k]`, over consecutive positions present in the
/// curve; ties go to the smallest `k`.
pub fn steepest_decline(curve: &Curve) -> Result<usize> {
    curve
        .range(2..)
        .filter_map(|(&k, &v)| curve.get(&(k + 1)).map(|&next| (k, next - v)))
        .fold(None, |best: Option<(usize, f64)>, (k, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((k, d)),
        })
        .map(|(k, _)| k)
        .ok_or_else(|| Error::NotEnoughData("fewer than 2 consecutive positions in curve".into()))
}

/// Positions after `k_star` whose mean falls below 20% of the peak.
pub fn pruning_zone(curve: &Curve, k_star: usize) -> Vec<usize> {
    let Some(&peak) = curve.get(&k_star) else {
        return Vec::new();
    };
    let threshold = PRUNING_FRACTION * peak;
    curve
        .range(k_star + 1..)
        .filter(|(_, &v)| v < threshold)
        .map(|(&k, _)| k)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub task: String,
    pub model: String,
    pub k_star: Option<usize>,
    pub alt_k: Option<usize>,
    pub agreement: Option<usize>,
    /// Detectors disagree by more than one step.
    pub flagged: bool,
    pub peak: Option<f64>,
    pub pruning_zone: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zone_note: Option<String>,
    /// Why a detector could not run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Run both detectors. A curve too short for either yields a report with a
/// reason rather than an error, so a pipeline can still write its summary.
pub fn analyze_horizon(curve: &Curve, task: &str, model: &str) -> HorizonReport {
    let k_star = detect_horizon(curve);
    let alt = steepest_decline(curve);
    let reason = match (&k_star, &alt) {
        (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
        _ => None,
    };
    let k_star = k_star.ok();
    let alt_k = alt.ok();
    let agreement = k_star.zip(alt_k).map(|(a, b)| a.abs_diff(b));
    let peak = k_star.and_then(|k| curve.get(&k).copied());
    HorizonReport {
        task: task.to_string(),
        model: model.to_string(),
        k_star,
        alt_k,
        agreement,
        flagged: agreement.is_some_and(|d| d > 1),
        peak,
        pruning_zone: k_star.map(|k| pruning_zone(curve, k)).unwrap_or_default(),
        zone_note: peak.filter(|&p| p <= 0.0).map(|_| INVERTED_ZONE_NOTE.to_string()),
        reason,
    }
}
