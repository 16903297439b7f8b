// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise linear probes on step-terminal hidden states.
//!
//! The classifier is multinomial logistic regression minimizing
//! `C * sum(cross_entropy) + 0.5 * ||W||^2` with an unpenalized intercept,
//! fit by L-BFGS on features standardized with training-fold statistics.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ReasoningChain, TaskKind, MAX_DYCK_DEPTH};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::taskgen::SplitManifest;
use crate::trace::TraceRecord;

/// Number of label values a task's step annotations can take.
pub fn label_classes(task: TaskKind) -> usize {
    match task {
        TaskKind::Dyck => MAX_DYCK_DEPTH as usize + 1,
        TaskKind::ProntoQA => 2,
        TaskKind::Gsm8k => 3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub layer: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

/// One row per (chain, step) from the probe split, read at the step-terminal
/// position of layer `layer`.
pub fn build_probe_dataset(
    chains: &[ReasoningChain],
    records: &[TraceRecord],
    manifest: &SplitManifest,
    layer: usize,
) -> Result<ProbeDataset> {
    let by_id: HashMap<&str, &TraceRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for chain in chains {
        if manifest.eval_ids.contains(&chain.id) || !manifest.probe_ids.contains(&chain.id) {
            return Err(Error::SplitViolation(chain.id.clone()));
        }
        let rec = by_id
            .get(chain.id.as_str())
            .ok_or_else(|| Error::MissingStepEnds(format!("{}: no trace record", chain.id)))?;
        let m = rec.step_hidden.as_ref().and_then(|s| s.get(&layer)).ok_or_else(|| {
            Error::MissingStepEnds(format!("{}: no step-terminal states for layer {layer}", chain.id))
        })?;
        if m.rows != chain.len() || rec.step_end_positions.len() != chain.len() {
            return Err(Error::MissingStepEnds(format!(
                "{}: {} step-terminal rows for {} steps",
                chain.id,
                m.rows,
                chain.len()
            )));
        }
        let n_classes = label_classes(chain.task);
        for (i, step) in chain.steps.iter().enumerate() {
            let label = step.annotation.class_label();
            if label >= n_classes {
                return Err(Error::InvalidRecord {
                    id: chain.id.clone(),
                    violations: vec![format!("label {label} outside task range")],
                });
            }
            x.push(m.row_f64(i));
            y.push(label);
        }
    }
    Ok(ProbeDataset { layer, x, y })
}

/// Datasets for every layer present in the first record's step-terminal capture.
pub fn build_all_layers(
    chains: &[ReasoningChain],
    records: &[TraceRecord],
    manifest: &SplitManifest,
) -> Result<Vec<ProbeDataset>> {
    let layers: Vec<usize> = records
        .iter()
        .find_map(|r| r.step_hidden.as_ref())
        .map(|s| s.keys().copied().collect())
        .ok_or_else(|| Error::MissingStepEnds("no record carries step-terminal states".into()))?;
    layers
        .into_iter()
        .map(|l| build_probe_dataset(chains, records, manifest, l))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            seed: 42,
            test_fraction: 0.2,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Standardization from training-fold statistics; zero-variance columns
/// are centered only.
#[derive(Debug, Clone)]
struct Scaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaler {
    fn fit(rows: &[&Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| (s / n).sqrt())
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Multinomial logistic model: weights `k x d` row-major, then `k` biases.
#[derive(Debug, Clone)]
pub struct Softmax {
    pub n_classes: usize,
    pub dim: usize,
    pub params: Vec<f64>,
}

impl Softmax {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        let (k, d) = (self.n_classes, self.dim);
        (0..k)
            .map(|c| {
                self.params[k * d + c]
                    + self.params[c * d..(c + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best })
    }
}

/// Value and gradient of `sum(CE) + ||W||^2 / (2C)` (the objective divided by C).
fn objective(params: &[f64], x: &[Vec<f64>], y: &[usize], k: usize, c: f64, grad: &mut [f64]) -> f64 {
    let d = x[0].len();
    let model = Softmax {
        n_classes: k,
        dim: d,
        params: params.to_vec(),
    };
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let s = model.scores(row);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - s[label];
        for cls in 0..k {
            let resid = (s[cls] - log_z).exp() - (cls == label) as u8 as f64;
            for (g, v) in grad[cls * d..(cls + 1) * d].iter_mut().zip(row) {
                *g += resid * v;
            }
            grad[k * d + cls] += resid;
        }
    }
    let inv_c = 1.0 / c;
    for (g, w) in grad[..k * d].iter_mut().zip(&params[..k * d]) {
        *g += inv_c * w;
    }
    loss + 0.5 * inv_c * params[..k * d].iter().map(|w| w * w).sum::<f64>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit by L-BFGS (memory 10, backtracking Armijo line search). Returns the
/// model, iterations used, and whether the tolerance was met.
pub fn fit_softmax(x: &[Vec<f64>], y: &[usize], k: usize, cfg: &ProbeConfig) -> (Softmax, usize, bool) {
    const MEMORY: usize = 10;
    let d = x[0].len();
    let n = k * d + k;
    let mut w = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f = objective(&w, x, y, k, cfg.c, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    while iters < cfg.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= cfg.tol {
            converged = true;
            break;
        }
        iters += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .last()
            .map_or(1.0 / dot(&g, &g).sqrt().max(1.0), |(s, yv, _)| dot(s, yv) / dot(yv, yv));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            trial
                .iter_mut()
                .zip(&w)
                .zip(&dir)
                .for_each(|((t, wi), di)| *t = wi + step * di);
            let f_new = objective(&trial, x, y, k, cfg.c, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(&w).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 {
                    if hist.len() == MEMORY {
                        hist.remove(0);
                    }
                    hist.push((s, yv, 1.0 / sy));
                }
                let rel = (f - f_new) / f.abs().max(f_new.abs()).max(1.0);
                std::mem::swap(&mut w, &mut trial);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                accepted = true;
                if rel <= f64::EPSILON {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted;
            break;
        }
    }
    (
        Softmax {
            n_classes: k,
            dim: d,
            params: w,
        },
        iters,
        converged,
    )
}

/// Deterministic train/test index split.
pub fn probe_split(n: usize, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut keyed_rng(cfg.seed, &["probe-split".into()]));
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Fit on the training fold and report held-out accuracy.
pub fn train_eval_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if ds.x.len() != ds.y.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", ds.x.len(), ds.y.len())));
    }
    if ds.x.len() < 10 {
        return Err(Error::NotEnoughData(format!(
            "probe needs at least 10 rows, got {}",
            ds.x.len()
        )));
    }
    if ds.y.iter().all(|&l| l == ds.y[0]) {
        return Err(Error::SingleClass);
    }
    let (train, test) = probe_split(ds.x.len(), cfg);
    let scaler = Scaler::fit(&train.iter().map(|&i| &ds.x[i]).collect::<Vec<_>>());
    // classes are those seen in training; others count as misses
    let classes: BTreeMap<usize, usize> = {
        let mut seen: Vec<usize> = train.iter().map(|&i| ds.y[i]).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let xt: Vec<Vec<f64>> = train.iter().map(|&i| scaler.apply(&ds.x[i])).collect();
    let yt: Vec<usize> = train.iter().map(|&i| classes[&ds.y[i]]).collect();
    let labels: Vec<usize> = classes.keys().copied().collect();
    let (model, iterations, converged) = if labels.len() == 1 {
        (
            Softmax {
                n_classes: 1,
                dim: xt[0].len(),
                params: vec![0.0; xt[0].len() + 1],
            },
            0,
            true,
        )
    } else {
        fit_softmax(&xt, &yt, labels.len(), cfg)
    };
    let hits = test
        .iter()
        .filter(|&&i| labels[model.predict(&scaler.apply(&ds.x[i]))] == ds.y[i])
        .count();
    Ok(ProbeResult {
        layer: ds.layer,
        accuracy: hits as f64 / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
        iterations,
        converged,
    })
}

/// Probe every layer in parallel; results come back in layer order.
pub fn probe_layers(datasets: &[ProbeDataset], cfg: &ProbeConfig) -> Result<Vec<ProbeResult>> {
    datasets.par_iter().map(|ds| train_eval_probe(ds, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, sep: f64, seed: u64) -> ProbeDataset {
        let mut rng = keyed_rng(seed, &["blobs".into()]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let shift = if label == 1 { sep } else { -sep };
            x.push(
                (0..5)
                    .map(|j| rng.random_range(-1.0..1.0) + if j == 0 { shift } else { 0.0 })
                    .collect(),
            );
            y.push(label);
        }
        ProbeDataset { layer: 0, x, y }
    }

    #[test]
    fn separable_data_is_learned() {
        let r = train_eval_probe(&blobs(200, 2.0, 1), &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n_test, 40);
        assert!(r.converged);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = blobs(30, 0.5, 2);
        let k = 2;
        let n = k * 5 + k;
        let params: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = vec![0.0; n];
        objective(&params, &ds.x, &ds.y, k, 1.0, &mut g);
        let mut scratch = vec![0.0; n];
        for i in 0..n {
            let mut p = params.clone();
            p[i] += 1e-6;
            let up = objective(&p, &ds.x, &ds.y, k, 1.0, &mut scratch);
            p[i] -= 2e-6;
            let down = objective(&p, &ds.x, &ds.y, k, 1.0, &mut scratch);
            assert!(((up - down) / 2e-6 - g[i]).abs() < 1e-4, "coordinate {i}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let mut ds = blobs(20, 1.0, 3);
        ds.y.iter_mut().for_each(|l| *l = 1);
        assert!(matches!(
            train_eval_probe(&ds, &ProbeConfig::default()),
            Err(Error::SingleClass)
        ));
    }
}
