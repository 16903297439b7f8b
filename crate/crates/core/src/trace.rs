// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace exchange format (`trace_v: 1`).
//!
//! The metrics engine never talks to a model. A backend reads
//! [`TraceRequest`] lines and writes one [`TraceRecord`] line per request.
//! Records carry the sufficient statistics of the final-token logits
//! (vocabulary standard deviation, best correct logit, best other logit)
//! rather than the full vector, plus hidden-state trajectories encoded as
//! base64 little-endian `f32`.

use std::collections::{BTreeMap, HashMap};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chain::{render_prompt, render_variant_prompt, CounterfactualVariant, ReasoningChain, TaskKind};
use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

/// Tolerance for recomputing compact statistics from `full_logits`.
pub const CONSISTENCY_TOL: f64 = 1e-5;

/// Row-major `rows × cols` matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row_f64(i)).collect()
    }

    fn encode(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        B64.encode(bytes)
    }

    fn decode(rows: usize, cols: usize, text: &str) -> std::result::Result<Self, String> {
        let bytes = B64.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() != rows * cols * 4 {
            return Err(format!("{} bytes for a {rows}x{cols} f32 matrix", bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { rows, cols, data })
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    rows: usize,
    cols: usize,
    data: String,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixWire {
            rows: self.rows,
            cols: self.cols,
            data: self.encode(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = MatrixWire::deserialize(d)?;
        Matrix::decode(w.rows, w.cols, &w.data).map_err(serde::de::Error::custom)
    }
}

fn greedy() -> String {
    "greedy".into()
}

fn version() -> u32 {
    TRACE_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    #[serde(default = "version")]
    pub trace_v: u32,
    pub record_id: String,
    pub prompt: String,
    /// Surface forms of the correct answer, leading-space variants included.
    pub answer_texts: Vec<String>,
    /// Fractions of network depth; fraction `f` maps to layer `floor(f * L)`.
    pub layers: Vec<f64>,
    pub capture_all_layers_at_step_ends: bool,
    pub max_new_tokens: usize,
    #[serde(default = "greedy")]
    pub decode: String,
}

impl TraceRequest {
    pub fn new(record_id: String, prompt: String, answer_texts: Vec<String>, task: TaskKind) -> Self {
        Self {
            trace_v: TRACE_VERSION,
            record_id,
            prompt,
            answer_texts,
            layers: vec![0.5],
            capture_all_layers_at_step_ends: false,
            max_new_tokens: task.max_new_tokens(),
            decode: greedy(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.trace_v != TRACE_VERSION {
            out.push(format!("trace_v: unsupported version {}", self.trace_v));
        }
        if self.layers.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            out.push("layers: fraction outside (0,1]".into());
        }
        if self.max_new_tokens == 0 {
            out.push("max_new_tokens: must be at least 1".into());
        }
        if self.decode != "greedy" {
            out.push(format!("decode: `{}` is not greedy", self.decode));
        }
        if self.answer_texts.is_empty() {
            out.push("answer_texts: empty".into());
        }
        out
    }
}

/// Map a depth fraction to a layer index for a model with `n_layers` layers.
pub fn layer_index(fraction: f64, n_layers: usize) -> usize {
    ((fraction * n_layers as f64).floor() as usize).min(n_layers.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default = "version")]
    pub trace_v: u32,
    pub record_id: String,
    pub vocab_size: usize,
    pub n_layers: usize,
    /// Population standard deviation of the final-token logits over the vocabulary.
    pub logit_sigma: f64,
    pub max_logit_correct: f64,
    pub max_logit_other: f64,
    pub n_prompt_tokens: usize,
    /// Layer index → `n_prompt_tokens × d` trajectory.
    pub hidden: BTreeMap<usize, Matrix>,
    pub step_end_positions: Vec<usize>,
    pub perplexity: f64,
    pub predicted_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_logits: Option<Vec<f64>>,
    /// Resolved ids of the correct answer; needed to audit the maxima.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_ids: Option<Vec<usize>>,
    /// Probe mode: layer index → `n_steps × d` states at step-terminal tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_hidden: Option<BTreeMap<usize, Matrix>>,
}

impl TraceRecord {
    pub fn margin(&self) -> f64 {
        self.max_logit_correct - self.max_logit_other
    }

    /// First captured layer, i.e. the analysis layer of a default request.
    pub fn analysis_layer(&self) -> Option<(&usize, &Matrix)> {
        self.hidden.iter().next()
    }

    /// Multiply every logit-derived quantity by `c`.
    pub fn scale_logits(&mut self, c: f64) {
        self.logit_sigma *= c.abs();
        self.max_logit_correct *= c;
        self.max_logit_other *= c;
        if let Some(l) = self.full_logits.as_mut() {
            l.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Compact statistics of a logit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitStats {
    pub sigma: f64,
    pub max_correct: f64,
    pub max_other: f64,
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl LogitStats {
    pub fn from_logits(logits: &[f64], correct_ids: &[usize]) -> Result<Self> {
        if logits.is_empty() || correct_ids.is_empty() {
            return Err(Error::NotEnoughData("empty logits or correct id set".into()));
        }
        let mut max_correct = f64::NEG_INFINITY;
        let mut max_other = f64::NEG_INFINITY;
        for (i, &v) in logits.iter().enumerate() {
            if correct_ids.contains(&i) {
                max_correct = max_correct.max(v);
            } else {
                max_other = max_other.max(v);
            }
        }
        if correct_ids.iter().any(|&i| i >= logits.len()) {
            return Err(Error::Shape("correct id beyond vocabulary".into()));
        }
        Ok(Self {
            sigma: population_std(logits),
            max_correct,
            max_other,
        })
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= CONSISTENCY_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Schema and invariant check of one record.
pub fn validate_record(r: &TraceRecord) -> Vec<String> {
    let mut out = Vec::new();
    if r.trace_v != TRACE_VERSION {
        out.push(format!("trace_v: unsupported version {}", r.trace_v));
    }
    if r.record_id.is_empty() {
        out.push("record_id: empty".into());
    }
    if r.logit_sigma < 0.0 {
        out.push("logit_sigma: negative".into());
    } else if !r.logit_sigma.is_finite() {
        out.push("logit_sigma: not finite".into());
    }
    if r.vocab_size == 0 {
        out.push("vocab_size: zero".into());
    }
    if !r.max_logit_correct.is_finite() || !r.max_logit_other.is_finite() {
        out.push("max_logit: not finite".into());
    }
    if !(r.perplexity > 0.0) {
        out.push("perplexity: nonpositive".into());
    }
    for (layer, m) in &r.hidden {
        if m.rows != r.n_prompt_tokens {
            out.push(format!(
                "hidden[{layer}]: {} rows, prompt has {} tokens",
                m.rows, r.n_prompt_tokens
            ));
        }
    }
    if r.step_end_positions.windows(2).any(|w| w[0] >= w[1]) {
        out.push("step_end_positions: not increasing".into());
    }
    if r.step_end_positions.iter().any(|&p| p >= r.n_prompt_tokens) {
        out.push("step_end_positions: beyond prompt".into());
    }
    if let Some(sh) = &r.step_hidden {
        for (layer, m) in sh {
            if m.rows != r.step_end_positions.len() {
                out.push(format!(
                    "step_hidden[{layer}]: {} rows for {} steps",
                    m.rows,
                    r.step_end_positions.len()
                ));
            }
        }
    }
    if let Some(logits) = &r.full_logits {
        if logits.len() != r.vocab_size {
            out.push(format!(
                "full_logits: length {} != vocab_size {}",
                logits.len(),
                r.vocab_size
            ));
        } else if !logits.is_empty() {
            if !close(population_std(logits), r.logit_sigma) {
                out.push("full_logits: logit_sigma mismatch".into());
            }
            match &r.correct_ids {
                Some(ids) => match LogitStats::from_logits(logits, ids) {
                    Ok(s) => {
                        if !close(s.max_correct, r.max_logit_correct) {
                            out.push("full_logits: max_logit_correct mismatch".into());
                        }
                        if !close(s.max_other, r.max_logit_other) {
                            out.push("full_logits: max_logit_other mismatch".into());
                        }
                    }
                    Err(e) => out.push(format!("correct_ids: {e}")),
                },
                None => {
                    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if !close(top, r.max_logit_correct.max(r.max_logit_other)) {
                        out.push("full_logits: maximum logit mismatch".into());
                    }
                }
            }
        }
    }
    out
}

/// Clean and variant prompts ready for a backend.
pub fn build_requests(
    chains: &[ReasoningChain],
    variants: &[CounterfactualVariant],
    probe_chains: &[ReasoningChain],
) -> Result<Vec<TraceRequest>> {
    let by_id: HashMap<&str, &ReasoningChain> = chains.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut out = Vec::with_capacity(chains.len() + variants.len() + probe_chains.len());
    for c in chains {
        out.push(TraceRequest::new(
            c.id.clone(),
            render_prompt(c, None)?,
            c.answer_surface_forms(),
            c.task,
        ));
    }
    for v in variants.iter().filter(|v| v.accepted) {
        let parent = by_id.get(v.parent_id.as_str()).ok_or_else(|| Error::Stage {
            stage: "trace",
            record: Some(v.variant_id.clone()),
            message: format!("parent `{}` not in dataset", v.parent_id),
        })?;
        out.push(TraceRequest::new(
            v.variant_id.clone(),
            render_variant_prompt(parent, v, None)?,
            parent.answer_surface_forms(),
            parent.task,
        ));
    }
    for c in probe_chains {
        let mut r = TraceRequest::new(c.id.clone(), render_prompt(c, None)?, c.answer_surface_forms(), c.task);
        r.capture_all_layers_at_step_ends = true;
        out.push(r);
    }
    Ok(out)
}

/// A variant paired with its own record and its parent's clean record.
#[derive(Debug, Clone, Copy)]
pub struct JoinedRow<'a> {
    pub parent: &'a ReasoningChain,
    pub variant: &'a CounterfactualVariant,
    pub clean: &'a TraceRecord,
    pub corrupt: &'a TraceRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unmatched {
    pub variant_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct JoinedTable<'a> {
    pub rows: Vec<JoinedRow<'a>>,
    pub unmatched: Vec<Unmatched>,
}

pub fn index_records(records: &[TraceRecord]) -> Result<HashMap<&str, &TraceRecord>> {
    let mut by_id = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.record_id.as_str(), r).is_some() {
            return Err(Error::DuplicateRecord(r.record_id.clone()));
        }
    }
    Ok(by_id)
}

/// Pair every accepted variant with its clean parent record.
pub fn join_traces<'a>(
    chains: &'a [ReasoningChain],
    variants: &'a [CounterfactualVariant],
    records: &'a [TraceRecord],
) -> Result<JoinedTable<'a>> {
    let by_id = index_records(records)?;
    let parents: HashMap<&str, &ReasoningChain> = chains.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for v in variants.iter().filter(|v| v.accepted) {
        let miss = |reason: &str| Unmatched {
            variant_id: v.variant_id.clone(),
            reason: reason.to_string(),
        };
        let Some(parent) = parents.get(v.parent_id.as_str()) else {
            unmatched.push(miss("parent chain missing"));
            continue;
        };
        let Some(clean) = by_id.get(v.parent_id.as_str()) else {
            unmatched.push(miss("clean trace missing"));
            continue;
        };
        let Some(corrupt) = by_id.get(v.variant_id.as_str()) else {
            unmatched.push(miss("variant trace missing"));
            continue;
        };
        rows.push(JoinedRow {
            parent,
            variant: v,
            clean,
            corrupt,
        });
    }
    Ok(JoinedTable { rows, unmatched })
}
