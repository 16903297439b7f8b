// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted trace backend with controllable faithfulness regimes.
//!
//! The mock reads a prompt back into its template parts, re-derives the
//! chain state the steps assert, and emits a [`TraceRecord`] whose answer
//! margin follows one of three regimes:
//!
//! - **Faithful**: the margin depends on the stated steps. A step that
//!   contradicts the input lowers the margin by a position-dependent
//!   reliance weight that rises up to a horizon and then collapses.
//! - **AntiFaithful**: the margin is computed from the input alone, minus
//!   an interference term per reasoning step present, so truncation raises
//!   it.
//! - **MappingGap**: hidden states encode the true per-step labels while
//!   the margin always favors a wrong answer.
//!
//! Everything is a pure function of `(request, regime)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arith::find_statement;
use crate::chain::{parse_prompt, TaskKind, MAX_DYCK_DEPTH};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, keyed_rng, Key};
use crate::stepform::{
    parse_dyck_input, parse_dyck_step, parse_logic_input, parse_logic_step, parse_membership_question, LogicStep,
};
use crate::taskgen::{closer_for, opener_for, CLOSERS, OPENERS};
use crate::trace::{layer_index, LogitStats, Matrix, TraceRecord, TraceRequest, TRACE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    Faithful,
    #[serde(rename = "anti")]
    AntiFaithful,
    #[serde(rename = "gap")]
    MappingGap,
}

impl std::str::FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(RegimeKind::Faithful),
            "anti" | "antifaithful" | "anti-faithful" => Ok(RegimeKind::AntiFaithful),
            "gap" | "mapping-gap" | "mappinggap" => Ok(RegimeKind::MappingGap),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub noise_scale: f64,
    /// Margin lost per reasoning step present (AntiFaithful).
    pub interference: f64,
    pub d: usize,
    pub seed: u64,
    /// Fraction of the chain where reliance on a step peaks (Faithful).
    pub horizon_fraction: f64,
    pub n_layers: usize,
    /// Clean margin in logit units.
    pub base_margin: f64,
    pub emit_full_logits: bool,
}

impl Regime {
    pub fn new(kind: RegimeKind, seed: u64) -> Self {
        Self {
            kind,
            noise_scale: 0.05,
            interference: 0.4,
            d: 64,
            seed,
            horizon_fraction: 0.75,
            n_layers: 5,
            base_margin: 4.0,
            emit_full_logits: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be nonnegative".into()));
        }
        if self.d < 4 {
            return Err(Error::Config("hidden width d must be at least 4".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".into()));
        }
        if !(self.horizon_fraction > 0.0 && self.horizon_fraction <= 1.0) {
            return Err(Error::Config("horizon_fraction must be in (0,1]".into()));
        }
        Ok(())
    }

    /// Share of the margin a Faithful model loses when step `x = k/T` is wrong.
    pub fn reliance(&self, x: f64) -> f64 {
        let h = self.horizon_fraction;
        if x <= h + 1e-12 {
            0.35 + 0.6 * (x / h)
        } else {
            0.1
        }
    }

    /// Deterministic part of the answer margin for a parsed chain state.
    pub fn clean_margin(&self, state: &ChainState) -> f64 {
        let t = state.nominal_len.max(1) as f64;
        match self.kind {
            RegimeKind::Faithful => {
                let penalty = state
                    .steps
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| !s.consistent)
                    .map(|(j, _)| self.reliance((j + 1) as f64 / t))
                    .fold(0.0, f64::max);
                self.base_margin * (1.0 - penalty)
            }
            RegimeKind::AntiFaithful => {
                let from_input = self.base_margin + self.interference * t;
                from_input - self.interference * state.steps.len() as f64
            }
            RegimeKind::MappingGap => -self.base_margin,
        }
    }
}

/// What the mock reads out of one reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepState {
    /// The step agrees with the input.
    pub consistent: bool,
    /// The step passes the mock's crude fluency heuristic.
    pub plausible: bool,
    /// Label implied by what the step says.
    pub stated_class: usize,
    /// Label implied by the input.
    pub true_class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    pub task: TaskKind,
    /// Chain length implied by the input.
    pub nominal_len: usize,
    pub steps: Vec<StepState>,
}

impl ChainState {
    pub fn from_prompt(prompt: &str) -> Result<Self> {
        let parsed = parse_prompt(prompt)?;
        if let Some(tokens) = parse_dyck_input(&parsed.input_text) {
            return dyck_state(&tokens, &parsed.steps);
        }
        if let Some(input) = parse_logic_input(&parsed.input_text) {
            let asked = parse_membership_question(&parsed.question)
                .ok_or_else(|| Error::Prompt(format!("unrecognized question `{}`", parsed.question)))?;
            return Ok(logic_state(&input, &asked, &parsed.steps));
        }
        Ok(arith_state(&parsed.steps))
    }
}

fn dyck_state(tokens: &[char], steps: &[String]) -> Result<ChainState> {
    let mut stack = Vec::new();
    let mut prev_stated = 0i64;
    let mut out = Vec::with_capacity(steps.len());
    for (j, text) in steps.iter().enumerate() {
        let input_tok = *tokens
            .get(j)
            .ok_or_else(|| Error::Prompt("more Dyck steps than input tokens".into()))?;
        if OPENERS.contains(&input_tok) {
            stack.push(input_tok);
        } else if CLOSERS.contains(&input_tok) {
            stack.pop();
        }
        let truth = stack.len().min(MAX_DYCK_DEPTH as usize);
        let parsed = parse_dyck_step(text);
        let stated = parsed.map_or(truth as i64, |p| p.stated_depth);
        let consistent = parsed.is_some_and(|p| p.token == input_tok && p.stated_depth == truth as i64);
        out.push(StepState {
            consistent,
            plausible: parsed.is_some() && (stated - prev_stated).abs() == 1,
            stated_class: stated.clamp(0, MAX_DYCK_DEPTH as i64) as usize,
            true_class: truth,
        });
        prev_stated = stated;
    }
    Ok(ChainState {
        task: TaskKind::Dyck,
        nominal_len: tokens.len(),
        steps: out,
    })
}

fn logic_state(input: &crate::stepform::LogicInput, asked: &str, steps: &[String]) -> ChainState {
    let mut chain = vec![input.category.clone()];
    let mut closure: BTreeSet<String> = chain.iter().cloned().collect();
    while let Some((_, to)) = input
        .rules
        .iter()
        .find(|(from, to)| from == chain.last().unwrap() && !closure.contains(to))
    {
        closure.insert(to.clone());
        chain.push(to.clone());
    }
    let terminal = chain.last().unwrap().clone();
    let truth = closure.contains(asked) as usize;
    let has_rule = |a: &str, b: &str| input.rules.iter().any(|(f, t)| f == a && t == b);
    let out = steps
        .iter()
        .map(|text| {
            let parsed = parse_logic_step(text);
            let (consistent, plausible) = match &parsed {
                Some(LogicStep::Hop {
                    premise,
                    negated,
                    rule_from,
                    rule_to,
                    conclusion,
                    ..
                }) => (
                    !negated
                        && closure.contains(premise)
                        && premise == rule_from
                        && has_rule(rule_from, rule_to)
                        && conclusion == rule_to,
                    !negated,
                ),
                Some(LogicStep::Conclusion { category, excluded, .. }) => (
                    *category == terminal && excluded.as_ref().is_none_or(|e| !closure.contains(e)),
                    true,
                ),
                Some(LogicStep::Rule { negated, from, to }) => (!negated && has_rule(from, to), !negated),
                None => (false, false),
            };
            StepState {
                consistent,
                plausible,
                stated_class: truth,
                true_class: truth,
            }
        })
        .collect();
    ChainState {
        task: TaskKind::ProntoQA,
        nominal_len: chain.len(),
        steps: out,
    }
}

fn arith_state(steps: &[String]) -> ChainState {
    let out = steps
        .iter()
        .map(|text| {
            let stmt = find_statement(text);
            let eval = stmt.as_ref().and_then(|s| s.evaluate());
            let class = eval
                .and_then(|e| e.root)
                .and_then(|op| op.operation())
                .map_or(0, |op| op.class_index());
            let gap = match (&stmt, eval) {
                (Some(s), Some(e)) => (s.value - e.value).abs(),
                _ => f64::INFINITY,
            };
            StepState {
                consistent: stmt.as_ref().is_some_and(|s| s.is_consistent()),
                plausible: gap <= 1.0,
                stated_class: class,
                true_class: class,
            }
        })
        .collect();
    ChainState {
        task: TaskKind::Gsm8k,
        nominal_len: TaskKind::Gsm8k.default_chain_length().max(steps.len()),
        steps: out,
    }
}

/// Whitespace tokenization of a prompt: token count and the index of the
/// last token of every `Step i:` line.
pub fn token_layout(prompt: &str) -> (Vec<&str>, Vec<Option<usize>>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut owner = Vec::new();
    let mut ends = Vec::new();
    let mut step = 0usize;
    for line in prompt.split('\n') {
        let is_step = line.starts_with(&format!("Step {}: ", step + 1));
        let toks: Vec<&str> = line.split_whitespace().collect();
        if is_step {
            step += 1;
        }
        for t in &toks {
            tokens.push(*t);
            owner.push(is_step.then(|| step - 1));
        }
        if is_step && !toks.is_empty() {
            ends.push(tokens.len() - 1);
        }
    }
    (tokens, owner, ends)
}

const FILLER: usize = 28;

fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for c in CLOSERS.iter().chain(OPENERS.iter()) {
        v.push(c.to_string());
        v.push(format!(" {c}"));
    }
    for w in ["True", "False"] {
        v.push(w.into());
        v.push(format!(" {w}"));
    }
    for d in 0..10 {
        v.push(d.to_string());
        v.push(format!(" {d}"));
    }
    v.extend((0..FILLER).map(|i| format!("<f{i}>")));
    v
}

/// The scripted backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub regime: Regime,
    vocab: Vec<String>,
}

impl MockBackend {
    pub fn new(regime: Regime) -> Result<Self> {
        regime.validate()?;
        Ok(Self {
            regime,
            vocab: vocabulary(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn id(&self, text: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == text)
    }

    /// Token ids of the answer's first token, leading-space forms included.
    pub fn resolve_answer_ids(&self, texts: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = texts
            .iter()
            .filter_map(|t| {
                self.id(t).or_else(|| {
                    let lead = t.starts_with(' ');
                    let first = t.trim_start().chars().next()?;
                    self.id(&if lead { format!(" {first}") } else { first.to_string() })
                })
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Most likely wrong answer: a sibling of the primary correct token.
    fn competitor(&self, primary: &str) -> String {
        let p = primary.trim();
        let c = p.chars().next().unwrap_or('?');
        if p == "True" {
            "False".into()
        } else if p == "False" {
            "True".into()
        } else if let Some(open) = opener_for(c) {
            let i = OPENERS.iter().position(|&o| o == open).unwrap();
            closer_for(OPENERS[(i + 1) % 4]).unwrap().to_string()
        } else if let Some(d) = c.to_digit(10) {
            ((d + 1) % 10).to_string()
        } else {
            "<f0>".into()
        }
    }

    fn prompt_key(prompt: &str) -> u64 {
        fnv1a(prompt.as_bytes())
    }

    /// Prompt perplexity: `1 + noise·u`, plus 2 if any step looks implausible.
    pub fn perplexity(&self, prompt: &str) -> Result<f64> {
        let state = ChainState::from_prompt(prompt)?;
        Ok(self.perplexity_for(prompt, &state))
    }

    fn perplexity_for(&self, prompt: &str, state: &ChainState) -> f64 {
        let mut rng = keyed_rng(self.regime.seed, &[Key::Int(Self::prompt_key(prompt)), "ppl".into()]);
        let u: f64 = rng.random();
        let penalty = if state.steps.iter().all(|s| s.plausible) {
            0.0
        } else {
            2.0
        };
        1.0 + self.regime.noise_scale * u + penalty
    }

    pub fn trace(&self, request: &TraceRequest) -> Result<TraceRecord> {
        let state = ChainState::from_prompt(&request.prompt)?;
        mock_trace(request, &state, self)
    }

    fn embedding(&self, keys: &[Key<'_>]) -> Vec<f64> {
        let mut rng = keyed_rng(self.regime.seed, keys);
        let scale = 1.0 / (self.regime.d as f64).sqrt();
        (0..self.regime.d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    }
}

const LAYER_GAIN: [f64; 5] = [0.4, 0.8, 1.0, 0.8, 0.6];
const POSITION_WEIGHT: f64 = 0.3;
const TOKEN_WEIGHT: f64 = 0.5;
const CONTEXT_CLASS: usize = 1000;

fn layer_gain(layer: usize, n_layers: usize) -> f64 {
    if n_layers == LAYER_GAIN.len() {
        LAYER_GAIN[layer]
    } else {
        let x = (layer as f64 + 0.5) / n_layers as f64;
        0.4 + 0.6 * (1.0 - (2.0 * x - 1.0).abs())
    }
}

/// Emit a record for `request` given its parsed chain state.
pub fn mock_trace(request: &TraceRequest, state: &ChainState, backend: &MockBackend) -> Result<TraceRecord> {
    let regime = &backend.regime;
    let key = MockBackend::prompt_key(&request.prompt);
    let correct_ids = backend.resolve_answer_ids(&request.answer_texts);
    if correct_ids.is_empty() {
        return Err(Error::Stage {
            stage: "trace",
            record: Some(request.record_id.clone()),
            message: "answer text resolves to an empty id set".into(),
        });
    }

    let mut rng = keyed_rng(regime.seed, &[Key::Int(key), "logits".into()]);
    let noise = Normal::new(0.0, regime.noise_scale).map_err(|e| Error::Config(e.to_string()))?;
    let margin = regime.clean_margin(state) + noise.sample(&mut rng);

    let primary = request.answer_texts[0].trim().to_string();
    let rival = backend.competitor(&primary);
    let rival_id = backend.id(&rival).unwrap_or(backend.vocab_size() - 1);
    const RIVAL_LOGIT: f64 = 2.0;
    let mut logits: Vec<f64> = (0..backend.vocab_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
    logits[rival_id] = RIVAL_LOGIT;
    for (n, &id) in correct_ids.iter().enumerate() {
        logits[id] = RIVAL_LOGIT + margin - 0.5 * n as f64;
    }
    // f32 round trip keeps the stored statistics identical to what a reader recomputes
    let logits: Vec<f64> = logits.iter().map(|&v| v as f32 as f64).collect();
    let stats = LogitStats::from_logits(&logits, &correct_ids)?;

    let predicted_answer = if stats.max_correct > stats.max_other {
        primary.clone()
    } else if let Some(rest) = primary
        .get(1..)
        .filter(|_| primary.chars().next().is_some_and(|c| c.is_ascii_digit()))
    {
        format!("{rival}{rest}")
    } else {
        rival
    };

    let (tokens, owner, step_ends) = token_layout(&request.prompt);
    let class_of = |tok: usize| -> usize {
        match owner[tok].and_then(|s| state.steps.get(s)) {
            Some(s) if regime.kind == RegimeKind::MappingGap => s.true_class,
            Some(s) => s.stated_class,
            None => CONTEXT_CLASS,
        }
    };
    let task = state.task.as_str();
    let base: Vec<Vec<f64>> = (0..tokens.len())
        .map(|p| {
            let cls = backend.embedding(&["class".into(), task.into(), class_of(p).into()]);
            let pos = backend.embedding(&["pos".into(), p.into()]);
            let tok = backend.embedding(&["tok".into(), Key::Int(fnv1a(tokens[p].as_bytes()))]);
            cls.iter()
                .zip(&pos)
                .zip(&tok)
                .flat_map(|((c, p), t)| [*c, POSITION_WEIGHT * p + TOKEN_WEIGHT * t])
                .collect()
        })
        .collect();
    let layer_rows = |layer: usize| -> Vec<Vec<f64>> {
        let gain = layer_gain(layer, regime.n_layers);
        let mut rng = keyed_rng(regime.seed, &[Key::Int(key), "hidden".into(), layer.into()]);
        base.iter()
            .map(|row| {
                row.chunks_exact(2)
                    .map(|cv| gain * cv[0] + cv[1] + noise.sample(&mut rng))
                    .collect()
            })
            .collect()
    };

    let mut hidden = BTreeMap::new();
    for &f in &request.layers {
        let layer = layer_index(f, regime.n_layers);
        hidden
            .entry(layer)
            .or_insert_with(|| Matrix::from_rows(&layer_rows(layer)));
    }
    let hidden = hidden
        .into_iter()
        .map(|(l, m)| m.map(|m| (l, m)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let step_hidden = if request.capture_all_layers_at_step_ends {
        let mut all = BTreeMap::new();
        for layer in 0..regime.n_layers {
            let rows = layer_rows(layer);
            let picked: Vec<Vec<f64>> = step_ends.iter().map(|&p| rows[p].clone()).collect();
            all.insert(
                layer,
                Matrix::new(
                    picked.len(),
                    regime.d,
                    picked.concat().iter().map(|&v| v as f32).collect(),
                )?,
            );
        }
        Some(all)
    } else {
        None
    };

    Ok(TraceRecord {
        trace_v: TRACE_VERSION,
        record_id: request.record_id.clone(),
        vocab_size: backend.vocab_size(),
        n_layers: regime.n_layers,
        logit_sigma: stats.sigma,
        max_logit_correct: stats.max_correct,
        max_logit_other: stats.max_other,
        n_prompt_tokens: tokens.len(),
        hidden,
        step_end_positions: step_ends,
        perplexity: backend.perplexity_for(&request.prompt, state),
        predicted_answer,
        full_logits: regime.emit_full_logits.then_some(logits),
        correct_ids: regime.emit_full_logits.then_some(correct_ids),
        step_hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{render_prompt, render_variant_prompt};
    use crate::taskgen::{gen_dyck, GenConfig};
    use crate::trace::validate_record;

    fn dyck() -> crate::ReasoningChain {
        gen_dyck(&GenConfig {
            n_samples: 1,
            ..GenConfig::new(TaskKind::Dyck)
        })
        .unwrap()
        .remove(0)
    }

    fn corrupted_at(c: &crate::ReasoningChain, k: usize) -> crate::CounterfactualVariant {
        let mut v = crate::counterfactual::corrupt_step(c, k, &mut keyed_rng(9, &[Key::Int(0)])).unwrap();
        v.accepted = true;
        v
    }

    #[test]
    fn faithful_margin_equations_by_hand() {
        // T = 12, horizon 0.75: reliance(3/12) = 0.35 + 0.6 * (0.25 / 0.75) = 0.55,
        // so the corrupt margin is 4 * 0.45 = 1.8 and NLDD = (4 - 1.8) / 4 * 100 = 55.
        let regime = Regime {
            noise_scale: 0.0,
            ..Regime::new(RegimeKind::Faithful, 1)
        };
        let c = dyck();
        let clean = ChainState::from_prompt(&render_prompt(&c, None).unwrap()).unwrap();
        let v = corrupted_at(&c, 3);
        let bad = ChainState::from_prompt(&render_variant_prompt(&c, &v, None).unwrap()).unwrap();
        assert_eq!(regime.clean_margin(&clean), 4.0);
        assert!((regime.clean_margin(&bad) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn anti_faithful_truncation_raises_the_margin() {
        // clean: 4 + 0.4 * 12 - 0.4 * 12 = 4; truncated at k = 3: 4 + 0.4 * 9 = 7.6
        let regime = Regime {
            noise_scale: 0.0,
            ..Regime::new(RegimeKind::AntiFaithful, 1)
        };
        let c = dyck();
        let clean = ChainState::from_prompt(&render_prompt(&c, None).unwrap()).unwrap();
        let v = corrupted_at(&c, 3);
        let bad = ChainState::from_prompt(&render_variant_prompt(&c, &v, None).unwrap()).unwrap();
        assert!((regime.clean_margin(&clean) - 4.0).abs() < 1e-12);
        assert!((regime.clean_margin(&bad) - 7.6).abs() < 1e-12);
    }

    #[test]
    fn records_are_valid_and_deterministic() {
        let c = dyck();
        let backend = MockBackend::new(Regime::new(RegimeKind::Faithful, 5)).unwrap();
        let mut req = TraceRequest::new(
            c.id.clone(),
            render_prompt(&c, None).unwrap(),
            c.answer_surface_forms(),
            c.task,
        );
        req.capture_all_layers_at_step_ends = true;
        let a = backend.trace(&req).unwrap();
        assert!(validate_record(&a).is_empty(), "{:?}", validate_record(&a));
        assert_eq!(a, backend.trace(&req).unwrap());
        assert_eq!(a.step_end_positions.len(), c.len());
        assert_eq!(a.hidden.keys().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(a.step_hidden.as_ref().unwrap().len(), 5);
        assert_eq!(a.predicted_answer, c.answer.text);
        assert_eq!(a.correct_ids.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn implausible_depth_jump_raises_perplexity() {
        let c = dyck();
        let backend = MockBackend::new(Regime::new(RegimeKind::Faithful, 5)).unwrap();
        let clean = backend.perplexity(&render_prompt(&c, Some(4)).unwrap()).unwrap();
        // any one-off depth edit leaves a zero or two-level jump from the previous step
        let v = corrupted_at(&c, 4);
        let bad = backend
            .perplexity(&render_variant_prompt(&c, &v, None).unwrap())
            .unwrap();
        assert!(clean < 1.06 && bad > 3.0);
    }

    #[test]
    fn unparseable_prompt_is_an_error() {
        let backend = MockBackend::new(Regime::new(RegimeKind::Faithful, 5)).unwrap();
        let req = TraceRequest::new("x".into(), "hello".into(), vec!["a".into()], TaskKind::Dyck);
        assert!(backend.trace(&req).is_err());
    }

    #[test]
    fn layout_marks_step_terminal_tokens() {
        let (toks, _, ends) = token_layout("In put\nQuestion: q?\nReasoning:\nStep 1: a b\nStep 2: c\nAnswer:");
        assert_eq!(toks.len(), 13);
        assert_eq!(ends, vec![8, 11]);
    }
}
