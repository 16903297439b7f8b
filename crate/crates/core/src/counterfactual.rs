// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-step corruptions, paraphrase controls and coherence filtering.
//!
//! A corruption edits the state a step asserts (a depth, a category, an
//! arithmetic result) and truncates the chain after it. A paraphrase
//! rewrites the surface form of a step and keeps every other step.
//! Corruptions must pass the token-delta and perplexity-ratio filters
//! before they are used; paraphrases bypass them.

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{find_statement, format_number};
use crate::chain::{
    render_prompt, render_variant_prompt, variant_id, CounterfactualVariant, ReasoningChain, TaskKind, VariantKind,
    MAX_DYCK_DEPTH,
};
use crate::error::{Error, Result};
use crate::taskgen::{article, NONCE_WORDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_token_delta: i64,
    pub ppl_ratio_max: BTreeMap<TaskKind, f64>,
    pub max_variants_per_sample: usize,
    /// Also corrupt the premise step (k = 1).
    pub include_premise: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_token_delta: 2,
            ppl_ratio_max: BTreeMap::from([(TaskKind::Gsm8k, 1.5), (TaskKind::Dyck, 3.5), (TaskKind::ProntoQA, 3.5)]),
            max_variants_per_sample: 5,
            include_premise: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_token_delta < 0 {
            return Err(Error::Config("max_token_delta must be nonnegative".into()));
        }
        if self.max_variants_per_sample == 0 {
            return Err(Error::Config("max_variants_per_sample must be positive".into()));
        }
        if self.ppl_ratio_max.values().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("perplexity-ratio thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn ppl_threshold(&self, task: TaskKind) -> f64 {
        self.ppl_ratio_max.get(&task).copied().unwrap_or(f64::INFINITY)
    }
}

/// Whitespace token count; the stand-in when no backend tokenizer exists.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn make_variant(chain: &ReasoningChain, k: usize, text: String, kind: VariantKind) -> CounterfactualVariant {
    let keep = match kind {
        VariantKind::Corruption => k,
        VariantKind::Paraphrase => chain.len(),
    };
    let mut steps = chain.steps[..keep].to_vec();
    let delta = whitespace_tokens(&text) as i64 - whitespace_tokens(&steps[k - 1].text) as i64;
    steps[k - 1].text = text;
    CounterfactualVariant {
        parent_id: chain.id.clone(),
        variant_id: variant_id(&chain.id, k, 0),
        kind,
        corrupt_position: k,
        steps,
        token_delta: delta,
        ppl_ratio: None,
        accepted: kind == VariantKind::Paraphrase,
    }
}

fn check_position(chain: &ReasoningChain, k: usize) -> Result<()> {
    if k == 0 || k > chain.len() {
        return Err(Error::StepOutOfRange {
            step: k,
            len: chain.len(),
        });
    }
    Ok(())
}

/// Corrupt step `k` and truncate everything after it.
pub fn corrupt_step<R: Rng + ?Sized>(chain: &ReasoningChain, k: usize, rng: &mut R) -> Result<CounterfactualVariant> {
    check_position(chain, k)?;
    let text = &chain.steps[k - 1].text;
    let corrupted = match chain.task {
        TaskKind::Dyck => {
            let delta = if rng.random_bool(0.5) { 1 } else { -1 };
            corrupt_depth(text, delta)
        }
        TaskKind::ProntoQA => corrupt_logic(text, rng),
        TaskKind::Gsm8k => {
            let stmt = find_statement(text);
            let choices = stmt.as_ref().map(|s| wrong_values(s.value)).unwrap_or_default();
            choices.choose(rng).and_then(|&v| replace_result(text, v))
        }
    }
    .ok_or_else(|| Error::NoCorruptionSite {
        step: k,
        reason: format!("no corruptible site in `{text}`"),
    })?;
    debug_assert_ne!(&corrupted, text);
    Ok(make_variant(chain, k, corrupted, VariantKind::Corruption))
}

/// Shift the last number in a Dyck step by `delta`, staying inside
/// `[0, MAX_DYCK_DEPTH]` and never equal to the stated value.
pub fn corrupt_depth(text: &str, delta: i64) -> Option<String> {
    let end = text.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = text[..end].rfind(|c: char| !c.is_ascii_digit()).map_or(0, |i| i + 1);
    let depth: i64 = text[start..end].parse().ok()?;
    let max = MAX_DYCK_DEPTH as i64;
    let mut wrong = depth + delta;
    if !(0..=max).contains(&wrong) {
        wrong = depth - delta;
    }
    if wrong == depth || !(0..=max).contains(&wrong) {
        return None;
    }
    Some(format!("{}{}{}", &text[..start], wrong, &text[end..]))
}

const QUANTIFIERS: [&str; 3] = ["All ", "Every ", "Each "];

fn corrupt_logic<R: Rng + ?Sized>(text: &str, rng: &mut R) -> Option<String> {
    // A rule sentence negates its quantifier; anything else swaps a category.
    if let Some(q) = QUANTIFIERS.iter().find(|q| text.starts_with(*q)) {
        return Some(format!("No {}", &text[q.len()..]));
    }
    substitute_category(text, rng)
}

/// Replace the last asserted category (`is a X`, not `not a X`) with a
/// different ontology term absent from the sentence.
pub fn substitute_category<R: Rng + ?Sized>(text: &str, rng: &mut R) -> Option<String> {
    let words: Vec<&str> = text.split(' ').collect();
    let bare = |w: &str| w.trim_end_matches(['.', ',', '?']).to_string();
    let site = (2..words.len()).rev().find(|&i| {
        NONCE_WORDS.contains(&bare(words[i]).as_str()) && matches!(words[i - 1], "a" | "an") && words[i - 2] == "is"
    })?;
    let original = bare(words[site]);
    let present: Vec<String> = words.iter().map(|w| bare(w)).collect();
    let options: Vec<&str> = NONCE_WORDS
        .iter()
        .copied()
        .filter(|w| *w != original && !present.iter().any(|p| p == w))
        .collect();
    let replacement = options.choose(rng)?;
    let suffix = &words[site][original.len()..];
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out[site] = format!("{replacement}{suffix}");
    out[site - 1] = article(replacement).to_string();
    Some(out.join(" "))
}

/// Wrong results for an arithmetic step: ±1, ±2 and adjacent-digit swaps,
/// excluding the true value, zero and negatives.
pub fn wrong_values(truth: f64) -> Vec<f64> {
    let mut out: Vec<f64> = [1.0, -1.0, 2.0, -2.0].iter().map(|d| truth + d).collect();
    if truth.fract() == 0.0 && truth >= 10.0 {
        let digits: Vec<char> = format_number(truth).chars().collect();
        for i in 0..digits.len() - 1 {
            let mut d = digits.clone();
            d.swap(i, i + 1);
            if d[0] != '0' {
                if let Ok(v) = d.iter().collect::<String>().parse::<f64>() {
                    out.push(v);
                }
            }
        }
    }
    let mut seen = Vec::new();
    for v in out {
        if v != truth && v > 0.0 && !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen
}

/// Replace the stated result of the step's last `expr = value`.
pub fn replace_result(text: &str, value: f64) -> Option<String> {
    let stmt = find_statement(text)?;
    let new = format_number(value);
    (new != stmt.value_text).then(|| {
        format!(
            "{}{}{}",
            &text[..stmt.value_span.start],
            new,
            &text[stmt.value_span.end..]
        )
    })
}

/// Meaning-preserving rewrite of step `k`; no truncation.
pub fn make_paraphrase<R: Rng + ?Sized>(
    chain: &ReasoningChain,
    k: usize,
    _rng: &mut R,
) -> Result<CounterfactualVariant> {
    check_position(chain, k)?;
    let text = &chain.steps[k - 1].text;
    let rewritten = match chain.task {
        TaskKind::Dyck => paraphrase_dyck(text),
        TaskKind::ProntoQA => paraphrase_logic(text),
        TaskKind::Gsm8k => {
            return Err(Error::NoParaphrase(
                "gsm8k (supply paraphrase variants from a file)".into(),
            ))
        }
    }
    .ok_or_else(|| Error::NoParaphrase(format!("step `{text}`")))?;
    Ok(make_variant(chain, k, rewritten, VariantKind::Paraphrase))
}

fn paraphrase_dyck(text: &str) -> Option<String> {
    let s = crate::stepform::parse_dyck_step(text)?;
    let canonical = format!("Seen '{}', stack depth is {}.", s.token, s.stated_depth);
    Some(if text == canonical {
        format!("After '{}', the depth is now {}.", s.token, s.stated_depth)
    } else {
        canonical
    })
}

fn paraphrase_logic(text: &str) -> Option<String> {
    let words: Vec<&str> = text.split(' ').collect();
    // "all X are Y" -> "every X is a Y"
    if let Some(i) = words
        .iter()
        .position(|w| w.eq_ignore_ascii_case("all"))
        .filter(|&i| words.get(i + 2) == Some(&"are") && i + 3 < words.len())
    {
        let every = if words[i] == "All" { "Every" } else { "every" };
        let target = words[i + 3].trim_end_matches(['.', ',']);
        let mut out: Vec<String> = words[..i].iter().map(|w| w.to_string()).collect();
        out.extend([
            every.to_string(),
            words[i + 1].to_string(),
            "is".into(),
            article(target).into(),
        ]);
        out.extend(words[i + 3..].iter().map(|w| w.to_string()));
        return Some(out.join(" "));
    }
    if let Some(rest) = text.strip_prefix("Conclusion: ") {
        return Some(format!("In conclusion, {rest}"));
    }
    text.strip_prefix("In conclusion, ")
        .map(|rest| format!("Conclusion: {rest}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(String),
}

/// Coherence filter for a corruption candidate.
pub fn filter_candidate(
    variant: &CounterfactualVariant,
    task: TaskKind,
    clean_step_tokens: usize,
    corrupt_step_tokens: usize,
    ppl_clean: f64,
    ppl_corrupt: f64,
    cfg: &FilterConfig,
) -> Result<FilterDecision> {
    for p in [ppl_clean, ppl_corrupt] {
        if !(p > 0.0) {
            return Err(Error::NonPositivePerplexity(p));
        }
    }
    if variant.kind == VariantKind::Paraphrase {
        return Ok(FilterDecision::Accept);
    }
    let delta = corrupt_step_tokens as i64 - clean_step_tokens as i64;
    if delta.abs() > cfg.max_token_delta {
        return Ok(FilterDecision::Reject("token_delta".into()));
    }
    if ppl_corrupt / ppl_clean > cfg.ppl_threshold(task) {
        return Ok(FilterDecision::Reject("ppl_ratio".into()));
    }
    Ok(FilterDecision::Accept)
}

/// A rejected corruption candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectLog {
    pub parent_id: String,
    pub k: usize,
    pub reason: String,
}

/// Corruption positions for a chain of `len` steps.
pub fn choose_positions<R: Rng + ?Sized>(len: usize, cfg: &FilterConfig, rng: &mut R) -> Vec<usize> {
    let pool: Vec<usize> = (2..=len).collect();
    let want = if cfg.include_premise {
        cfg.max_variants_per_sample.saturating_sub(1)
    } else {
        cfg.max_variants_per_sample
    };
    let mut picked: Vec<usize> = if pool.len() <= want {
        pool
    } else {
        index::sample(rng, pool.len(), want)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    if cfg.include_premise {
        picked.push(1);
    }
    picked.sort_unstable();
    picked
}

/// Build filtered corruption variants for one chain.
///
/// `token_counter` counts tokens of a step's text; `ppl_source` scores a
/// whole prompt under the model being evaluated.
pub fn build_variants<R, T, P>(
    chain: &ReasoningChain,
    cfg: &FilterConfig,
    token_counter: T,
    mut ppl_source: P,
    rng: &mut R,
) -> Result<(Vec<CounterfactualVariant>, Vec<RejectLog>)>
where
    R: Rng + ?Sized,
    T: Fn(&str) -> usize,
    P: FnMut(&str) -> Result<f64>,
{
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (n, k) in choose_positions(chain.len(), cfg, rng).into_iter().enumerate() {
        let mut variant = match corrupt_step(chain, k, rng) {
            Ok(v) => v,
            Err(e) => {
                rejected.push(RejectLog {
                    parent_id: chain.id.clone(),
                    k,
                    reason: format!("no_site: {e}"),
                });
                continue;
            }
        };
        variant.variant_id = variant_id(&chain.id, k, n);
        let clean_tokens = token_counter(&chain.steps[k - 1].text);
        let corrupt_tokens = token_counter(&variant.steps[k - 1].text);
        variant.token_delta = corrupt_tokens as i64 - clean_tokens as i64;
        let ppl_clean = ppl_source(&render_prompt(chain, Some(k))?)?;
        let ppl_corrupt = ppl_source(&render_variant_prompt(chain, &variant, None)?)?;
        variant.ppl_ratio = Some(ppl_corrupt / ppl_clean);
        match filter_candidate(
            &variant,
            chain.task,
            clean_tokens,
            corrupt_tokens,
            ppl_clean,
            ppl_corrupt,
            cfg,
        )? {
            FilterDecision::Accept => {
                variant.accepted = true;
                accepted.push(variant);
            }
            FilterDecision::Reject(reason) => rejected.push(RejectLog {
                parent_id: chain.id.clone(),
                k,
                reason,
            }),
        }
    }
    Ok((accepted, rejected))
}

/// Paraphrase controls at the same kind of spread positions; numbering
/// starts at `first_ordinal` so ids never collide with corruptions.
pub fn build_paraphrases<R: Rng + ?Sized>(
    chain: &ReasoningChain,
    cfg: &FilterConfig,
    first_ordinal: usize,
    rng: &mut R,
) -> Result<Vec<CounterfactualVariant>> {
    choose_positions(chain.len(), cfg, rng)
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let mut v = make_paraphrase(chain, k, rng)?;
            v.variant_id = variant_id(&chain.id, k, first_ordinal + i);
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{validate_variant, Annotation, AnswerSpec, Step};
    use crate::rng::keyed_rng;
    use crate::taskgen::{gen_dyck, gen_prontoqa, GenConfig};

    fn single_step_chain(task: TaskKind, text: &str, annotation: Annotation) -> ReasoningChain {
        ReasoningChain {
            id: "c".into(),
            task,
            input_text: "Input".into(),
            question: "Q?".into(),
            steps: vec![Step {
                index: 1,
                text: text.into(),
                annotation,
            }],
            answer: AnswerSpec {
                text: "x".into(),
                token_class: task.answer_class(),
            },
        }
    }

    #[test]
    fn depth_error_example() {
        assert_eq!(
            corrupt_depth("Seen '{', stack depth is 2.", -1).as_deref(),
            Some("Seen '{', stack depth is 1.")
        );
        // clamped at both ends
        assert_eq!(
            corrupt_depth("Seen '(', stack depth is 0.", -1).as_deref(),
            Some("Seen '(', stack depth is 1.")
        );
        assert_eq!(
            corrupt_depth("Seen '(', stack depth is 10.", 1).as_deref(),
            Some("Seen '(', stack depth is 9.")
        );
    }

    #[test]
    fn quantifier_negation_example() {
        let c = single_step_chain(TaskKind::ProntoQA, "Every wumpus is a zumpus.", Annotation::Truth(true));
        let v = corrupt_step(&c, 1, &mut keyed_rng(1, &[])).unwrap();
        assert_eq!(v.steps[0].text, "No wumpus is a zumpus.");
        assert_eq!(v.token_delta, 0);
    }

    #[test]
    fn arithmetic_error_example() {
        assert_eq!(
            replace_result("She has 15 × 2 = 30 eggs.", 32.0).as_deref(),
            Some("She has 15 × 2 = 32 eggs.")
        );
        let c = single_step_chain(
            TaskKind::Gsm8k,
            "She has 15 × 2 = 30 eggs.",
            Annotation::Op(crate::Operation::Mul),
        );
        for seed in 0..20 {
            let v = corrupt_step(&c, 1, &mut keyed_rng(seed, &[])).unwrap();
            let s = find_statement(&v.steps[0].text).unwrap();
            assert!(wrong_values(30.0).contains(&s.value));
            assert!(s.value != 30.0 && s.value != 0.0);
        }
        assert!(wrong_values(30.0).contains(&32.0));
    }

    #[test]
    fn arithmetic_step_without_equals_has_no_site() {
        let c = single_step_chain(TaskKind::Gsm8k, "She is happy.", Annotation::Op(crate::Operation::Add));
        assert!(matches!(
            corrupt_step(&c, 1, &mut keyed_rng(1, &[])),
            Err(Error::NoCorruptionSite { step: 1, .. })
        ));
    }

    #[test]
    fn wrong_values_exclude_truth_and_zero() {
        assert_eq!(wrong_values(1.0), vec![2.0, 3.0]);
        assert!(wrong_values(12.0).contains(&21.0));
        assert!(!wrong_values(30.0).contains(&3.0));
    }

    #[test]
    fn paraphrase_templates() {
        let c = single_step_chain(TaskKind::Dyck, "Seen '{', stack depth is 2.", Annotation::Depth(2));
        let v = make_paraphrase(&c, 1, &mut keyed_rng(1, &[])).unwrap();
        assert_eq!(v.steps[0].text, "After '{', the depth is now 2.");
        assert_eq!(v.steps[0].annotation, Annotation::Depth(2));
        assert!(validate_variant(&c, &v).is_empty());

        assert_eq!(
            paraphrase_logic("All wumpus are zumpus.").as_deref(),
            Some("Every wumpus is a zumpus.")
        );
        assert_eq!(
            paraphrase_logic("Since Sam is a zumpus and all zumpus are impus, Sam is an impus.").as_deref(),
            Some("Since Sam is a zumpus and every zumpus is an impus, Sam is an impus.")
        );
        let g = single_step_chain(TaskKind::Gsm8k, "2 + 2 = 4", Annotation::Op(crate::Operation::Add));
        assert!(matches!(
            make_paraphrase(&g, 1, &mut keyed_rng(1, &[])),
            Err(Error::NoParaphrase(_))
        ));
    }

    #[test]
    fn filter_examples() {
        let c = single_step_chain(TaskKind::Dyck, "Seen '{', stack depth is 2.", Annotation::Depth(2));
        let v = corrupt_step(&c, 1, &mut keyed_rng(1, &[])).unwrap();
        let cfg = FilterConfig::default();
        assert_eq!(
            filter_candidate(&v, TaskKind::Dyck, 5, 8, 1.0, 1.0, &cfg).unwrap(),
            FilterDecision::Reject("token_delta".into())
        );
        assert_eq!(
            filter_candidate(&v, TaskKind::Gsm8k, 5, 5, 1.0, 1.6, &cfg).unwrap(),
            FilterDecision::Reject("ppl_ratio".into())
        );
        assert_eq!(
            filter_candidate(&v, TaskKind::Dyck, 5, 6, 1.0, 3.0, &cfg).unwrap(),
            FilterDecision::Accept
        );
        assert!(filter_candidate(&v, TaskKind::Dyck, 5, 5, 0.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn cap_and_position_spread() {
        let chains = gen_dyck(&GenConfig {
            chain_length: 8,
            n_samples: 10,
            ..GenConfig::new(TaskKind::Dyck)
        })
        .unwrap();
        let cfg = FilterConfig::default();
        for c in &chains {
            let mut rng = keyed_rng(3, &[c.id.as_str().into()]);
            let (acc, rej) = build_variants(c, &cfg, whitespace_tokens, |_| Ok(1.0), &mut rng).unwrap();
            assert_eq!(acc.len(), 5);
            assert!(rej.is_empty());
            let mut ks: Vec<usize> = acc.iter().map(|v| v.corrupt_position).collect();
            ks.dedup();
            assert_eq!(ks.len(), 5);
            assert!(ks.iter().all(|&k| (2..=8).contains(&k)));
            for v in &acc {
                assert!(validate_variant(c, v).is_empty(), "{:?}", validate_variant(c, v));
                assert_eq!(v.steps.len(), v.corrupt_position);
            }
            let mut rng = keyed_rng(3, &[c.id.as_str().into()]);
            let again = build_variants(c, &cfg, whitespace_tokens, |_| Ok(1.0), &mut rng)
                .unwrap()
                .0;
            assert_eq!(acc, again);
        }
    }

    #[test]
    fn failing_perplexity_rejects_everything() {
        let c = &gen_prontoqa(&GenConfig {
            n_samples: 1,
            ..GenConfig::new(TaskKind::ProntoQA)
        })
        .unwrap()[0];
        let mut calls = 0u32;
        let ppl = |_: &str| {
            calls += 1;
            Ok(if calls % 2 == 1 { 1.0 } else { 10.0 })
        };
        let (acc, rej) = build_variants(
            c,
            &FilterConfig::default(),
            whitespace_tokens,
            ppl,
            &mut keyed_rng(1, &[]),
        )
        .unwrap();
        assert!(acc.is_empty());
        assert_eq!(rej.len(), 5);
        assert!(rej.iter().all(|r| r.reason == "ppl_ratio"));
    }

    #[test]
    fn prontoqa_substitution_changes_the_conclusion() {
        let c = &gen_prontoqa(&GenConfig {
            n_samples: 1,
            ..GenConfig::new(TaskKind::ProntoQA)
        })
        .unwrap()[0];
        for k in 1..=c.len() {
            let v = corrupt_step(c, k, &mut keyed_rng(k as u64, &[])).unwrap();
            assert_ne!(v.steps[k - 1].text, c.steps[k - 1].text);
            assert_eq!(v.token_delta, 0);
            assert!(crate::stepform::parse_logic_step(&v.steps[k - 1].text).is_some());
        }
    }

    #[test]
    fn loosening_thresholds_never_rejects_more() {
        let c = single_step_chain(TaskKind::Dyck, "Seen '{', stack depth is 2.", Annotation::Depth(2));
        let v = corrupt_step(&c, 1, &mut keyed_rng(1, &[])).unwrap();
        let tight = FilterConfig::default();
        let mut loose = tight.clone();
        loose.max_token_delta = 4;
        loose.ppl_ratio_max.insert(TaskKind::Dyck, 10.0);
        for (a, b, r) in [(5, 5, 3.0), (5, 8, 1.0), (5, 6, 3.6), (5, 12, 11.0)] {
            let t = filter_candidate(&v, TaskKind::Dyck, a, b, 1.0, r, &tight).unwrap();
            let l = filter_candidate(&v, TaskKind::Dyck, a, b, 1.0, r, &loose).unwrap();
            assert!(!(t == FilterDecision::Accept && l != FilterDecision::Accept));
        }
    }
}
