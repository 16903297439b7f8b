// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reasoning chains, counterfactual variants and prompt assembly.
//!
//! Every other module works on these value types. A chain is an input,
//! a question, an ordered list of annotated reasoning steps and the
//! canonical answer. A variant is derived from a parent chain by editing
//! exactly one step (and, for corruptions, dropping everything after it).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest stack depth a Dyck step may carry.
pub const MAX_DYCK_DEPTH: u8 = 10;

/// Trailing line of every prompt; the final prompt token sits right after it.
pub const ANSWER_CUE: &str = "Answer:";
pub const QUESTION_PREFIX: &str = "Question: ";
pub const REASONING_HEADER: &str = "Reasoning:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Dyck,
    ProntoQA,
    Gsm8k,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Dyck, TaskKind::ProntoQA, TaskKind::Gsm8k];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Dyck => "dyck",
            TaskKind::ProntoQA => "prontoqa",
            TaskKind::Gsm8k => "gsm8k",
        }
    }

    pub fn answer_class(self) -> TokenClass {
        match self {
            TaskKind::Gsm8k => TokenClass::MultiToken,
            _ => TokenClass::SingleToken,
        }
    }

    /// Greedy decode budget per task.
    pub fn max_new_tokens(self) -> usize {
        match self {
            TaskKind::Gsm8k => 30,
            _ => 10,
        }
    }

    /// Default reasoning length used by the generators.
    pub fn default_chain_length(self) -> usize {
        match self {
            TaskKind::Gsm8k => 8,
            TaskKind::Dyck => 12,
            TaskKind::ProntoQA => 16,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dyck" | "dyck-n" => Ok(TaskKind::Dyck),
            "prontoqa" | "pronto" => Ok(TaskKind::ProntoQA),
            "gsm8k" | "gsm" => Ok(TaskKind::Gsm8k),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Add,
    Sub,
    Mul,
}

impl Operation {
    pub fn class_index(self) -> usize {
        match self {
            Operation::Add => 0,
            Operation::Sub => 1,
            Operation::Mul => 2,
        }
    }
}

/// Per-step task label, used as the probe target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    /// Dyck: stack depth after the step's token.
    Depth(u8),
    /// ProntoQA: truth value of the final answer.
    Truth(bool),
    /// GSM8K: operation applied last in the step's expression.
    Op(Operation),
}

impl Annotation {
    /// Class index used for probing.
    pub fn class_label(&self) -> usize {
        match *self {
            Annotation::Depth(d) => d as usize,
            Annotation::Truth(t) => t as usize,
            Annotation::Op(op) => op.class_index(),
        }
    }

    fn task(&self) -> TaskKind {
        match self {
            Annotation::Depth(_) => TaskKind::Dyck,
            Annotation::Truth(_) => TaskKind::ProntoQA,
            Annotation::Op(_) => TaskKind::Gsm8k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenClass {
    SingleToken,
    MultiToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub text: String,
    pub token_class: TokenClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub id: String,
    pub task: TaskKind,
    pub input_text: String,
    pub question: String,
    pub steps: Vec<Step>,
    pub answer: AnswerSpec,
}

impl ReasoningChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Surface forms of the answer the backend should resolve to token ids.
    pub fn answer_surface_forms(&self) -> Vec<String> {
        let text = self.answer.text.trim();
        vec![text.to_string(), format!(" {text}")]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    Corruption,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualVariant {
    pub parent_id: String,
    pub variant_id: String,
    pub kind: VariantKind,
    pub corrupt_position: usize,
    pub steps: Vec<Step>,
    pub token_delta: i64,
    pub ppl_ratio: Option<f64>,
    pub accepted: bool,
}

/// `{parent_id}_k{position}_v{n}`
pub fn variant_id(parent_id: &str, position: usize, n: usize) -> String {
    format!("{parent_id}_k{position}_v{n}")
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetEntry {
    Variant(CounterfactualVariant),
    Chain(ReasoningChain),
}

/// Check every type invariant, returning one message per violation.
pub fn validate_chain(chain: &ReasoningChain) -> Vec<String> {
    let mut out = Vec::new();
    if chain.id.is_empty() {
        out.push("id: empty".to_string());
    }
    if chain.steps.is_empty() {
        out.push("steps: empty".to_string());
    }
    if chain.steps.iter().enumerate().any(|(i, s)| s.index != i + 1) {
        out.push("steps: non-contiguous indices".to_string());
    }
    for step in &chain.steps {
        if step.text.trim().is_empty() {
            out.push(format!("steps[{}].text: empty", step.index));
        }
        if step.text.contains('\n') {
            out.push(format!("steps[{}].text: contains newline", step.index));
        }
        if step.annotation.task() != chain.task {
            out.push(format!(
                "annotation: step {} label does not belong to task {}",
                step.index, chain.task
            ));
        }
        if let Annotation::Depth(d) = step.annotation {
            if d > MAX_DYCK_DEPTH {
                out.push("annotation: depth out of [0,10]".to_string());
            }
        }
    }
    if chain.answer.text.trim().is_empty() {
        out.push("answer: empty text".to_string());
    }
    if chain.answer.token_class != chain.task.answer_class() {
        out.push(format!(
            "answer: token_class {:?} invalid for task {}",
            chain.answer.token_class, chain.task
        ));
    }
    if chain.question.contains('\n') {
        out.push("question: contains newline".to_string());
    }
    out
}

/// Invariants of a variant relative to its parent.
pub fn validate_variant(parent: &ReasoningChain, variant: &CounterfactualVariant) -> Vec<String> {
    let mut out = Vec::new();
    let k = variant.corrupt_position;
    if variant.parent_id != parent.id {
        out.push("parent_id: does not match parent".to_string());
    }
    if k == 0 || k > parent.len() {
        out.push(format!("corrupt_position: {k} outside 1..={}", parent.len()));
        return out;
    }
    if variant.steps.iter().enumerate().any(|(i, s)| s.index != i + 1) {
        out.push("steps: non-contiguous indices".to_string());
    }
    match variant.kind {
        VariantKind::Corruption => {
            if variant.steps.len() != k {
                out.push("steps: corruption must be truncated after position k".to_string());
            } else if variant.steps[k - 1].text == parent.steps[k - 1].text {
                out.push("steps: corrupted step equals clean step".to_string());
            }
        }
        VariantKind::Paraphrase => {
            if variant.steps.len() != parent.len() {
                out.push("steps: paraphrase must keep every step".to_string());
            }
            let same = variant
                .steps
                .iter()
                .zip(&parent.steps)
                .all(|(a, b)| a.annotation == b.annotation);
            if !same {
                out.push("annotation: paraphrase changed a label".to_string());
            }
        }
    }
    if let Some(r) = variant.ppl_ratio {
        if !(r >= 0.0) {
            out.push("ppl_ratio: negative".to_string());
        }
    }
    out
}

/// Deterministic prompt: input, question, steps `1..=upto` and the answer cue.
pub fn render_prompt(chain: &ReasoningChain, upto_step: Option<usize>) -> Result<String> {
    let upto = upto_step.unwrap_or(chain.len());
    if upto > chain.len() {
        return Err(Error::StepOutOfRange {
            step: upto,
            len: chain.len(),
        });
    }
    Ok(assemble(chain, &chain.steps[..upto]))
}

/// Prompt for a variant: the parent's input and question with the variant's steps.
pub fn render_variant_prompt(
    parent: &ReasoningChain,
    variant: &CounterfactualVariant,
    upto_step: Option<usize>,
) -> Result<String> {
    let upto = upto_step.unwrap_or(variant.steps.len());
    if upto > variant.steps.len() {
        return Err(Error::StepOutOfRange {
            step: upto,
            len: variant.steps.len(),
        });
    }
    Ok(assemble(parent, &variant.steps[..upto]))
}

fn assemble(chain: &ReasoningChain, steps: &[Step]) -> String {
    let mut out = String::with_capacity(256);
    out.push_str(&chain.input_text);
    out.push('\n');
    out.push_str(QUESTION_PREFIX);
    out.push_str(&chain.question);
    out.push('\n');
    out.push_str(REASONING_HEADER);
    out.push('\n');
    for step in steps {
        out.push_str(&format!("Step {}: {}\n", step.index, step.text));
    }
    out.push_str(ANSWER_CUE);
    out
}

/// A prompt split back into its template parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub input_text: String,
    pub question: String,
    pub steps: Vec<String>,
}

/// Inverse of [`render_prompt`].
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    let lines: Vec<&str> = prompt.split('\n').collect();
    let q = lines
        .iter()
        .position(|l| l.starts_with(QUESTION_PREFIX))
        .ok_or_else(|| Error::Prompt("missing `Question:` line".into()))?;
    if lines.get(q + 1) != Some(&REASONING_HEADER) {
        return Err(Error::Prompt("missing `Reasoning:` header".into()));
    }
    if lines.last() != Some(&ANSWER_CUE) {
        return Err(Error::Prompt("prompt must end with the answer cue".into()));
    }
    let mut steps = Vec::new();
    for (i, line) in lines[q + 2..lines.len() - 1].iter().enumerate() {
        let prefix = format!("Step {}: ", i + 1);
        let text = line
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Prompt(format!("expected `{prefix}` at reasoning line {}", i + 1)))?;
        steps.push(text.to_string());
    }
    Ok(ParsedPrompt {
        input_text: lines[..q].join("\n"),
        question: lines[q][QUESTION_PREFIX.len()..].to_string(),
        steps,
    })
}
