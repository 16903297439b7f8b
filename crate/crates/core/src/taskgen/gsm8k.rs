// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GenConfig;
use crate::arith::{find_statement, format_number, BinOp};
use crate::chain::{Annotation, AnswerSpec, ReasoningChain, Step, TaskKind, TokenClass};
use crate::error::{Error, Result};

/// One line of a GSM8K-style input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsmRecord {
    pub question: String,
    #[serde(alias = "answer")]
    pub solution: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsmLoadReport {
    pub loaded: usize,
    /// `(line number, reason)` for each dropped record.
    pub dropped: Vec<(usize, String)>,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_calculator(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    while let Some(start) = rest.find("<<") {
        out.push_str(&rest[..start]);
        match rest[start..].find(">>") {
            Some(end) => rest = &rest[start + end + 2..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    collapse_ws(&out)
}

fn split_question(text: &str) -> (String, String) {
    let text = collapse_ws(text);
    let body = text.trim_end_matches(['?', '.', ' ']);
    match body.rfind(". ") {
        Some(i) => (text[..=i].trim().to_string(), text[i + 2..].trim().to_string()),
        None => (text.clone(), text),
    }
}

/// Segment one record into a chain; `Err(reason)` explains a drop.
pub fn parse_gsm8k_record(id: String, rec: &GsmRecord) -> std::result::Result<ReasoningChain, String> {
    let mut final_answer: Option<String> = None;
    let mut steps = Vec::new();
    for raw in rec.solution.lines() {
        let line = strip_calculator(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(ans) = line.strip_prefix("####") {
            final_answer = Some(ans.trim().replace(',', "").trim_start_matches('$').to_string());
            continue;
        }
        let stmt = find_statement(&line).ok_or_else(|| format!("step {}: no `expression = value`", steps.len() + 1))?;
        let eval = stmt
            .evaluate()
            .ok_or_else(|| format!("step {}: unparseable expression `{}`", steps.len() + 1, stmt.expr))?;
        if !stmt.is_consistent() {
            return Err(format!(
                "step {}: `{}` evaluates to {}, stated {}",
                steps.len() + 1,
                stmt.expr,
                eval.value,
                stmt.value_text
            ));
        }
        let op = match eval.root {
            Some(BinOp::Div) => return Err(format!("step {}: division is not a probe class", steps.len() + 1)),
            Some(op) => op.operation().unwrap(),
            None => return Err(format!("step {}: expression has no operator", steps.len() + 1)),
        };
        steps.push((line, stmt.value, op));
    }
    let (_, last_value, _) = steps.last().ok_or("no reasoning steps")?.clone();
    let answer = match final_answer {
        Some(a) => {
            let v: f64 = a.parse().map_err(|_| format!("final answer `{a}` is not numeric"))?;
            if (v - last_value).abs() > 1e-6 {
                return Err(format!("final answer {a} does not match last step value {last_value}"));
            }
            format_number(v)
        }
        None => format_number(last_value),
    };
    let (input_text, question) = split_question(&rec.question);
    Ok(ReasoningChain {
        id,
        task: TaskKind::Gsm8k,
        input_text,
        question,
        steps: steps
            .into_iter()
            .enumerate()
            .map(|(i, (text, _, op))| Step {
                index: i + 1,
                text,
                annotation: Annotation::Op(op),
            })
            .collect(),
        answer: AnswerSpec {
            text: answer,
            token_class: TokenClass::MultiToken,
        },
    })
}

/// Load at most `cfg.n_samples` verified chains from a JSON Lines file.
pub fn load_gsm8k(path: &Path, cfg: &GenConfig) -> Result<(Vec<ReasoningChain>, GsmLoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report = GsmLoadReport::default();
    let mut chains = Vec::new();
    let mut parsed_any = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || chains.len() >= cfg.n_samples {
            continue;
        }
        let rec: GsmRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.dropped.push((i + 1, format!("invalid record: {e}")));
                continue;
            }
        };
        parsed_any = true;
        match parse_gsm8k_record(format!("gsm8k_{:05}", i + 1), &rec) {
            Ok(c) => chains.push(c),
            Err(reason) => report.dropped.push((i + 1, reason)),
        }
    }
    if !parsed_any {
        return Err(Error::NotEnoughData(format!(
            "{}: zero parseable records",
            path.display()
        )));
    }
    report.loaded = chains.len();
    Ok((chains, report))
}
