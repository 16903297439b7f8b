// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use rayon::prelude::*;

use super::GenConfig;
use crate::chain::{Annotation, AnswerSpec, ReasoningChain, Step, TaskKind, TokenClass, MAX_DYCK_DEPTH};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const OPENERS: [char; 4] = ['(', '[', '{', '<'];
pub const CLOSERS: [char; 4] = [')', ']', '}', '>'];

pub fn is_opener(c: char) -> bool {
    OPENERS.contains(&c)
}

pub fn is_closer(c: char) -> bool {
    CLOSERS.contains(&c)
}

pub fn closer_for(open: char) -> Option<char> {
    OPENERS.iter().position(|&o| o == open).map(|i| CLOSERS[i])
}

pub fn opener_for(close: char) -> Option<char> {
    CLOSERS.iter().position(|&c| c == close).map(|i| OPENERS[i])
}

pub(crate) fn dyck_step_text(token: char, depth: u8) -> String {
    format!("Seen '{token}', stack depth is {depth}.")
}

/// Balanced-prefix bracket chains; one step per token.
pub fn gen_dyck(cfg: &GenConfig) -> Result<Vec<ReasoningChain>> {
    cfg.validate()?;
    if cfg.task != TaskKind::Dyck {
        return Err(Error::Config(format!("gen_dyck called with task {}", cfg.task)));
    }
    Ok((0..cfg.n_samples).into_par_iter().map(|i| one_chain(cfg, i)).collect())
}

fn one_chain(cfg: &GenConfig, index: usize) -> ReasoningChain {
    let mut rng = keyed_rng(cfg.seed, &["dyck".into(), index.into()]);
    let len = cfg.chain_length;
    let mut stack: Vec<char> = Vec::new();
    let mut tokens = Vec::with_capacity(len);
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let depth = stack.len() as u8;
        let last = t + 1 == len;
        let must_open = depth == 0 || (last && depth == 1);
        let must_close = depth == MAX_DYCK_DEPTH;
        let open = if must_open {
            true
        } else if must_close {
            false
        } else {
            rng.random_bool(0.6)
        };
        let token = if open {
            let c = OPENERS[rng.random_range(0..cfg.dyck_bracket_types)];
            stack.push(c);
            c
        } else {
            let top = stack.pop().expect("closing at positive depth");
            closer_for(top).expect("stack holds openers")
        };
        tokens.push(token);
        steps.push(Step {
            index: t + 1,
            text: dyck_step_text(token, stack.len() as u8),
            annotation: Annotation::Depth(stack.len() as u8),
        });
    }
    let top = *stack.last().expect("final depth is positive");
    let input: Vec<String> = tokens.iter().map(|c| c.to_string()).collect();
    ReasoningChain {
        id: format!("dyck_{index:04}"),
        task: TaskKind::Dyck,
        input_text: format!("Input: {}", input.join(" ")),
        question: "What is the next closing bracket?".into(),
        steps,
        answer: AnswerSpec {
            text: closer_for(top).unwrap().to_string(),
            token_class: TokenClass::SingleToken,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::validate_chain;

    fn cfg(n: usize, len: usize, types: usize) -> GenConfig {
        GenConfig {
            n_samples: n,
            chain_length: len,
            dyck_bracket_types: types,
            ..GenConfig::new(TaskKind::Dyck)
        }
    }

    #[test]
    fn single_bracket_type_prefix() {
        // Two tokens over one type: the second must open or the depth would hit 0.
        for c in gen_dyck(&cfg(20, 3, 1)).unwrap() {
            assert_eq!(c.answer.text, ")");
            assert!(validate_chain(&c).is_empty());
        }
    }

    #[test]
    fn deterministic_and_within_caps() {
        let a = gen_dyck(&cfg(200, 30, 4)).unwrap();
        assert_eq!(a, gen_dyck(&cfg(200, 30, 4)).unwrap());
        for c in &a {
            assert!(validate_chain(c).is_empty(), "{:?}", validate_chain(c));
            assert!(c
                .steps
                .iter()
                .all(|s| matches!(s.annotation, Annotation::Depth(d) if d <= 10)));
            assert!(matches!(c.steps.last().unwrap().annotation, Annotation::Depth(d) if d > 0));
        }
    }
}
