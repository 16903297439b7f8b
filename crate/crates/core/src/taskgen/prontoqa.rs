// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::GenConfig;
use crate::chain::{Annotation, AnswerSpec, ReasoningChain, Step, TaskKind, TokenClass};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Category vocabulary; pronounceable nonwords with no real-world meaning.
pub const NONCE_WORDS: [&str; 24] = [
    "wumpus", "zumpus", "impus", "rompus", "gorpus", "yumpus", "dumpus", "numpus", "tumpus", "vumpus", "jompus",
    "lempus", "sterpus", "grimpus", "lorpus", "brimpus", "shumpus", "felpus", "kurpus", "rempus", "zhorpus", "quimpus",
    "borpus", "twimpus",
];

const NAMES: [&str; 10] = [
    "Sam", "Alex", "Max", "Polly", "Rex", "Wren", "Fae", "Stella", "Sally", "Tom",
];

pub fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub(crate) fn hop_text(name: &str, from: &str, to: &str) -> String {
    format!(
        "Since {name} is {} {from} and all {from} are {to}, {name} is {} {to}.",
        article(from),
        article(to)
    )
}

pub(crate) fn conclusion_text(name: &str, terminal: &str, asked: &str, label: bool) -> String {
    if label {
        format!("Conclusion: {name} is {} {terminal}.", article(terminal))
    } else {
        format!(
            "Conclusion: {name} is {} {terminal}, not {} {asked}.",
            article(terminal),
            article(asked)
        )
    }
}

/// Linear rule chains over nonce categories, one modus-ponens step per hop
/// plus a closing conclusion step.
pub fn gen_prontoqa(cfg: &GenConfig) -> Result<Vec<ReasoningChain>> {
    cfg.validate()?;
    if cfg.task != TaskKind::ProntoQA {
        return Err(Error::Config(format!("gen_prontoqa called with task {}", cfg.task)));
    }
    let hops = cfg.chain_length - 1;
    // hop categories + terminal + distractor + distractor consequent
    if hops + 3 > NONCE_WORDS.len() {
        return Err(Error::Config(format!(
            "{hops} hops need {} categories, vocabulary has {}",
            hops + 3,
            NONCE_WORDS.len()
        )));
    }
    Ok((0..cfg.n_samples)
        .into_par_iter()
        .map(|i| one_chain(cfg, hops, i))
        .collect())
}

fn one_chain(cfg: &GenConfig, hops: usize, index: usize) -> ReasoningChain {
    let mut rng = keyed_rng(cfg.seed, &["prontoqa".into(), index.into()]);
    let name = NAMES[rng.random_range(0..NAMES.len())];
    let mut words: Vec<&str> = NONCE_WORDS.to_vec();
    words.shuffle(&mut rng);
    let chain = &words[..=hops];
    let distractor = words[hops + 1];
    let distractor_next = words[hops + 2];

    let mut rules: Vec<String> = chain
        .windows(2)
        .map(|w| format!("All {} are {}.", w[0], w[1]))
        .collect();
    let at = rng.random_range(0..=rules.len());
    rules.insert(at, format!("All {distractor} are {distractor_next}."));

    let label = rng.random_bool(0.5);
    let terminal = chain[hops];
    let asked = if label { terminal } else { distractor };

    let mut steps: Vec<Step> = chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| Step {
            index: i + 1,
            text: hop_text(name, w[0], w[1]),
            annotation: Annotation::Truth(label),
        })
        .collect();
    steps.push(Step {
        index: hops + 1,
        text: conclusion_text(name, terminal, asked, label),
        annotation: Annotation::Truth(label),
    });

    ReasoningChain {
        id: format!("prontoqa_{index:04}"),
        task: TaskKind::ProntoQA,
        input_text: format!(
            "Facts: {name} is {} {}. Rules: {}",
            article(chain[0]),
            chain[0],
            rules.join(" ")
        ),
        question: format!("Is {name} {} {asked}?", article(asked)),
        steps,
        answer: AnswerSpec {
            text: if label { "True" } else { "False" }.into(),
            token_class: TokenClass::SingleToken,
        },
    }
}
