// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic task generation, GSM8K loading and evaluation/probe splits.

mod dyck;
mod gsm8k;
mod prontoqa;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chain::{ReasoningChain, TaskKind};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub use dyck::{closer_for, gen_dyck, is_closer, is_opener, opener_for, CLOSERS, OPENERS};
pub use gsm8k::{load_gsm8k, parse_gsm8k_record, GsmLoadReport, GsmRecord};
pub use prontoqa::{article, gen_prontoqa, NONCE_WORDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: TaskKind,
    pub n_samples: usize,
    pub seed: u64,
    pub chain_length: usize,
    pub dyck_bracket_types: usize,
}

impl GenConfig {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            n_samples: 100,
            seed: 42,
            chain_length: task.default_chain_length(),
            dyck_bracket_types: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if self.chain_length < 2 {
            return Err(Error::Config(format!(
                "chain_length {} is unsatisfiable (need at least 2)",
                self.chain_length
            )));
        }
        if !(1..=4).contains(&self.dyck_bracket_types) {
            return Err(Error::Config("dyck_bracket_types must be in [1,4]".into()));
        }
        Ok(())
    }
}

/// Generate a synthetic dataset for `cfg.task`.
pub fn generate(cfg: &GenConfig) -> Result<Vec<ReasoningChain>> {
    match cfg.task {
        TaskKind::Dyck => gen_dyck(cfg),
        TaskKind::ProntoQA => gen_prontoqa(cfg),
        TaskKind::Gsm8k => Err(Error::Config(
            "gsm8k chains are loaded from a file, not generated".into(),
        )),
    }
}

/// Ids of each half of an evaluation/probe partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub eval_ids: BTreeSet<String>,
    pub probe_ids: BTreeSet<String>,
}

/// Partition chains into disjoint evaluation and probing subsets.
pub fn split_disjoint(
    chains: &[ReasoningChain],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<ReasoningChain>, Vec<ReasoningChain>)> {
    if chains.len() < 2 {
        return Err(Error::NotEnoughData(format!(
            "split needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval_fraction {eval_fraction} must be in (0,1)")));
    }
    let n = chains.len();
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, &["split".into()]));
    let eval: BTreeSet<usize> = order[..n_eval].iter().copied().collect();
    let (mut e, mut p) = (Vec::with_capacity(n_eval), Vec::with_capacity(n - n_eval));
    for (i, c) in chains.iter().enumerate() {
        if eval.contains(&i) {
            e.push(c.clone());
        } else {
            p.push(c.clone());
        }
    }
    Ok((e, p))
}

impl SplitManifest {
    pub fn from_split(eval: &[ReasoningChain], probe: &[ReasoningChain]) -> Self {
        Self {
            eval_ids: eval.iter().map(|c| c.id.clone()).collect(),
            probe_ids: probe.iter().map(|c| c.id.clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chains(n: usize) -> Vec<ReasoningChain> {
        gen_dyck(&GenConfig {
            n_samples: n,
            ..GenConfig::new(TaskKind::Dyck)
        })
        .unwrap()
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let all = chains(100);
        let (e, p) = split_disjoint(&all, 0.5, 7).unwrap();
        assert_eq!((e.len(), p.len()), (50, 50));
        let m = SplitManifest::from_split(&e, &p);
        assert!(m.eval_ids.is_disjoint(&m.probe_ids));
        assert_eq!(m.eval_ids.len() + m.probe_ids.len(), 100);
        let (e2, p2) = split_disjoint(&all, 0.5, 7).unwrap();
        assert_eq!((e, p), (e2, p2));
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_disjoint(&chains(1), 0.5, 1).is_err());
        assert!(split_disjoint(&chains(4), 1.0, 1).is_err());
        assert!(split_disjoint(&chains(4), 0.0, 1).is_err());
    }

    #[test]
    fn config_rejects_short_chains() {
        let cfg = GenConfig {
            chain_length: 0,
            ..GenConfig::new(TaskKind::Dyck)
        };
        assert!(gen_dyck(&cfg).is_err());
        assert!(generate(&GenConfig::new(TaskKind::Gsm8k)).is_err());
    }
}
