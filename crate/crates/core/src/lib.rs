// SPDX-License-Identifier: MIT OR Apache-2.0

//! Step-level chain-of-thought faithfulness diagnostics.
//!
//! The crate generates step-structured reasoning data, builds single-step
//! counterfactual variants, exchanges model observables through a
//! model-agnostic trace format, and computes behavioral (NLDD),
//! representational (windowed RSA) and geometric (TAS) diagnostics, the
//! reasoning horizon, and layer-wise linear probes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arith;
pub mod chain;
pub mod config;
pub mod counterfactual;
pub mod error;
pub mod horizon;
pub mod jsonl;
pub mod metrics;
pub mod mock;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod rng;
pub mod stats;
pub mod stepform;
pub mod taskgen;
pub mod trace;

pub use chain::{
    Annotation, AnswerSpec, CounterfactualVariant, Operation, ReasoningChain, Step, TaskKind, TokenClass, VariantKind,
};
pub use error::{Error, Result};
