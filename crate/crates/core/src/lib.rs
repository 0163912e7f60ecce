//! Toolkit for detecting, measuring, and reproducing editing-induced collapse
//! in autoregressive language models.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`corpus`] builds tiered perplexity-measurement corpora from raw text
//!   sources with deterministic sampling and filtering.
//! - [`gateway`] is the uniform model interface: token scoring, greedy
//!   generation, and controlled weight mutation/snapshot. Two backends ship
//!   in-tree: an explicit probability-table model ([`gateway::toy`]) for
//!   oracle tests and a small trainable transformer ([`tinylm`]) for
//!   desk-scale experiments.
//! - [`ppl`] computes sentence/corpus perplexity and classifies collapse
//!   against a threshold; [`metrics`] holds the comparator metrics
//!   (locality, n-gram entropy, TF-IDF reference score).
//! - [`editors`] houses the edit-request data model, the edit-success check,
//!   a norm-constrained fine-tuning editor, a minimal rank-one associative
//!   editor, and an adapter for external editing systems.
//! - [`harness`] orchestrates single-edit sweeps with hard-case mining,
//!   sequential-editing traces, and weight-diff analysis.
//! - [`surrogate`] builds perplexity ladders, evaluates task adapters, and
//!   computes the perplexity/performance rank correlation.
//! - [`hardgen`] generates candidate hard edit cases via a chat-completion
//!   LLM, deduplicates, and validates them by single-edit perplexity
//!   filtering.
//! - [`run`] and [`plots`] provide run-config management, report
//!   persistence, and plot emission for the CLI.

pub mod corpus;
pub mod dataset;
pub mod editors;
pub mod gateway;
pub mod hardgen;
pub mod harness;
pub mod metrics;
pub mod plots;
pub mod ppl;
pub mod run;
pub mod surrogate;
pub mod synthtext;
pub mod tinylm;

/// Default perplexity threshold separating stable from collapsed models.
pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 1000.0;
