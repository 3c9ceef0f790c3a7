//! Ontology-aware pretraining data for task-oriented dialogue, plus the
//! evaluator for fine-tuned models.

pub mod cli;
pub mod corpus;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod filter;
pub mod jsonl;
pub mod phase1;
pub mod phase2;
pub mod pipeline;
pub mod sample;
pub mod seed;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
