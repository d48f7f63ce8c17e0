//! Building blocks for natural-language smart devices backed by small
//! language models and grounded by a formal device state model.
pub mod distillation;
pub mod jsonl;
pub mod metrics;
pub mod novelty;
pub mod prompts;
pub mod runtime;
pub mod snapshot_gen;
pub mod state_model;
pub mod synthesis;
pub mod text;
pub mod wire;
