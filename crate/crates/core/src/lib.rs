//! Inference-time scaling by iterative refinement: generate, verify, reflect,
//! correct. Includes preference-data curation, a Bradley–Terry reward model
//! and a benchmark harness, all runnable against deterministic simulated
//! backends or remote model servers.

pub mod backend;
pub mod curation;
pub mod engine;
pub mod evalbench;
pub mod error;
pub mod prompt;
pub mod reward;
pub mod rule;
pub mod scene;
pub mod seed;
pub mod templates;
pub mod vocab;

pub use error::{Error, Result};
