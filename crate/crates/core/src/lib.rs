//! Ambiguity-aware two-stage reasoning over rationales for multiple-choice
//! question answering.
//!
//! The crate is organized along the pipeline:
//!
//! * [`data`]: dataset and report schemas, validation, synthetic benchmarks;
//! * [`scoring`]: plausibility scores, softmax beliefs, and the file / HTTP /
//!   builtin backends that produce them;
//! * [`reasoner`]: the trainable hashed n-gram softmax reasoner;
//! * [`ambiguity`]: rationale entropy, the threshold and the partition;
//! * [`pipeline`]: two-stage training and routed inference;
//! * [`evaluation`]: accuracy and the experiment protocols;
//! * [`cli`]: the `aura` command-line tool.

pub mod ambiguity;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod pipeline;
pub mod reasoner;
pub mod scoring;

pub use pipeline::{Combiner, Mode, PipelineConfig, PipelineError, RunOutcome};
