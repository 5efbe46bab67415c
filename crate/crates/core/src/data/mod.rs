//! Dataset and report schemas.
//!
//! Everything the pipeline reads or writes lives here: validated
//! multiple-choice instances, belief distributions, entropy records, routing
//! decisions and evaluation reports, plus the JSON/JSONL persistence for them.

mod load;
pub mod report;
pub mod synth;

pub use load::{load_dataset, parse_dataset, save_dataset};
pub use report::{
    load_artifacts, load_partition, load_routing, read_json, save_artifacts, save_partition,
    save_routing, write_json, PipelineArtifacts,
};
pub use synth::{generate_synthetic, SynthConfig, SynthFlags, Synthetic};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

/// Version tag written into every report file.
pub const SCHEMA_VERSION: u32 = 1;

/// Smallest probability any stored distribution may hold.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ probs = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

pub const MIN_CHOICES: usize = 2;
pub const MAX_CHOICES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {count} choices, expected between 2 and 8")]
    ChoiceCountOutOfRange { line: usize, count: usize },
    #[error("line {line}: {choices} choices but {rationales} rationales")]
    RationaleCountMismatch {
        line: usize,
        choices: usize,
        rationales: usize,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: gold_index {index} outside [0, {k})")]
    GoldIndexOutOfRange { line: usize, index: i64, k: usize },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("{0}: dataset is empty")]
    EmptyDataset(String),
    #[error("invalid corruption rate {0}, expected a value in [0, 1]")]
    InvalidRate(f64),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("invalid distribution for {instance_id:?}: {reason}")]
    InvalidDistribution { instance_id: String, reason: String },
    #[error("{path}: schema version {found}, expected {expected}")]
    SchemaVersionMismatch {
        path: PathBuf,
        found: u64,
        expected: u32,
    },
    #[error("{path}: {message}")]
    MalformedReport { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One multiple-choice question with a rationale attached to every choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub rationales: Vec<String>,
    pub gold_index: usize,
}

impl Instance {
    pub fn k(&self) -> usize {
        self.choices.len()
    }

    /// Returns a copy whose rationales are rewritten according to `view`.
    pub fn with_rationale_view(&self, view: RationaleView) -> Instance {
        let rationales = match view {
            RationaleView::PerChoice => return self.clone(),
            RationaleView::Blank => vec![String::new(); self.k()],
            RationaleView::Concatenated => vec![self.rationales.join(" "); self.k()],
        };
        Instance {
            rationales,
            ..self.clone()
        }
    }
}

/// Which rationale text a choice is conditioned on when scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RationaleView {
    /// Choice `i` sees only its own rationale.
    #[default]
    PerChoice,
    /// Every choice sees all rationales joined together.
    Concatenated,
    /// Rationales replaced by empty text (the no-rationales baseline).
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn with_rationale_view(&self, view: RationaleView) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            instances: self
                .instances
                .iter()
                .map(|inst| inst.with_rationale_view(view))
                .collect(),
        }
    }

    /// Keeps the instances whose id satisfies `keep`, in their original order.
    pub fn filter_ids(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            instances: self
                .instances
                .iter()
                .filter(|inst| keep(&inst.id))
                .cloned()
                .collect(),
        }
    }
}

/// Whose belief a distribution represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefRole {
    Prior,
    Posterior,
}

impl fmt::Display for BeliefRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BeliefRole::Prior => "prior",
            BeliefRole::Posterior => "posterior",
        })
    }
}

/// Normalized per-choice probabilities for one instance.
///
/// Every component is at least [`PROB_FLOOR`] (up to renormalization), so
/// logarithms of stored probabilities are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefDistribution {
    pub instance_id: String,
    pub role: BeliefRole,
    pub probs: Vec<f64>,
}

impl BeliefDistribution {
    /// Validates `probs` and applies the probability floor.
    ///
    /// Inputs that need no clamping are stored verbatim.
    pub fn new(
        instance_id: impl Into<String>,
        role: BeliefRole,
        probs: Vec<f64>,
    ) -> Result<Self, DataError> {
        let instance_id = instance_id.into();
        let invalid = |reason: String| DataError::InvalidDistribution {
            instance_id: instance_id.clone(),
            reason,
        };
        if probs.len() < MIN_CHOICES || probs.len() > MAX_CHOICES {
            return Err(invalid(format!("{} components", probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(invalid(format!("component {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("components sum to {sum}")));
        }
        let probs = apply_floor(probs);
        Ok(BeliefDistribution {
            instance_id,
            role,
            probs,
        })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

/// Clamps every component to at least [`PROB_FLOOR`], renormalizing only if
/// something was clamped.
pub fn apply_floor(mut probs: Vec<f64>) -> Vec<f64> {
    if probs.iter().all(|p| *p >= PROB_FLOOR) {
        return probs;
    }
    for p in probs.iter_mut() {
        *p = p.max(PROB_FLOOR);
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityLabel {
    Ambiguous,
    Unambiguous,
}

/// Rationale entropy of one instance and its label relative to the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub instance_id: String,
    pub entropy: f64,
    pub label: AmbiguityLabel,
}

/// Entropy records for a set of instances plus the threshold that labels them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub tau: f64,
    pub n_ambiguous: usize,
    pub n_unambiguous: usize,
    pub records: Vec<EntropyRecord>,
}

impl PartitionReport {
    pub fn ambiguous_ids(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .filter(|r| r.label == AmbiguityLabel::Ambiguous)
            .map(|r| r.instance_id.as_str())
    }
}

/// Which trained system produced a final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    System1,
    System2,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub instance_id: String,
    /// `None` when the run computed no entropies (baseline modes).
    pub entropy: Option<f64>,
    pub label: Option<AmbiguityLabel>,
    pub system_used: System,
    pub final_distribution: Vec<f64>,
    pub predicted_index: usize,
    pub gold_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub id: String,
    pub predicted_index: usize,
    pub gold_index: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_run_id: String,
    /// Accuracy difference in points (run minus baseline, times 100).
    pub delta_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub dataset_name: String,
    pub split: Split,
    /// `id`, or `ood:<source>→<target>` for transfer runs.
    pub protocol: String,
    pub n: usize,
    pub accuracy: f64,
    pub per_instance: Vec<InstanceOutcome>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}
