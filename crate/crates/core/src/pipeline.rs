//! Two-stage training and ambiguity-routed inference.
//!
//! Stage 1 trains a reasoner on the full training split. Prior beliefs and the
//! Stage-1 posterior give every training instance a rationale entropy; the
//! mean entropy is the threshold. Stage 2 retrains from the same initial state
//! on the ambiguous instances only. At test time each instance is labelled
//! with the training threshold using (prior, Stage-1) beliefs and the two
//! systems are combined per the configured combiner.

use crate::ambiguity::{self, label_for, AmbiguityError, BeliefPair};
use crate::data::report::{write_text, PARTITION_FILE, ROUTING_FILE};
use crate::data::{
    save_artifacts, write_json, AmbiguityLabel, BeliefDistribution, BeliefRole, DataError,
    Dataset, EvalReport, Instance, PartitionReport, PipelineArtifacts, RationaleView,
    RoutingDecision, System,
};
use crate::evaluation;
use crate::reasoner::{
    self, score_choices, DegeneratePrior, ReasonerError, ReasonerRole, ReasonerState,
    TrainConfig, DEFAULT_DIM,
};
use crate::scoring::{
    normalize_distribution, predict, softmax, Backend, BackendKind, BackendSpec, ScoringError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const CONFIG_FILE: &str = "config.json";
pub const PRIOR_STATE_FILE: &str = "prior.state";
pub const REASONER1_STATE_FILE: &str = "reasoner1.state";
pub const REASONER2_STATE_FILE: &str = "reasoner2.state";
pub const HISTOGRAM_FILE: &str = "entropy_histogram.csv";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("{instance_id}: cannot combine distributions over {left} and {right} choices")]
    KMismatch {
        instance_id: String,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Aura,
    Standard,
    NoRationales,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Aura => "aura",
            Mode::Standard => "standard",
            Mode::NoRationales => "no-rationales",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aura" => Ok(Mode::Aura),
            "standard" => Ok(Mode::Standard),
            "no-rationales" => Ok(Mode::NoRationales),
            _ => Err(format!("expected aura, standard or no-rationales, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combiner {
    /// System 1 for unambiguous instances, System 2 for ambiguous ones.
    #[default]
    Route,
    /// Componentwise average of both distributions.
    Mean,
    /// Softmax of averaged log-probabilities.
    LogMean,
}

impl FromStr for Combiner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "route" => Ok(Combiner::Route),
            "mean" => Ok(Combiner::Mean),
            "log-mean" => Ok(Combiner::LogMean),
            _ => Err(format!("expected route, mean or log-mean, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub combiner: Combiner,
    pub prior_backend: BackendSpec,
    /// Seeds both stages; see [`PipelineConfig::stage_config`].
    pub seed: u64,
    pub train_config_stage1: TrainConfig,
    /// Present iff `mode` is `aura`.
    pub train_config_stage2: Option<TrainConfig>,
    pub rationale_view: RationaleView,
    pub dim: usize,
    pub hash_seed: u64,
}

impl PipelineConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        PipelineConfig {
            mode,
            combiner: Combiner::Route,
            prior_backend: BackendSpec::builtin(),
            seed,
            train_config_stage1: TrainConfig::default(),
            train_config_stage2: (mode == Mode::Aura).then(TrainConfig::default),
            rationale_view: RationaleView::PerChoice,
            dim: DEFAULT_DIM,
            hash_seed: 0,
        }
    }

    /// Switches mode, adding or dropping the Stage-2 config to match.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        if mode == Mode::Aura {
            if self.train_config_stage2.is_none() {
                self.train_config_stage2 = Some(self.train_config_stage1.clone());
            }
        } else {
            self.train_config_stage2 = None;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if (self.mode == Mode::Aura) != self.train_config_stage2.is_some() {
            return Err(PipelineError::InvalidConfig(
                "a stage-2 train config is required for aura mode and only for aura mode".into(),
            ));
        }
        if !self.dim.is_power_of_two() {
            return Err(ReasonerError::InvalidDim(self.dim).into());
        }
        self.train_config_stage1.validate()?;
        if let Some(c) = &self.train_config_stage2 {
            c.validate()?;
        }
        Ok(())
    }

    /// Train config for `stage` (1 or 2) with its seed derived from the
    /// pipeline seed: `seed * 2 + stage - 1`.
    pub fn stage_config(&self, stage: u64) -> TrainConfig {
        let base = if stage == 2 {
            self.train_config_stage2
                .as_ref()
                .unwrap_or(&self.train_config_stage1)
        } else {
            &self.train_config_stage1
        };
        TrainConfig {
            seed: self.seed.wrapping_mul(2).wrapping_add(stage - 1),
            ..base.clone()
        }
    }

    fn view(&self) -> RationaleView {
        match self.mode {
            Mode::NoRationales => RationaleView::Blank,
            _ => self.rationale_view,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.mode, self.seed)
    }
}

/// Combines System 1 and System 2 beliefs for one instance.
pub fn combine(
    p1: &BeliefDistribution,
    p2: &BeliefDistribution,
    label: AmbiguityLabel,
    combiner: Combiner,
) -> Result<BeliefDistribution, PipelineError> {
    if p1.k() != p2.k() {
        return Err(PipelineError::KMismatch {
            instance_id: p1.instance_id.clone(),
            left: p1.k(),
            right: p2.k(),
        });
    }
    let probs = match combiner {
        Combiner::Route => {
            return Ok(match label {
                AmbiguityLabel::Unambiguous => p1.clone(),
                AmbiguityLabel::Ambiguous => p2.clone(),
            })
        }
        Combiner::Mean => p1
            .probs
            .iter()
            .zip(&p2.probs)
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
        Combiner::LogMean => {
            let avg: Vec<f64> = p1
                .probs
                .iter()
                .zip(&p2.probs)
                .map(|(a, b)| (a.ln() + b.ln()) / 2.0)
                .collect();
            softmax(&avg)
        }
    };
    Ok(BeliefDistribution::new(
        p1.instance_id.clone(),
        BeliefRole::Posterior,
        crate::data::apply_floor(probs),
    )?)
}

/// Beliefs of a builtin reasoner.
pub fn reasoner_beliefs(
    state: &ReasonerState,
    instance: &Instance,
    role: BeliefRole,
) -> Result<BeliefDistribution, PipelineError> {
    Ok(normalize_distribution(&score_choices(state, instance)?, role)?)
}

fn par_beliefs(
    instances: &[Instance],
    f: impl Fn(&Instance) -> Result<BeliefDistribution, PipelineError> + Sync + Send,
) -> Result<Vec<BeliefDistribution>, PipelineError> {
    instances.par_iter().map(f).collect()
}

/// Per-instance entropy pairs and the resulting partition.
pub fn partition_with(
    prior: &Backend,
    posterior: &ReasonerState,
    instances: &[Instance],
    tau_override: Option<f64>,
) -> Result<PartitionReport, PipelineError> {
    let pairs: Vec<BeliefPair> = instances
        .par_iter()
        .map(|inst| {
            let p = prior.score_instance(inst, BeliefRole::Prior)?;
            let q = reasoner_beliefs(posterior, inst, BeliefRole::Posterior)?;
            Ok(BeliefPair::new(p, q)?)
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(ambiguity::partition(&pairs, tau_override)?)
}

/// A finished run held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: PipelineConfig,
    /// The initial state both stages start from.
    pub init_state: ReasonerState,
    pub reasoner1: ReasonerState,
    pub reasoner2: Option<ReasonerState>,
    /// Training-set partition (aura only).
    pub partition: Option<PartitionReport>,
    pub routing: Vec<RoutingDecision>,
    pub report: EvalReport,
    pub warnings: Vec<String>,
}

impl RunOutcome {
    pub fn accuracy(&self) -> f64 {
        self.report.accuracy
    }

    /// Writes the run directory and returns what was written.
    pub fn persist(&self, dir: &Path) -> Result<PipelineArtifacts, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        let prior_state_path = if self.config.prior_backend.kind == BackendKind::Builtin {
            self.init_state.save(&dir.join(PRIOR_STATE_FILE))?;
            Some(PRIOR_STATE_FILE.to_string())
        } else {
            None
        };
        self.reasoner1.save(&dir.join(REASONER1_STATE_FILE))?;
        let reasoner2_state_path = match &self.reasoner2 {
            Some(r2) => {
                r2.save(&dir.join(REASONER2_STATE_FILE))?;
                Some(REASONER2_STATE_FILE.to_string())
            }
            None => None,
        };
        if let Some(p) = &self.partition {
            let entropies: Vec<f64> = p.records.iter().map(|r| r.entropy).collect();
            let mut csv = String::from("bin_start,count\n");
            for (start, count) in ambiguity::histogram(&entropies, ambiguity::HISTOGRAM_BIN_WIDTH) {
                csv.push_str(&format!("{start:.2},{count}\n"));
            }
            write_text(&dir.join(HISTOGRAM_FILE), &csv)?;
        }
        let artifacts = PipelineArtifacts {
            mode: self.config.mode.to_string(),
            prior_state_path,
            reasoner1_state_path: REASONER1_STATE_FILE.into(),
            reasoner2_state_path,
            tau: self.partition.as_ref().map(|p| p.tau),
            partition: self.partition.clone(),
            routing: self.routing.clone(),
            partition_path: self.partition.as_ref().map(|_| PARTITION_FILE.to_string()),
            routing_path: ROUTING_FILE.into(),
            report: self.report.clone(),
        };
        save_artifacts(dir, &artifacts)?;
        Ok(artifacts)
    }
}

/// Resolves the state both stages start from. A builtin prior is its own
/// initialization; external priors start the reasoners from zero.
fn initial_state(
    config: &PipelineConfig,
    prior: &Backend,
    warnings: &mut Vec<String>,
) -> Result<ReasonerState, PipelineError> {
    match prior {
        Backend::Builtin(state) => {
            state.check()?;
            if state.is_zero() {
                log::warn!("{DegeneratePrior}");
                warnings.push(DegeneratePrior.to_string());
            }
            Ok(state.clone().with_role(ReasonerRole::Prior))
        }
        _ => Ok(ReasonerState::zero_with(
            config.dim,
            config.hash_seed,
            ReasonerRole::Prior,
        )),
    }
}

/// Dispatches on `config.mode`.
pub fn run(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
    prior: &Backend,
) -> Result<RunOutcome, PipelineError> {
    match config.mode {
        Mode::Aura => run_aura(train, test, config, prior),
        Mode::Standard | Mode::NoRationales => run_standard(train, test, config, prior),
    }
}

/// Single-reasoner baseline; rationales are blanked in no-rationales mode.
pub fn run_standard(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
    prior: &Backend,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    if config.mode == Mode::Aura {
        return Err(PipelineError::InvalidConfig(
            "run_standard needs mode standard or no-rationales".into(),
        ));
    }
    let view = config.view();
    let train = train.with_rationale_view(view);
    let test = test.with_rationale_view(view);
    let mut warnings = Vec::new();
    let init = initial_state(config, prior, &mut warnings)?;
    let r1 = reasoner::train(
        &init,
        &train.instances,
        &config.stage_config(1),
        ReasonerRole::PosteriorStage1,
    )?;
    let beliefs = par_beliefs(&test.instances, |i| {
        reasoner_beliefs(&r1, i, BeliefRole::Posterior)
    })?;
    let routing: Vec<RoutingDecision> = test
        .instances
        .iter()
        .zip(beliefs)
        .map(|(inst, b)| RoutingDecision {
            instance_id: inst.id.clone(),
            entropy: None,
            label: None,
            system_used: System::System1,
            predicted_index: predict(&b),
            final_distribution: b.probs,
            gold_index: inst.gold_index,
        })
        .collect();
    let report = evaluation::report_from_routing(&config.run_id(), &test, "id", &routing)?;
    Ok(RunOutcome {
        config: config.clone(),
        init_state: init,
        reasoner1: r1,
        reasoner2: None,
        partition: None,
        routing,
        report,
        warnings,
    })
}

/// The full two-stage pipeline.
pub fn run_aura(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
    prior: &Backend,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    if config.mode != Mode::Aura {
        return Err(PipelineError::InvalidConfig("run_aura needs mode aura".into()));
    }
    let view = config.view();
    let train = train.with_rationale_view(view);
    let test = test.with_rationale_view(view);
    let mut warnings = Vec::new();
    let init = initial_state(config, prior, &mut warnings)?;

    // Stage 1
    let r1 = reasoner::train(
        &init,
        &train.instances,
        &config.stage_config(1),
        ReasonerRole::PosteriorStage1,
    )?;
    let partition = partition_with(prior, &r1, &train.instances, None)?;
    log::info!(
        "tau = {:.6}, {} ambiguous / {} unambiguous",
        partition.tau,
        partition.n_ambiguous,
        partition.n_unambiguous
    );

    // Stage 2, from the same initial state
    let ambiguous: std::collections::HashSet<&str> = partition.ambiguous_ids().collect();
    let subset = train.filter_ids(|id| ambiguous.contains(id));
    let r2 = reasoner::train(
        &init,
        &subset.instances,
        &config.stage_config(2),
        ReasonerRole::PosteriorStage2,
    )?;

    // Inference with the training threshold
    let tau = partition.tau;
    let routing: Vec<RoutingDecision> = test
        .instances
        .par_iter()
        .map(|inst| {
            let prior_b = prior.score_instance(inst, BeliefRole::Prior)?;
            let p1 = reasoner_beliefs(&r1, inst, BeliefRole::Posterior)?;
            let pair = BeliefPair::new(prior_b, p1.clone())?;
            let entropy = ambiguity::rationale_entropy(&pair);
            let label = label_for(entropy, tau);
            let p2 = reasoner_beliefs(&r2, inst, BeliefRole::Posterior)?;
            let fin = combine(&p1, &p2, label, config.combiner)?;
            let system_used = match (config.combiner, label) {
                (Combiner::Route, AmbiguityLabel::Unambiguous) => System::System1,
                (Combiner::Route, AmbiguityLabel::Ambiguous) => System::System2,
                _ => System::Combined,
            };
            Ok(RoutingDecision {
                instance_id: inst.id.clone(),
                entropy: Some(entropy),
                label: Some(label),
                system_used,
                predicted_index: predict(&fin),
                final_distribution: fin.probs,
                gold_index: inst.gold_index,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let report = evaluation::report_from_routing(&config.run_id(), &test, "id", &routing)?;
    Ok(RunOutcome {
        config: config.clone(),
        init_state: init,
        reasoner1: r1,
        reasoner2: Some(r2),
        partition: Some(partition),
        routing,
        report,
        warnings,
    })
}

/// Opens the configured prior backend, or builds the prior by training on
/// `corpus` when the backend is a bare `builtin`.
pub fn resolve_prior(
    config: &PipelineConfig,
    corpus: Option<&Dataset>,
    prior_train: &TrainConfig,
) -> Result<Backend, PipelineError> {
    match (&config.prior_backend.kind, &config.prior_backend.location, corpus) {
        (BackendKind::Builtin, None, Some(corpus)) => {
            let view = config.view();
            let corpus = corpus.with_rationale_view(view);
            let pre = reasoner::pretrain_prior(
                &corpus.instances,
                prior_train,
                config.dim,
                config.hash_seed,
            )?;
            Ok(Backend::Builtin(pre.state))
        }
        (BackendKind::Builtin, None, None) => Ok(Backend::Builtin(ReasonerState::zero_with(
            config.dim,
            config.hash_seed,
            ReasonerRole::Prior,
        ))),
        _ => Ok(config.prior_backend.open()?),
    }
}
