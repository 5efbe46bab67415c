//! Trainable linear softmax reasoner over hashed n-gram features.
//!
//! A choice's plausibility is `⟨weights, features(choice)⟩`; beliefs are the
//! softmax over choices. Training minimizes mean cross-entropy against the gold
//! choice (plus an optional L2 term) with plain gradient descent, which keeps
//! the objective convex and training fully deterministic.

mod features;
mod persist;

pub use features::{dot, featurize, tokenize, SparseVec};

use crate::data::Instance;
use crate::scoring::{log_softmax, softmax, ChoiceScores};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub const DEFAULT_DIM: usize = 1 << 18;

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("state has {weights} weights but declares dim {dim}")]
    DimensionMismatch { dim: usize, weights: usize },
    #[error("dim {0} is not a power of two")]
    InvalidDim(usize),
    #[error("loss became {loss} at epoch {epoch}, step {step} (last finite epoch loss: {last_finite:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        last_finite: Option<f64>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    CorruptState { path: PathBuf, message: String },
    #[error("{path}: state schema version {found}, expected {expected}")]
    SchemaVersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Which belief a reasoner state stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonerRole {
    Prior,
    PosteriorStage1,
    PosteriorStage2,
}

impl ReasonerRole {
    fn code(self) -> u32 {
        match self {
            ReasonerRole::Prior => 0,
            ReasonerRole::PosteriorStage1 => 1,
            ReasonerRole::PosteriorStage2 => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ReasonerRole::Prior),
            1 => Some(ReasonerRole::PosteriorStage1),
            2 => Some(ReasonerRole::PosteriorStage2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// Role of the state being trained when this epoch ran.
    pub role: ReasonerRole,
    /// 1-based within its training run.
    pub epoch: usize,
    /// Mean objective over the epoch's batches, each taken before its step.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerState {
    pub weights: Vec<f64>,
    pub dim: usize,
    pub hash_seed: u64,
    pub role: ReasonerRole,
    pub train_log: Vec<EpochLoss>,
}

impl ReasonerState {
    pub fn zero(role: ReasonerRole) -> Self {
        Self::zero_with(DEFAULT_DIM, 0, role)
    }

    pub fn zero_with(dim: usize, hash_seed: u64, role: ReasonerRole) -> Self {
        ReasonerState {
            weights: vec![0.0; dim],
            dim,
            hash_seed,
            role,
            train_log: Vec::new(),
        }
    }

    pub fn with_role(mut self, role: ReasonerRole) -> Self {
        self.role = role;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    pub fn check(&self) -> Result<(), ReasonerError> {
        if !self.dim.is_power_of_two() {
            return Err(ReasonerError::InvalidDim(self.dim));
        }
        if self.weights.len() != self.dim {
            return Err(ReasonerError::DimensionMismatch {
                dim: self.dim,
                weights: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn features(&self, instance: &Instance) -> Vec<SparseVec> {
        (0..instance.k())
            .map(|i| featurize(instance, i, self.hash_seed, self.dim))
            .collect()
    }
}

/// Plausibility score of every choice.
pub fn score_choices(
    state: &ReasonerState,
    instance: &Instance,
) -> Result<ChoiceScores, ReasonerError> {
    state.check()?;
    let scores = state
        .features(instance)
        .iter()
        .map(|x| dot(&state.weights, x))
        .collect();
    Ok(ChoiceScores {
        instance_id: instance.id.clone(),
        scores,
    })
}

/// Precomputed features of one instance.
#[derive(Debug, Clone)]
struct Example {
    choices: Vec<SparseVec>,
    gold: usize,
}

impl Example {
    fn new(state: &ReasonerState, instance: &Instance) -> Self {
        Example {
            choices: state.features(instance),
            gold: instance.gold_index,
        }
    }
}

/// Dense gradient buffer that remembers which coordinates it touched.
struct GradBuf {
    values: Vec<f64>,
    touched: Vec<u32>,
    marked: Vec<bool>,
}

impl GradBuf {
    fn new(dim: usize) -> Self {
        GradBuf {
            values: vec![0.0; dim],
            touched: Vec::new(),
            marked: vec![false; dim],
        }
    }

    fn add(&mut self, i: u32, v: f64) {
        let iu = i as usize;
        if !self.marked[iu] {
            self.marked[iu] = true;
            self.touched.push(i);
        }
        self.values[iu] += v;
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i as usize] = 0.0;
            self.marked[i as usize] = false;
        }
        self.touched.clear();
    }
}

/// Adds the summed cross-entropy gradient of `batch` into `grad`, scaled by
/// `scale`, and returns the summed cross-entropy. Summation order is the batch
/// order, then choice order, then feature order.
fn accumulate<'a>(
    weights: &[f64],
    batch: impl Iterator<Item = &'a Example>,
    scale: f64,
    grad: &mut GradBuf,
) -> f64 {
    let mut total = 0.0;
    for ex in batch {
        let scores: Vec<f64> = ex.choices.iter().map(|x| dot(weights, x)).collect();
        let log_p = log_softmax(&scores);
        total -= log_p[ex.gold];
        let p = softmax(&scores);
        for (i, x) in ex.choices.iter().enumerate() {
            let coeff = p[i] - if i == ex.gold { 1.0 } else { 0.0 };
            if coeff == 0.0 {
                continue;
            }
            for &(j, v) in x {
                grad.add(j, scale * coeff * v);
            }
        }
    }
    total
}

fn l2_penalty(weights: &[f64], l2: f64) -> f64 {
    if l2 == 0.0 {
        0.0
    } else {
        0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Mean cross-entropy of `batch` plus `l2/2 · ‖w‖²`, and its exact gradient.
pub fn loss_and_gradient(
    state: &ReasonerState,
    batch: &[Instance],
    l2: f64,
) -> Result<(f64, Vec<f64>), ReasonerError> {
    state.check()?;
    if batch.is_empty() {
        return Err(ReasonerError::EmptyBatch);
    }
    let examples: Vec<Example> = batch.iter().map(|i| Example::new(state, i)).collect();
    let n = examples.len() as f64;
    let mut grad = GradBuf::new(state.dim);
    let ce = accumulate(&state.weights, examples.iter(), 1.0 / n, &mut grad);
    let mut g = grad.values;
    if l2 != 0.0 {
        for (gj, wj) in g.iter_mut().zip(&state.weights) {
            *gj += l2 * wj;
        }
    }
    Ok((ce / n + l2_penalty(&state.weights, l2), g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Size(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(BatchSize::Size(n)),
            _ => Err(format!("expected `full` or a positive integer, got {s:?}")),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(usize),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) if n > 0 => Ok(BatchSize::Size(n)),
            Repr::N(_) => Err(serde::de::Error::custom("batch size must be positive")),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    pub l2: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.1,
            batch_size: BatchSize::Size(32),
            l2: 0.0,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ReasonerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ReasonerError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ReasonerError::InvalidConfig(format!(
                "l2 {} must be non-negative",
                self.l2
            )));
        }
        Ok(())
    }
}

/// Gradient descent from `init` on `data`.
///
/// Returns a new state tagged `role`; the log gains one entry per epoch.
/// Deterministic given its inputs. Calls `on_epoch` with the state after
/// every epoch.
pub fn train_with(
    init: &ReasonerState,
    data: &[Instance],
    config: &TrainConfig,
    role: ReasonerRole,
    mut on_epoch: impl FnMut(usize, &ReasonerState),
) -> Result<ReasonerState, ReasonerError> {
    init.check()?;
    config.validate()?;
    let mut state = init.clone().with_role(role);
    if config.epochs == 0 || data.is_empty() {
        return Ok(state);
    }
    let examples: Vec<Example> = data.iter().map(|i| Example::new(&state, i)).collect();
    let batch = match config.batch_size {
        BatchSize::Full => examples.len(),
        BatchSize::Size(b) => b.min(examples.len()),
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = GradBuf::new(state.dim);
    let lr = config.learning_rate;
    let mut last_finite = None;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let n = chunk.len() as f64;
            let ce = accumulate(
                &state.weights,
                chunk.iter().map(|&i| &examples[i]),
                1.0 / n,
                &mut grad,
            );
            let loss = ce / n + l2_penalty(&state.weights, config.l2);
            if !loss.is_finite() {
                return Err(ReasonerError::NonFiniteLoss {
                    epoch,
                    step,
                    loss,
                    last_finite,
                });
            }
            epoch_loss += loss * n;
            if config.l2 != 0.0 {
                let decay = 1.0 - lr * config.l2;
                for w in state.weights.iter_mut() {
                    *w *= decay;
                }
            }
            for &j in &grad.touched {
                state.weights[j as usize] -= lr * grad.values[j as usize];
            }
            grad.clear();
        }
        let mean = epoch_loss / examples.len() as f64;
        if !state.weights.iter().all(|w| w.is_finite()) {
            return Err(ReasonerError::NonFiniteLoss {
                epoch,
                step: order.len().div_ceil(batch),
                loss: f64::NAN,
                last_finite: Some(mean),
            });
        }
        last_finite = Some(mean);
        state.train_log.push(EpochLoss {
            role,
            epoch,
            loss: mean,
        });
        on_epoch(epoch, &state);
    }
    Ok(state)
}

pub fn train(
    init: &ReasonerState,
    data: &[Instance],
    config: &TrainConfig,
    role: ReasonerRole,
) -> Result<ReasonerState, ReasonerError> {
    train_with(init, data, config, role, |_, _| {})
}

/// Raised when the prior carries no information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegeneratePrior;

impl fmt::Display for DegeneratePrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(
            "prior is the zero state (uniform beliefs): rationale entropy reduces to ln K \
             for every instance and the ambiguity ordering collapses to posterior mass only",
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub state: ReasonerState,
    pub warning: Option<DegeneratePrior>,
}

/// Trains the prior on an auxiliary corpus that must be disjoint from the task
/// training split. An empty corpus yields the zero state and a warning.
pub fn pretrain_prior(
    corpus: &[Instance],
    config: &TrainConfig,
    dim: usize,
    hash_seed: u64,
) -> Result<Pretrained, ReasonerError> {
    let zero = ReasonerState::zero_with(dim, hash_seed, ReasonerRole::Prior);
    if corpus.is_empty() || config.epochs == 0 {
        log::warn!("{DegeneratePrior}");
        return Ok(Pretrained {
            state: zero,
            warning: Some(DegeneratePrior),
        });
    }
    let state = train(&zero, corpus, config, ReasonerRole::Prior)?;
    Ok(Pretrained {
        state,
        warning: None,
    })
}
