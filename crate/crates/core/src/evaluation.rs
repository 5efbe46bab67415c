//! Accuracy and experiment protocols: in-distribution runs, source→target
//! transfer, training-ratio sweeps and per-epoch train/validation curves.

use crate::data::{Comparison, Dataset, EvalReport, Instance, InstanceOutcome, RoutingDecision};
use crate::pipeline::{self, reasoner_beliefs, Mode, PipelineConfig, PipelineError, RunOutcome};
use crate::data::BeliefRole;
use crate::reasoner::{self, ReasonerRole, ReasonerState};
use crate::scoring::{predict, Backend};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("nothing to evaluate")]
    EmptyList,
    #[error("training ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("ratios must be sorted ascending")]
    UnsortedRatios,
    #[error("epoch curve needs at least one epoch")]
    NoEpochs,
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn report_from_routing(
    run_id: &str,
    dataset: &Dataset,
    protocol: &str,
    routing: &[RoutingDecision],
) -> Result<EvalReport, EvalError> {
    let per_instance: Vec<InstanceOutcome> = routing
        .iter()
        .map(|r| InstanceOutcome {
            id: r.instance_id.clone(),
            predicted_index: r.predicted_index,
            gold_index: r.gold_index,
            correct: r.predicted_index == r.gold_index,
        })
        .collect();
    let preds: Vec<usize> = routing.iter().map(|r| r.predicted_index).collect();
    let gold: Vec<usize> = routing.iter().map(|r| r.gold_index).collect();
    Ok(EvalReport {
        run_id: run_id.to_string(),
        dataset_name: dataset.name.clone(),
        split: dataset.split,
        protocol: protocol.to_string(),
        n: per_instance.len(),
        accuracy: accuracy(&preds, &gold)?,
        per_instance,
        comparisons: Vec::new(),
    })
}

/// Recomputes accuracy from stored per-instance outcomes.
pub fn reevaluate(report: &EvalReport) -> Result<f64, EvalError> {
    let preds: Vec<usize> = report.per_instance.iter().map(|o| o.predicted_index).collect();
    let gold: Vec<usize> = report.per_instance.iter().map(|o| o.gold_index).collect();
    accuracy(&preds, &gold)
}

/// Accuracy-point difference of `report` over `baseline`.
pub fn compare(report: &EvalReport, baseline: &EvalReport) -> Comparison {
    Comparison {
        baseline_run_id: baseline.run_id.clone(),
        delta_accuracy: 100.0 * (report.accuracy - baseline.accuracy),
    }
}

/// Trains entirely on `source_train` (both stages and the threshold) and
/// evaluates on `target_test`.
pub fn run_ood(
    source_train: &Dataset,
    target_test: &Dataset,
    config: &PipelineConfig,
    prior: &Backend,
) -> Result<RunOutcome, PipelineError> {
    let mut outcome = pipeline::run(source_train, target_test, config, prior)?;
    let tag = format!("{}→{}", source_train.name, target_test.name);
    outcome.report.protocol = format!("ood:{tag}");
    outcome.report.dataset_name = tag;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            ratios: vec![0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: vec![1, 2, 3, 4, 5],
            protocol: Protocol::Id,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(EvalError::RatioOutOfRange(*r));
        }
        if self.ratios.windows(2).any(|w| w[0] > w[1]) {
            return Err(EvalError::UnsortedRatios);
        }
        if self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(EvalError::EmptyList);
        }
        Ok(())
    }
}

/// The first `⌈ratio·N⌉` instances of a `seed`-shuffled ordering, returned in
/// their original order. Smaller ratios give subsets of larger ones.
pub fn ratio_subset(train: &Dataset, ratio: f64, seed: u64) -> Result<Dataset, EvalError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EvalError::RatioOutOfRange(ratio));
    }
    let n = train.len();
    let take = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order[..take].to_vec();
    chosen.sort_unstable();
    Ok(Dataset {
        name: train.name.clone(),
        split: train.split,
        instances: chosen.into_iter().map(|i| train.instances[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ratio: f64,
    pub seed: u64,
    pub mode: Mode,
    pub n_train: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub ratio: f64,
    pub mode: Mode,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_accuracy: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (ratio, seed, mode) cell. Cells run in parallel and come back
/// sorted by ratio, then mode, then seed. `on_cell` sees each finished run.
pub fn ratio_sweep_with(
    train: &Dataset,
    test: &Dataset,
    spec: &SweepSpec,
    config: &PipelineConfig,
    modes: &[Mode],
    prior: &Backend,
    on_cell: impl Fn(&SweepCell, &RunOutcome) -> Result<(), PipelineError> + Sync,
) -> Result<SweepResult, PipelineError> {
    spec.validate()?;
    let mut keys = Vec::new();
    for &ratio in &spec.ratios {
        for &mode in modes {
            for &seed in &spec.seeds {
                keys.push((ratio, mode, seed));
            }
        }
    }
    let protocol = match spec.protocol {
        Protocol::Id => "id".to_string(),
        Protocol::Ood => format!("ood:{}→{}", train.name, test.name),
    };
    let cells: Vec<SweepCell> = keys
        .par_iter()
        .map(|&(ratio, mode, seed)| {
            let subset = ratio_subset(train, ratio, seed)?;
            let cfg = config.clone().with_mode(mode).with_seed(seed);
            let mut outcome = pipeline::run(&subset, test, &cfg, prior)?;
            outcome.report.protocol = protocol.clone();
            outcome.report.run_id = format!("{}-ratio{ratio}", cfg.run_id());
            let cell = SweepCell {
                ratio,
                seed,
                mode,
                n_train: subset.len(),
                report: outcome.report.clone(),
            };
            on_cell(&cell, &outcome)?;
            Ok(cell)
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut summary = Vec::new();
    for &ratio in &spec.ratios {
        for &mode in modes {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.ratio == ratio && c.mode == mode)
                .map(|c| c.report.accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            summary.push(SweepSummary {
                ratio,
                mode,
                mean_accuracy: mean,
                std_accuracy: std,
                n_seeds: accs.len(),
            });
        }
    }
    Ok(SweepResult { cells, summary })
}

pub fn ratio_sweep(
    train: &Dataset,
    test: &Dataset,
    spec: &SweepSpec,
    config: &PipelineConfig,
    modes: &[Mode],
    prior: &Backend,
) -> Result<SweepResult, PipelineError> {
    ratio_sweep_with(train, test, spec, config, modes, prior, |_, _| Ok(()))
}

impl SweepResult {
    /// `ratio,seed,mode,accuracy`
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("ratio,seed,mode,accuracy\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{:.17}", c.ratio, c.seed, c.mode, c.report.accuracy);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("ratio,mode,mean_accuracy,std_accuracy,n_seeds\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{:.17},{:.17},{}",
                s.ratio, s.mode, s.mean_accuracy, s.std_accuracy, s.n_seeds
            );
        }
        out
    }

    pub fn mean_for(&self, mode: Mode) -> Vec<(f64, f64)> {
        self.summary
            .iter()
            .filter(|s| s.mode == mode)
            .map(|s| (s.ratio, s.mean_accuracy))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
}

fn reasoner_accuracy(state: &ReasonerState, instances: &[Instance]) -> Result<f64, PipelineError> {
    let preds: Vec<usize> = instances
        .par_iter()
        .map(|i| Ok(predict(&reasoner_beliefs(state, i, BeliefRole::Posterior)?)))
        .collect::<Result<_, PipelineError>>()?;
    let gold: Vec<usize> = instances.iter().map(|i| i.gold_index).collect();
    Ok(accuracy(&preds, &gold)?)
}

/// Train and validation accuracy after every epoch of single-stage training.
pub fn epoch_curve(
    train: &Dataset,
    validation: &Dataset,
    config: &PipelineConfig,
    epochs: usize,
    prior: &Backend,
) -> Result<Vec<CurveRow>, PipelineError> {
    if epochs == 0 {
        return Err(EvalError::NoEpochs.into());
    }
    let cfg = config.clone().with_mode(match config.mode {
        Mode::NoRationales => Mode::NoRationales,
        _ => Mode::Standard,
    });
    cfg.validate()?;
    let view = match cfg.mode {
        Mode::NoRationales => crate::data::RationaleView::Blank,
        _ => cfg.rationale_view,
    };
    let train = train.with_rationale_view(view);
    let validation = validation.with_rationale_view(view);
    let init = match prior {
        Backend::Builtin(s) => s.clone(),
        _ => ReasonerState::zero_with(cfg.dim, cfg.hash_seed, ReasonerRole::Prior),
    };
    let train_config = reasoner::TrainConfig {
        epochs,
        ..cfg.stage_config(1)
    };
    let mut rows = Vec::with_capacity(epochs);
    let mut failure = None;
    reasoner::train_with(
        &init,
        &train.instances,
        &train_config,
        ReasonerRole::PosteriorStage1,
        |epoch, state| {
            if failure.is_some() {
                return;
            }
            match (
                reasoner_accuracy(state, &train.instances),
                reasoner_accuracy(state, &validation.instances),
            ) {
                (Ok(train_acc), Ok(val_acc)) => rows.push(CurveRow {
                    epoch,
                    train_acc,
                    val_acc,
                }),
                (Err(e), _) | (_, Err(e)) => failure = Some(e),
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(rows)
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,train_acc,val_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.17},{:.17}", r.epoch, r.train_acc, r.val_acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[3, 1], &[3, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0], &[0, 1]), Err(EvalError::LengthMismatch { predictions: 1, gold: 2 }));
        assert_eq!(accuracy(&[], &[]), Err(EvalError::EmptyList));
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn sweep_spec_validation() {
        assert!(SweepSpec::default().validate().is_ok());
        let bad = SweepSpec { ratios: vec![0.0, 1.0], ..SweepSpec::default() };
        assert_eq!(bad.validate(), Err(EvalError::RatioOutOfRange(0.0)));
        let bad = SweepSpec { ratios: vec![0.5, 0.2], ..SweepSpec::default() };
        assert_eq!(bad.validate(), Err(EvalError::UnsortedRatios));
        let bad = SweepSpec { ratios: vec![1.5], ..SweepSpec::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn accuracy_bounded_and_permutation_invariant(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..50),
            seed in 0u64..1000,
        ) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
            let a = accuracy(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            let gg: Vec<usize> = idx.iter().map(|&i| g[i]).collect();
            prop_assert_eq!(accuracy(&pp, &gg).unwrap(), a);
        }
    }
}
