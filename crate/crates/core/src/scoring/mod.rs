//! Plausibility scores and belief distributions.
//!
//! A choice's plausibility is the sum of its answer-token log-probabilities;
//! beliefs are the softmax of plausibilities over the choices of one question.

mod backend;

pub use backend::{
    write_beliefs, Backend, BackendKind, BackendSpec, FileBackend, HttpBackend, ScoreRequest,
    DEFAULT_TIMEOUT_MS, HTTP_RETRIES,
};

use crate::data::{apply_floor, BeliefDistribution, BeliefRole, DataError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Duration;

/// Slack allowed above zero for a token log-probability.
const LOGPROB_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("{instance_id}: choice {choice} has no answer tokens")]
    EmptyTokenList { instance_id: String, choice: usize },
    #[error("{instance_id}: score {value} for choice {choice} is not finite")]
    NonFiniteScore {
        instance_id: String,
        choice: usize,
        value: f64,
    },
    #[error("{instance_id}: token log-probability {value} for choice {choice} is positive")]
    PositiveLogprob {
        instance_id: String,
        choice: usize,
        value: f64,
    },
    #[error("{instance_id}: {found} choices scored, expected {expected}")]
    ChoiceCountMismatch {
        instance_id: String,
        expected: usize,
        found: usize,
    },
    #[error("instance {id:?} ({role}) not found in {path}")]
    MissingInstanceInFile {
        id: String,
        role: BeliefRole,
        path: PathBuf,
    },
    #[error("{url}: no response within {timeout:?} after {attempts} attempts")]
    BackendTimeout {
        url: String,
        timeout: Duration,
        attempts: usize,
    },
    #[error("{url}: unreachable after {attempts} attempts: {message}")]
    BackendUnavailable {
        url: String,
        attempts: usize,
        message: String,
    },
    #[error("{source_name}: malformed backend response: {message}")]
    MalformedBackendResponse {
        source_name: String,
        message: String,
    },
    #[error("invalid backend {0:?}, expected file:PATH, http:URL or builtin[:STATE]")]
    InvalidBackendSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Reasoner(#[from] crate::reasoner::ReasonerError),
}

/// Answer-token log-probabilities of every choice of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreSet {
    pub instance_id: String,
    pub per_choice_token_logprobs: Vec<Vec<f64>>,
}

impl TokenScoreSet {
    pub fn validate(&self) -> Result<(), ScoringError> {
        for (choice, tokens) in self.per_choice_token_logprobs.iter().enumerate() {
            if tokens.is_empty() {
                return Err(ScoringError::EmptyTokenList {
                    instance_id: self.instance_id.clone(),
                    choice,
                });
            }
            for &value in tokens {
                if !value.is_finite() {
                    return Err(ScoringError::NonFiniteScore {
                        instance_id: self.instance_id.clone(),
                        choice,
                        value,
                    });
                }
                if value > LOGPROB_SLACK {
                    return Err(ScoringError::PositiveLogprob {
                        instance_id: self.instance_id.clone(),
                        choice,
                        value,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One plausibility score per choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScores {
    pub instance_id: String,
    pub scores: Vec<f64>,
}

/// Sums each choice's token log-probabilities in input order.
pub fn aggregate_plausibility(tokens: &TokenScoreSet) -> Result<ChoiceScores, ScoringError> {
    tokens.validate()?;
    let scores = tokens
        .per_choice_token_logprobs
        .iter()
        .map(|lp| lp.iter().fold(0.0, |acc, x| acc + x))
        .collect();
    Ok(ChoiceScores {
        instance_id: tokens.instance_id.clone(),
        scores,
    })
}

/// Numerically stable softmax over raw scores, without the probability floor.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax with max subtraction.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - max - log_total).collect()
}

/// Softmax of plausibility scores, floor-clamped.
pub fn normalize_distribution(
    scores: &ChoiceScores,
    role: BeliefRole,
) -> Result<BeliefDistribution, ScoringError> {
    if let Some((choice, &value)) = scores
        .scores
        .iter()
        .enumerate()
        .find(|(_, s)| !s.is_finite())
    {
        return Err(ScoringError::NonFiniteScore {
            instance_id: scores.instance_id.clone(),
            choice,
            value,
        });
    }
    let probs = apply_floor(softmax(&scores.scores));
    Ok(BeliefDistribution::new(scores.instance_id.clone(), role, probs)?)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predict(beliefs: &BeliefDistribution) -> usize {
    argmax(&beliefs.probs)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(s: &[f64]) -> ChoiceScores {
        ChoiceScores {
            instance_id: "q".into(),
            scores: s.to_vec(),
        }
    }

    fn tokens(t: Vec<Vec<f64>>) -> TokenScoreSet {
        TokenScoreSet {
            instance_id: "q".into(),
            per_choice_token_logprobs: t,
        }
    }

    #[test]
    fn aggregate_sums_in_order() {
        let out = aggregate_plausibility(&tokens(vec![vec![-0.5, -1.0, -0.25], vec![-2.0], vec![0.0, 0.0]])).unwrap();
        assert_eq!(out.scores, vec![-1.75, -2.0, 0.0]);
    }

    #[test]
    fn aggregate_rejects_empty_and_positive() {
        assert!(matches!(
            aggregate_plausibility(&tokens(vec![vec![-1.0], vec![]])),
            Err(ScoringError::EmptyTokenList { choice: 1, .. })
        ));
        assert!(matches!(
            aggregate_plausibility(&tokens(vec![vec![0.5], vec![-1.0]])),
            Err(ScoringError::PositiveLogprob { choice: 0, .. })
        ));
        // within slack
        assert!(aggregate_plausibility(&tokens(vec![vec![1e-10], vec![-1.0]])).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let p = normalize_distribution(&scores(&[0.0; 4]), BeliefRole::Prior).unwrap();
        assert_eq!(p.probs, vec![0.25; 4]);

        let p = normalize_distribution(&scores(&[2f64.ln(), 0.0]), BeliefRole::Prior).unwrap();
        assert!((p.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs[1] - 1.0 / 3.0).abs() < 1e-15);

        // mpmath, 40 digits: e/(e+e^2), e^2/(e+e^2)
        let p = normalize_distribution(&scores(&[1.0, 2.0]), BeliefRole::Posterior).unwrap();
        assert!((p.probs[0] - 0.268_941_421_369_995_12).abs() < 1e-6);
        assert!((p.probs[1] - 0.731_058_578_630_004_88).abs() < 1e-6);
        assert_eq!(predict(&p), 1);
    }

    #[test]
    fn softmax_survives_large_negative_scores() {
        let p = normalize_distribution(&scores(&[-1200.0, -1201.0]), BeliefRole::Prior).unwrap();
        assert!((p.probs[0] - 0.731_058_578_630_004_88).abs() < 1e-12);
        let p = normalize_distribution(&scores(&[0.0, -5000.0]), BeliefRole::Prior).unwrap();
        assert!(p.probs[1] > 0.0);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(matches!(
            normalize_distribution(&scores(&[0.0, f64::NAN]), BeliefRole::Prior),
            Err(ScoringError::NonFiniteScore { choice: 1, .. })
        ));
        assert!(normalize_distribution(&scores(&[f64::NEG_INFINITY, 0.0]), BeliefRole::Prior).is_err());
    }

    #[test]
    fn predict_ties_go_low() {
        let b = |p: Vec<f64>| BeliefDistribution::new("q", BeliefRole::Prior, p).unwrap();
        assert_eq!(predict(&b(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(predict(&b(vec![0.5, 0.5])), 0);
        assert_eq!(predict(&b(vec![0.2, 0.4, 0.4])), 1);
    }

    proptest! {
        #[test]
        fn shift_invariance(s in proptest::collection::vec(-50.0f64..50.0, 2..9), c in -100.0f64..100.0) {
            let a = normalize_distribution(&scores(&s), BeliefRole::Prior).unwrap();
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let b = normalize_distribution(&scores(&shifted), BeliefRole::Prior).unwrap();
            prop_assert_eq!(predict(&a), predict(&b));
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_a_monotone_distribution(s in proptest::collection::vec(-30.0f64..30.0, 2..9)) {
            let p = normalize_distribution(&scores(&s), BeliefRole::Prior).unwrap();
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for &x in &p.probs {
                prop_assert!(x > 0.0 && x < 1.0);
            }
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] > s[j] {
                        prop_assert!(p.probs[i] >= p.probs[j]);
                    }
                }
            }
        }

        #[test]
        fn aggregation_is_additive_over_concatenation(
            a in proptest::collection::vec(-5.0f64..0.0, 1..10),
            b in proptest::collection::vec(-5.0f64..0.0, 1..10),
        ) {
            let sum = |t: &[f64]| aggregate_plausibility(&tokens(vec![t.to_vec(), vec![-1.0]])).unwrap().scores[0];
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            prop_assert!((sum(&joined) - (sum(&a) + sum(&b))).abs() <= 1e-12);
        }
    }
}
