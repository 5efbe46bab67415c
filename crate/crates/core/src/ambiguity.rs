//! Rationale entropy and the ambiguous/unambiguous partition.
//!
//! Rationale entropy is the cross-entropy of the posterior belief against the
//! prior belief, summed over the answer choices (nats):
//! `H(x) = -Σᵢ P(aᵢ | x, posterior) · ln P(aᵢ | x, prior)`.
//! The threshold is the mean entropy over the training set; an instance is
//! ambiguous when its entropy is at least the threshold.

use crate::data::{
    AmbiguityLabel, BeliefDistribution, BeliefRole, EntropyRecord, PartitionReport,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AmbiguityError {
    #[error("{instance_id}: prior has {prior} choices, posterior has {posterior}")]
    KMismatch {
        instance_id: String,
        prior: usize,
        posterior: usize,
    },
    #[error("prior belongs to {prior:?}, posterior to {posterior:?}")]
    IdMismatch { prior: String, posterior: String },
    #[error("expected a {expected} distribution for {instance_id}")]
    WrongRole {
        instance_id: String,
        expected: BeliefRole,
    },
    #[error("empty list")]
    EmptyList,
}

/// Prior and posterior beliefs about the same instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPair {
    prior: BeliefDistribution,
    posterior: BeliefDistribution,
}

impl BeliefPair {
    pub fn new(
        prior: BeliefDistribution,
        posterior: BeliefDistribution,
    ) -> Result<Self, AmbiguityError> {
        if prior.instance_id != posterior.instance_id {
            return Err(AmbiguityError::IdMismatch {
                prior: prior.instance_id,
                posterior: posterior.instance_id,
            });
        }
        if prior.role != BeliefRole::Prior {
            return Err(AmbiguityError::WrongRole {
                instance_id: prior.instance_id,
                expected: BeliefRole::Prior,
            });
        }
        if posterior.role != BeliefRole::Posterior {
            return Err(AmbiguityError::WrongRole {
                instance_id: posterior.instance_id,
                expected: BeliefRole::Posterior,
            });
        }
        if prior.k() != posterior.k() {
            return Err(AmbiguityError::KMismatch {
                prior: prior.k(),
                posterior: posterior.k(),
                instance_id: prior.instance_id,
            });
        }
        Ok(BeliefPair { prior, posterior })
    }

    pub fn instance_id(&self) -> &str {
        &self.prior.instance_id
    }

    pub fn prior(&self) -> &BeliefDistribution {
        &self.prior
    }

    pub fn posterior(&self) -> &BeliefDistribution {
        &self.posterior
    }
}

/// `-Σ p ln p` in nats.
pub fn shannon_entropy(dist: &BeliefDistribution) -> f64 {
    cross_entropy(&dist.probs, &dist.probs)
}

fn cross_entropy(weights: &[f64], informativeness: &[f64]) -> f64 {
    let h = -weights
        .iter()
        .zip(informativeness)
        .fold(0.0, |acc, (p, q)| acc + p * q.ln());
    // -0.0 for a one-hot-like input
    h.max(0.0)
}

/// Cross-entropy of the posterior against the prior.
pub fn rationale_entropy(pair: &BeliefPair) -> f64 {
    cross_entropy(&pair.posterior.probs, &pair.prior.probs)
}

/// Arithmetic mean, summed in input order.
pub fn compute_threshold(entropies: &[f64]) -> Result<f64, AmbiguityError> {
    if entropies.is_empty() {
        return Err(AmbiguityError::EmptyList);
    }
    Ok(entropies.iter().fold(0.0, |acc, h| acc + h) / entropies.len() as f64)
}

pub fn label_for(entropy: f64, tau: f64) -> AmbiguityLabel {
    if entropy < tau {
        AmbiguityLabel::Unambiguous
    } else {
        AmbiguityLabel::Ambiguous
    }
}

/// Labels precomputed entropies. `tau` defaults to their mean.
pub fn partition_entropies(
    entropies: &[(String, f64)],
    tau_override: Option<f64>,
) -> Result<PartitionReport, AmbiguityError> {
    let values: Vec<f64> = entropies.iter().map(|(_, h)| *h).collect();
    let mean = compute_threshold(&values)?;
    let tau = tau_override.unwrap_or(mean);
    let records: Vec<EntropyRecord> = entropies
        .iter()
        .map(|(id, h)| EntropyRecord {
            instance_id: id.clone(),
            entropy: *h,
            label: label_for(*h, tau),
        })
        .collect();
    let n_ambiguous = records
        .iter()
        .filter(|r| r.label == AmbiguityLabel::Ambiguous)
        .count();
    Ok(PartitionReport {
        tau,
        n_ambiguous,
        n_unambiguous: records.len() - n_ambiguous,
        records,
    })
}

/// Entropy of every pair and its label; `tau_override` supplies the training
/// threshold at inference time.
pub fn partition(
    pairs: &[BeliefPair],
    tau_override: Option<f64>,
) -> Result<PartitionReport, AmbiguityError> {
    let entropies: Vec<(String, f64)> = pairs
        .iter()
        .map(|p| (p.instance_id().to_string(), rationale_entropy(p)))
        .collect();
    partition_entropies(&entropies, tau_override)
}

/// Counts per bin of width `bin_width`, starting at zero. Returns
/// `(bin_start, count)` rows up to the last non-empty bin.
pub fn histogram(entropies: &[f64], bin_width: f64) -> Vec<(f64, usize)> {
    let max = entropies.iter().cloned().fold(0.0, f64::max);
    let n_bins = (max / bin_width).floor() as usize + 1;
    let mut counts = vec![0usize; n_bins];
    for &h in entropies {
        let b = ((h / bin_width).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * bin_width, c))
        .collect()
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;
