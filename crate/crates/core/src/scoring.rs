//! Step- and chain-level faithfulness scores and dataset aggregates.

use crate::evidence::{EvidenceRecord, GatedPolicy};
use crate::extraction::{ReasoningChain, StepRole};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoringError {
    #[error("chain has no evidential steps")]
    NoEvidentialSteps,
    #[error("no scored chains to aggregate")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step_index: usize,
    pub object_scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub evidential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainScore {
    pub step_scores: Vec<StepScore>,
    pub n: usize,
    pub value: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn score_step(step_index: usize, object_scores: &[f64]) -> StepScore {
    let evidential = !object_scores.is_empty();
    StepScore {
        step_index,
        object_scores: object_scores.to_vec(),
        value: evidential.then(|| mean(object_scores)),
        evidential,
    }
}

pub fn score_chain(step_scores: Vec<StepScore>) -> Result<ChainScore, ScoringError> {
    let values: Vec<f64> = step_scores.iter().filter_map(|s| s.value).collect();
    if values.is_empty() {
        return Err(ScoringError::NoEvidentialSteps);
    }
    Ok(ChainScore {
        n: values.len(),
        value: mean(&values),
        step_scores,
    })
}

/// Looks up each claimed object's mapped score and scores every step.
/// Introductory and concluding steps are never evidential.
///
/// # Panics
/// If a claimed object has no evidence record.
pub fn score_steps(
    chain: &ReasoningChain,
    records: &BTreeMap<String, EvidenceRecord>,
    gated: GatedPolicy,
) -> Vec<StepScore> {
    chain
        .steps
        .iter()
        .map(|step| {
            if step.role != StepRole::Evidential {
                return score_step(step.index, &[]);
            }
            let scores: Vec<f64> = step
                .claimed_objects
                .iter()
                .map(|o| &records[&o.name])
                .filter(|r| !(r.gated_out && gated == GatedPolicy::Exclude))
                .map(|r| r.mapped_score)
                .collect();
            score_step(step.index, &scores)
        })
        .collect()
}

/// Mean and population standard deviation of a set of chain scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn mean_pct(&self) -> f64 {
        self.mean * 100.0
    }

    pub fn std_pct(&self) -> f64 {
        self.std * 100.0
    }

    /// `mean±std` in percent with two decimals.
    pub fn display_pct(&self) -> String {
        format!("{:.2}±{:.2}", self.mean_pct(), self.std_pct())
    }
}

pub fn aggregate_dataset(chain_values: &[f64]) -> Result<Aggregate, ScoringError> {
    if chain_values.is_empty() {
        return Err(ScoringError::EmptyDataset);
    }
    let m = mean(chain_values);
    let var = chain_values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / chain_values.len() as f64;
    Ok(Aggregate {
        mean: m,
        std: var.sqrt(),
        count: chain_values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub step_index: usize,
    pub mean_difference: f64,
    pub items: usize,
}

/// Per-step-index mean of `F_step(a) - F_step(b)` over items present in both
/// maps, using only indices where both steps are evidential.
pub fn step_difference_profile(
    a: &BTreeMap<String, Vec<StepScore>>,
    b: &BTreeMap<String, Vec<StepScore>>,
) -> Vec<ProfilePoint> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (id, steps_a) in a {
        let Some(steps_b) = b.get(id) else { continue };
        for sa in steps_a {
            let Some(va) = sa.value else { continue };
            let vb = steps_b
                .iter()
                .find(|sb| sb.step_index == sa.step_index)
                .and_then(|sb| sb.value);
            if let Some(vb) = vb {
                let e = sums.entry(sa.step_index).or_default();
                e.0 += va - vb;
                e.1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(step_index, (sum, items))| ProfilePoint {
            step_index,
            mean_difference: sum / items as f64,
            items,
        })
        .collect()
}
