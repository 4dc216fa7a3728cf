use super::report::{answers_match, difference_profile, report_row, ReportRow};
use super::{DatasetRecord, HarnessError, RunConfig};
use crate::backends::{Backend, CallRecord, Session};
use crate::planner::{run_cot_baseline, run_faithact, BaselineTrace, PlanTrace};
use crate::scoring::{ProfilePoint, StepScore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cot,
    Faithact,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cot => "cot",
            Method::Faithact => "faithact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub run_id: String,
    pub method: Method,
    pub dataset: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ItemTrace {
    Cot(BaselineTrace),
    Faithact(PlanTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ItemOutcome {
    Ok {
        /// Absent when the final chain has no evidential steps.
        f_chain: Option<f64>,
        step_scores: Vec<StepScore>,
        final_answer: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        correct: Option<bool>,
        trace: Box<ItemTrace>,
    },
    Failed {
        error: String,
        calls: Vec<CallRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    #[serde(flatten)]
    pub outcome: ItemOutcome,
}

impl ItemRecord {
    pub fn f_chain(&self) -> Option<f64> {
        match &self.outcome {
            ItemOutcome::Ok { f_chain, .. } => *f_chain,
            ItemOutcome::Failed { .. } => None,
        }
    }

    pub fn step_scores(&self) -> Option<&[StepScore]> {
        match &self.outcome {
            ItemOutcome::Ok { step_scores, .. } => Some(step_scores),
            ItemOutcome::Failed { .. } => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.outcome, ItemOutcome::Failed { .. })
    }

    pub fn trace(&self) -> Option<&ItemTrace> {
        match &self.outcome {
            ItemOutcome::Ok { trace, .. } => Some(trace),
            ItemOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub header: ArtifactHeader,
    pub items: Vec<ItemRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(ArtifactHeader),
    Item(ItemRecord),
}

fn run_id(method: Method, dataset: &str, records: &[DatasetRecord], config: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(method.as_str());
    h.update([0]);
    h.update(dataset);
    h.update([0]);
    h.update(serde_json::to_vec(config).unwrap());
    for r in records {
        h.update(serde_json::to_vec(r).unwrap());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn process(
    record: &DatasetRecord,
    method: Method,
    config: &RunConfig,
    backend: &dyn Backend,
) -> ItemRecord {
    let mut session = Session::new(backend);
    let result = match method {
        Method::Cot => run_cot_baseline(
            &mut session,
            &record.id,
            &record.image,
            &record.question,
            &config.plan.verification,
        )
        .map(|t| {
            (
                t.scored.f_chain,
                t.scored.step_scores.clone(),
                t.final_answer.clone(),
                ItemTrace::Cot(t),
            )
        }),
        Method::Faithact => run_faithact(
            &mut session,
            &record.id,
            &record.image,
            &record.question,
            &config.plan,
        )
        .map(|t| {
            let fin = t.final_chain();
            (
                fin.f_chain,
                fin.step_scores.clone(),
                t.final_answer.clone(),
                ItemTrace::Faithact(t),
            )
        }),
    };
    let outcome = match result {
        Ok((f_chain, step_scores, final_answer, trace)) => ItemOutcome::Ok {
            f_chain,
            step_scores,
            correct: record
                .reference_answer
                .as_deref()
                .map(|r| answers_match(&final_answer, r)),
            final_answer,
            trace: Box::new(trace),
        },
        Err(e) => {
            log::warn!("item {} failed: {e}", record.id);
            ItemOutcome::Failed {
                error: e.to_string(),
                calls: session.into_calls(),
            }
        }
    };
    ItemRecord {
        id: record.id.clone(),
        outcome,
    }
}

/// Runs every record through `method`. Item failures are recorded, not
/// raised; items keep dataset order whatever order workers finish in.
pub fn run_evaluation(
    records: &[DatasetRecord],
    dataset: &str,
    method: Method,
    config: &RunConfig,
    backend: &dyn Backend,
) -> Result<RunArtifact, HarnessError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let items = pool.install(|| {
        records
            .par_iter()
            .map(|r| process(r, method, config, backend))
            .collect()
    });
    Ok(RunArtifact {
        header: ArtifactHeader {
            run_id: run_id(method, dataset, records, config),
            method,
            dataset: dataset.to_string(),
            config: config.clone(),
        },
        items,
    })
}

pub fn write_artifact(path: &Path, artifact: &RunArtifact) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: &Line| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")
    };
    put(&Line::Header(artifact.header.clone())).map_err(|e| HarnessError::io(path, e))?;
    for item in &artifact.items {
        put(&Line::Item(item.clone())).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_artifact(path: &Path) -> Result<RunArtifact, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut header = None;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            Line::Header(h) if header.is_none() && i == 0 => header = Some(h),
            Line::Header(_) => {
                return Err(HarnessError::Parse {
                    line: i + 1,
                    message: "unexpected header line".into(),
                })
            }
            Line::Item(item) => items.push(item),
        }
    }
    let header = header.ok_or(HarnessError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok(RunArtifact { header, items })
}

/// Both methods over identical items and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub cot: RunArtifact,
    pub faithact: RunArtifact,
    /// Mean per-step `F_step(faithact) - F_step(cot)`.
    pub profile: Vec<ProfilePoint>,
    pub rows: Vec<ReportRow>,
}

pub fn compare_methods(
    records: &[DatasetRecord],
    dataset: &str,
    config: &RunConfig,
    backend: &dyn Backend,
) -> Result<Comparison, HarnessError> {
    let cot = run_evaluation(records, dataset, Method::Cot, config, backend)?;
    let faithact = run_evaluation(records, dataset, Method::Faithact, config, backend)?;
    let profile = difference_profile(&faithact, &cot)?;
    let rows = vec![report_row(&cot), report_row(&faithact)];
    Ok(Comparison {
        cot,
        faithact,
        profile,
        rows,
    })
}
