use super::run::{Method, RunArtifact};
use super::HarnessError;
use crate::scoring::{aggregate_dataset, step_difference_profile, ProfilePoint, StepScore};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: String,
    /// Absent when no item produced a chain score.
    pub mean_pct: Option<f64>,
    pub std_pct: Option<f64>,
    /// `mean±std`, two decimals.
    pub mean_std: String,
    /// Items contributing a chain score.
    pub n_items: usize,
    /// Items that ran but had no evidential steps.
    pub n_unscored: usize,
    pub n_failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
}

fn normalize_answer(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', '?'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Exact match after trimming, case folding and dropping trailing
/// punctuation.
pub fn answers_match(predicted: &str, reference: &str) -> bool {
    normalize_answer(predicted) == normalize_answer(reference)
}

pub fn report_row(artifact: &RunArtifact) -> ReportRow {
    let scores: Vec<f64> = artifact.items.iter().filter_map(|i| i.f_chain()).collect();
    let n_failed = artifact.items.iter().filter(|i| i.is_failed()).count();
    let agg = aggregate_dataset(&scores).ok();
    let graded: Vec<bool> = artifact
        .items
        .iter()
        .filter_map(|i| match &i.outcome {
            super::ItemOutcome::Ok { correct, .. } => *correct,
            super::ItemOutcome::Failed { .. } => None,
        })
        .collect();
    ReportRow {
        method: artifact.header.method,
        dataset: artifact.header.dataset.clone(),
        mean_pct: agg.map(|a| a.mean_pct()),
        std_pct: agg.map(|a| a.std_pct()),
        mean_std: agg.map_or_else(|| "n/a".to_string(), |a| a.display_pct()),
        n_items: scores.len(),
        n_unscored: artifact.items.len() - n_failed - scores.len(),
        n_failed,
        accuracy_pct: (!graded.is_empty())
            .then(|| 100.0 * graded.iter().filter(|c| **c).count() as f64 / graded.len() as f64),
    }
}

fn step_map(artifact: &RunArtifact) -> BTreeMap<String, Vec<StepScore>> {
    artifact
        .items
        .iter()
        .filter_map(|i| i.step_scores().map(|s| (i.id.clone(), s.to_vec())))
        .collect()
}

/// Per-step `F_step(a) - F_step(b)` over the items both artifacts share.
pub fn difference_profile(
    a: &RunArtifact,
    b: &RunArtifact,
) -> Result<Vec<ProfilePoint>, HarnessError> {
    let shared = a.items.iter().any(|x| b.items.iter().any(|y| y.id == x.id));
    if !shared {
        return Err(HarnessError::MismatchedItems);
    }
    Ok(step_difference_profile(&step_map(a), &step_map(b)))
}

fn opt2(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.2}"))
}

pub fn write_summary(dir: &Path, rows: &[ReportRow]) -> Result<Vec<PathBuf>, HarnessError> {
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| HarnessError::Io {
        path: csv_path.display().to_string(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| HarnessError::Io {
        path: csv_path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record([
        "method",
        "dataset",
        "mean_pct",
        "std_pct",
        "mean_std",
        "n_items",
        "n_unscored",
        "n_failed",
        "accuracy_pct",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.dataset.clone(),
            opt2(r.mean_pct),
            opt2(r.std_pct),
            r.mean_std.clone(),
            r.n_items.to_string(),
            r.n_unscored.to_string(),
            r.n_failed.to_string(),
            opt2(r.accuracy_pct),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&csv_path, e))?;

    let json_path = dir.join("summary.json");
    let mut body = serde_json::to_string_pretty(rows).unwrap();
    body.push('\n');
    std::fs::write(&json_path, body).map_err(|e| HarnessError::io(&json_path, e))?;
    Ok(vec![csv_path, json_path])
}

pub fn write_profile_csv(path: &Path, profile: &[ProfilePoint]) -> Result<(), HarnessError> {
    let mut out = String::from("step_index,mean_difference,items\n");
    for p in profile {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            p.step_index, p.mean_difference, p.items
        ));
    }
    std::fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

/// Writes `summary.csv` and `summary.json` for all artifacts and, with
/// `diff`, `step_difference.csv` for the first artifact minus the second.
pub fn emit_report(
    artifacts: &[RunArtifact],
    out_dir: &Path,
    diff: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    if artifacts.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let profile = if diff {
        let [a, b] = artifacts else {
            return Err(HarnessError::MismatchedItems);
        };
        Some(difference_profile(a, b)?)
    } else {
        None
    };
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let rows: Vec<ReportRow> = artifacts.iter().map(report_row).collect();
    let mut written = write_summary(out_dir, &rows)?;
    if let Some(profile) = profile {
        let path = out_dir.join("step_difference.csv");
        write_profile_csv(&path, &profile)?;
        written.push(path);
    }
    Ok(written)
}
