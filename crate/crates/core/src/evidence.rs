//! Per-object verification: existence polling, grounding, confidence fusion,
//! the three-level faithfulness map, and the Select/Abstain/Count actions.

use crate::backends::{BackendError, ImageRef, Session};
use crate::extraction::ObjectUnion;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("grounding {name:?} refused: poll confidence {poll_conf} is below the gate {tau_p}")]
    GateViolation {
        name: String,
        poll_conf: f64,
        tau_p: f64,
    },
    #[error("verifying {object:?}: {source}")]
    Backend {
        object: String,
        #[source]
        source: BackendError,
    },
}

/// A detection in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Result<Self, String> {
        let b = Self {
            x0,
            y0,
            x1,
            y1,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = 0.0 <= self.x0 && self.x0 < self.x1 && self.x1 <= 1.0;
        let ordered = ordered && 0.0 <= self.y0 && self.y0 < self.y1 && self.y1 <= 1.0;
        if !ordered {
            return Err(format!(
                "box ({}, {}, {}, {}) is not an ordered normalized rectangle",
                self.x0, self.y0, self.x1, self.y1
            ));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("box score {} outside [0,1]", self.score));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// NMS priority: higher score, then smaller area, then coordinates.
    fn priority(&self, other: &BoundingBox) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.area().total_cmp(&other.area()))
            .then(self.x0.total_cmp(&other.x0))
            .then(self.y0.total_cmp(&other.y0))
            .then(self.x1.total_cmp(&other.x1))
            .then(self.y1.total_cmp(&other.y1))
    }
}

/// How objects that fail the polling gate enter step scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatedPolicy {
    /// Scored like any other object (grounding confidence 0).
    #[default]
    ScoreZero,
    /// Left out of the step's object scores.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    pub alpha: f64,
    pub tau_p: f64,
    pub absent_threshold: f64,
    pub present_threshold: f64,
    pub select_threshold: f64,
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub count_iou_dedup: f64,
    pub gated_objects: GatedPolicy,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau_p: 0.4,
            absent_threshold: 0.4,
            present_threshold: 0.6,
            select_threshold: 0.6,
            box_threshold: 0.35,
            text_threshold: 0.25,
            count_iou_dedup: 0.5,
            gated_objects: GatedPolicy::ScoreZero,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = [
            ("alpha", self.alpha),
            ("tau_p", self.tau_p),
            ("absent_threshold", self.absent_threshold),
            ("present_threshold", self.present_threshold),
            ("select_threshold", self.select_threshold),
            ("box_threshold", self.box_threshold),
            ("text_threshold", self.text_threshold),
            ("count_iou_dedup", self.count_iou_dedup),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{key} = {v} is outside [0,1]"));
            }
        }
        if self.absent_threshold > self.present_threshold {
            return Err("absent_threshold exceeds present_threshold".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Selected,
    Abstained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub name: String,
    pub poll_conf: f64,
    pub gated_out: bool,
    pub boxes: Vec<BoundingBox>,
    pub ground_conf: f64,
    pub fused_conf: f64,
    pub mapped_score: f64,
    pub verdict: Verdict,
    pub count: usize,
}

pub fn poll_object(
    session: &mut Session<'_>,
    image: &ImageRef,
    name: &str,
) -> Result<f64, EvidenceError> {
    session
        .poll(image, name)
        .map_err(|source| EvidenceError::Backend {
            object: name.to_string(),
            source,
        })
}

/// Grounds an object that passed the polling gate. Returns the retained
/// boxes and the most confident detection score (0 with no detections).
pub fn ground_object(
    session: &mut Session<'_>,
    image: &ImageRef,
    name: &str,
    poll_conf: f64,
    config: &VerificationConfig,
) -> Result<(Vec<BoundingBox>, f64), EvidenceError> {
    if poll_conf < config.tau_p {
        return Err(EvidenceError::GateViolation {
            name: name.to_string(),
            poll_conf,
            tau_p: config.tau_p,
        });
    }
    let boxes: Vec<BoundingBox> = session
        .ground(image, name, config.box_threshold, config.text_threshold)
        .map_err(|source| EvidenceError::Backend {
            object: name.to_string(),
            source,
        })?
        .into_iter()
        .filter(|b| b.score >= config.box_threshold)
        .collect();
    let ground_conf = boxes.iter().map(|b| b.score).fold(0.0, f64::max);
    Ok((boxes, ground_conf))
}

pub fn fuse_confidence(poll_conf: f64, ground_conf: f64, alpha: f64) -> f64 {
    alpha * poll_conf + (1.0 - alpha) * ground_conf
}

pub fn map_confidence(fused: f64, config: &VerificationConfig) -> f64 {
    if fused < config.absent_threshold {
        0.0
    } else if fused <= config.present_threshold {
        fused
    } else {
        1.0
    }
}

pub fn select_or_abstain(fused: f64, config: &VerificationConfig) -> Verdict {
    if fused > config.select_threshold {
        Verdict::Selected
    } else {
        Verdict::Abstained
    }
}

/// Counts reliably grounded instances: boxes at or above the box threshold
/// after greedy IoU suppression of duplicates.
pub fn count_instances(boxes: &[BoundingBox], config: &VerificationConfig) -> usize {
    let mut candidates: Vec<&BoundingBox> = boxes
        .iter()
        .filter(|b| b.score >= config.box_threshold)
        .collect();
    candidates.sort_by(|a, b| a.priority(b));
    let mut kept: Vec<&BoundingBox> = Vec::with_capacity(candidates.len());
    for b in candidates {
        if kept.iter().all(|k| k.iou(b) < config.count_iou_dedup) {
            kept.push(b);
        }
    }
    kept.len()
}

/// Builds a record from raw polling and grounding results.
pub fn assemble_record(
    name: &str,
    poll_conf: f64,
    grounding: Option<(Vec<BoundingBox>, f64)>,
    config: &VerificationConfig,
) -> EvidenceRecord {
    let gated_out = grounding.is_none();
    let (boxes, ground_conf) = grounding.unwrap_or_default();
    let fused_conf = fuse_confidence(poll_conf, ground_conf, config.alpha);
    let verdict = select_or_abstain(fused_conf, config);
    let count = match verdict {
        Verdict::Selected => count_instances(&boxes, config),
        Verdict::Abstained => 0,
    };
    EvidenceRecord {
        name: name.to_string(),
        poll_conf,
        gated_out,
        boxes,
        ground_conf,
        fused_conf,
        mapped_score: map_confidence(fused_conf, config),
        verdict,
        count,
    }
}

pub fn verify_object(
    session: &mut Session<'_>,
    image: &ImageRef,
    name: &str,
    config: &VerificationConfig,
) -> Result<EvidenceRecord, EvidenceError> {
    let poll_conf = poll_object(session, image, name)?;
    let grounding = if poll_conf >= config.tau_p {
        Some(ground_object(session, image, name, poll_conf, config)?)
    } else {
        None
    };
    Ok(assemble_record(name, poll_conf, grounding, config))
}

/// Verifies each distinct name once. Calls are issued in the given order; the
/// result is keyed (and iterated) by name.
pub fn verify_names<'n>(
    session: &mut Session<'_>,
    image: &ImageRef,
    names: impl IntoIterator<Item = &'n str>,
    config: &VerificationConfig,
) -> Result<BTreeMap<String, EvidenceRecord>, EvidenceError> {
    let mut out = BTreeMap::new();
    for name in names {
        if out.contains_key(name) {
            continue;
        }
        let record = verify_object(session, image, name, config)?;
        out.insert(name.to_string(), record);
    }
    Ok(out)
}

pub fn verify_union(
    session: &mut Session<'_>,
    image: &ImageRef,
    union: &ObjectUnion,
    config: &VerificationConfig,
) -> Result<BTreeMap<String, EvidenceRecord>, EvidenceError> {
    verify_names(session, image, union.names(), config)
}
