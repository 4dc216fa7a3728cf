//! The chain-of-thought baseline and the evidence-gated verify-then-refine
//! episode.
//!
//! An episode reasons once, extracts the objects each step claims, verifies
//! them, injects the verified evidence into a refine prompt and regenerates
//! the whole chain. The refined chain is re-extracted and re-scored, and
//! refinement repeats while any evidential step scores below the step
//! threshold and rounds remain.

use crate::backends::{BackendError, CallRecord, ImageRef, Session};
use crate::evidence::{
    verify_names, BoundingBox, EvidenceError, EvidenceRecord, Verdict, VerificationConfig,
};
use crate::extraction::{
    collect_objects, parse_object_list, segment_chain, ChainOrigin, ExtractionError,
    ReasoningChain, StepRole,
};
use crate::scoring::{score_chain, score_steps, StepScore};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub step_threshold_c: f64,
    pub max_refine_rounds: u32,
    pub reverify_refined: bool,
    /// Verify objects named in the question and show them in the dossier.
    /// They never enter step or chain scores.
    pub verify_question_objects: bool,
    pub verification: VerificationConfig,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            step_threshold_c: 0.6,
            max_refine_rounds: 1,
            reverify_refined: true,
            verify_question_objects: true,
            verification: VerificationConfig::default(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.step_threshold_c) {
            return Err(format!(
                "step threshold {} outside [0,1]",
                self.step_threshold_c
            ));
        }
        if self.max_refine_rounds < 1 {
            return Err("max_refine_rounds must be at least 1".into());
        }
        self.verification.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DossierEntry {
    pub name: String,
    pub verdict: Verdict,
    pub fused_conf: f64,
    pub boxes: Vec<BoundingBox>,
    pub count: usize,
}

/// Verified evidence handed to the reasoner, ordered by object name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceDossier {
    pub entries: Vec<DossierEntry>,
}

impl EvidenceDossier {
    pub fn from_records(records: &BTreeMap<String, EvidenceRecord>) -> Self {
        Self {
            entries: records
                .values()
                .map(|r| DossierEntry {
                    name: r.name.clone(),
                    verdict: r.verdict,
                    fused_conf: r.fused_conf,
                    boxes: match r.verdict {
                        Verdict::Selected => r.boxes.clone(),
                        Verdict::Abstained => Vec::new(),
                    },
                    count: r.count,
                })
                .collect(),
        }
    }

    pub fn abstained(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| e.verdict == Verdict::Abstained)
            .map(|e| e.name.as_str())
    }
}

/// A chain with its step scores. `f_chain` is absent when the chain was not
/// verified or has no evidential steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChain {
    pub chain: ReasoningChain,
    pub step_scores: Vec<StepScore>,
    pub f_chain: Option<f64>,
}

impl ScoredChain {
    fn new(chain: ReasoningChain, step_scores: Vec<StepScore>) -> Self {
        let f_chain = score_chain(step_scores.clone()).ok().map(|c| c.value);
        Self {
            chain,
            step_scores,
            f_chain,
        }
    }

    fn unscored(chain: ReasoningChain) -> Self {
        Self {
            chain,
            step_scores: Vec::new(),
            f_chain: None,
        }
    }

    /// True when every evidential step reaches `c`.
    pub fn meets_threshold(&self, c: f64) -> bool {
        self.step_scores
            .iter()
            .filter_map(|s| s.value)
            .all(|v| v >= c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThresholdMet,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRound {
    pub round: u32,
    pub dossier: EvidenceDossier,
    pub prompt: String,
    pub refined: ScoredChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub item_id: String,
    pub question: String,
    pub initial_prompt: String,
    pub raw: ScoredChain,
    pub question_objects: Vec<String>,
    pub evidence: BTreeMap<String, EvidenceRecord>,
    pub rounds: Vec<RefineRound>,
    pub final_answer: String,
    pub rounds_used: u32,
    pub terminated_by: Termination,
    pub calls: Vec<CallRecord>,
}

impl PlanTrace {
    pub fn final_chain(&self) -> &ScoredChain {
        &self
            .rounds
            .last()
            .expect("at least one refine round")
            .refined
    }

    pub fn f_chain(&self) -> Option<f64> {
        self.final_chain().f_chain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub item_id: String,
    pub question: String,
    pub prompt: String,
    pub scored: ScoredChain,
    pub evidence: BTreeMap<String, EvidenceRecord>,
    pub final_answer: String,
    pub calls: Vec<CallRecord>,
}

pub fn cot_prompt(question: &str) -> String {
    format!("{question}\nLet's think step by step.")
}

const REFINE_HEAD: &str = "Question: ";
const REFINE_EVIDENCE: &str = ".\n\nAdditional location information:\n\n";
const REFINE_INSTRUCTIONS: &str = "\n\nUsing only the \"exists\" objects with high confidence and avoid using objects that do not exist. Do not include new objects or descriptions. Do not repeat the evidences, confidence scores and bounding boxes in your reasoning. Think step by step. Steps should be like: 1.<object1>:xxx\n\n2.<object2>:xxx\n\n...\n\n..., .";

fn render_entry(e: &DossierEntry) -> String {
    match e.verdict {
        Verdict::Selected => {
            let boxes = e
                .boxes
                .iter()
                .map(|b| format!("[{:.2}, {:.2}, {:.2}, {:.2}]", b.x0, b.y0, b.x1, b.y1))
                .collect::<Vec<_>>()
                .join(", ");
            format!(
                "- {}: exists (confidence {:.2}, count {}, boxes {})",
                e.name, e.fused_conf, e.count, boxes
            )
        }
        Verdict::Abstained => format!(
            "- {}: does not exist (confidence {:.2})",
            e.name, e.fused_conf
        ),
    }
}

pub fn render_refine_prompt(question: &str, dossier: &EvidenceDossier) -> String {
    let evidence = dossier
        .entries
        .iter()
        .map(render_entry)
        .collect::<Vec<_>>()
        .join("\n");
    format!("{REFINE_HEAD}{question}{REFINE_EVIDENCE}{evidence}{REFINE_INSTRUCTIONS}")
}

pub fn is_refine_prompt(prompt: &str) -> bool {
    prompt.starts_with(REFINE_HEAD)
        && prompt.contains(REFINE_EVIDENCE)
        && prompt.ends_with(REFINE_INSTRUCTIONS)
}

/// Names a refine prompt reports as not existing.
pub fn abstained_in_prompt(prompt: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?m)^- (.+?): does not exist \(confidence [0-9.]+\)$").unwrap()
    });
    re.captures_iter(prompt).map(|c| c[1].to_string()).collect()
}

pub fn extract_final_answer(chain: &ReasoningChain) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?is)the answer is\s*:?\s*(.+)$").unwrap());
    let Some(last) = chain.steps.last() else {
        return String::new();
    };
    if let Some(step) = chain
        .steps
        .iter()
        .rev()
        .find(|s| s.role == StepRole::Concluding)
    {
        if let Some(c) = re.captures(&step.text) {
            let answer = c[1].trim().trim_end_matches('.').trim();
            if !answer.is_empty() {
                return answer.to_string();
            }
        }
    }
    last.text.clone()
}

fn extract_names(session: &mut Session<'_>, text: &str) -> Result<Vec<String>, BackendError> {
    for attempt in 0..2 {
        match parse_object_list(&session.extract(text)?) {
            Ok(names) => return Ok(names),
            Err(e) if attempt == 0 => log::debug!("re-querying extractor: {e}"),
            Err(e) => log::warn!("extractor failed twice, step contributes no objects: {e}"),
        }
    }
    Ok(Vec::new())
}

/// Runs the extractor over every evidential step and records the claims.
pub fn extract_claims(
    session: &mut Session<'_>,
    chain: &mut ReasoningChain,
) -> Result<(), BackendError> {
    let evidential: Vec<(usize, String)> = chain
        .steps
        .iter()
        .filter(|s| s.role == StepRole::Evidential)
        .map(|s| (s.index, s.text.clone()))
        .collect();
    for (index, text) in evidential {
        let names = extract_names(session, &text)?;
        chain.set_step_objects(index, names);
    }
    Ok(())
}

fn reason_chain(
    session: &mut Session<'_>,
    image: &ImageRef,
    question: &str,
    prompt: &str,
    origin: ChainOrigin,
) -> Result<ReasoningChain, PlanError> {
    let text = session.reason(image, question, prompt)?;
    let mut chain = segment_chain(&text, origin)?;
    extract_claims(session, &mut chain)?;
    Ok(chain)
}

/// Verifies names not yet in `records`, in first-appearance order.
fn verify_new(
    session: &mut Session<'_>,
    image: &ImageRef,
    names: impl IntoIterator<Item = String>,
    records: &mut BTreeMap<String, EvidenceRecord>,
    config: &VerificationConfig,
) -> Result<(), EvidenceError> {
    let fresh: Vec<String> = names
        .into_iter()
        .filter(|n| !records.contains_key(n))
        .collect();
    let verified = verify_names(session, image, fresh.iter().map(String::as_str), config)?;
    records.extend(verified);
    Ok(())
}

pub fn run_cot_baseline(
    session: &mut Session<'_>,
    item_id: &str,
    image: &ImageRef,
    question: &str,
    config: &VerificationConfig,
) -> Result<BaselineTrace, PlanError> {
    let prompt = cot_prompt(question);
    let chain = reason_chain(session, image, question, &prompt, ChainOrigin::CotBaseline)?;
    let mut evidence = BTreeMap::new();
    verify_new(
        session,
        image,
        collect_objects(&chain).names().map(String::from),
        &mut evidence,
        config,
    )?;
    let steps = score_steps(&chain, &evidence, config.gated_objects);
    let final_answer = extract_final_answer(&chain);
    Ok(BaselineTrace {
        item_id: item_id.to_string(),
        question: question.to_string(),
        prompt,
        scored: ScoredChain::new(chain, steps),
        evidence,
        final_answer,
        calls: session.calls().to_vec(),
    })
}

pub fn run_faithact(
    session: &mut Session<'_>,
    item_id: &str,
    image: &ImageRef,
    question: &str,
    config: &PlanConfig,
) -> Result<PlanTrace, PlanError> {
    let vcfg = &config.verification;
    let initial_prompt = cot_prompt(question);
    let raw = reason_chain(
        session,
        image,
        question,
        &initial_prompt,
        ChainOrigin::FaithactRaw,
    )?;

    let question_objects = if config.verify_question_objects {
        extract_names(session, question)?
    } else {
        Vec::new()
    };

    let mut evidence = BTreeMap::new();
    let raw_names = collect_objects(&raw)
        .names()
        .map(String::from)
        .collect::<Vec<_>>();
    verify_new(
        session,
        image,
        raw_names
            .into_iter()
            .chain(question_objects.iter().cloned()),
        &mut evidence,
        vcfg,
    )?;
    let raw_steps = score_steps(&raw, &evidence, vcfg.gated_objects);
    let raw = ScoredChain::new(raw, raw_steps);

    let mut rounds = Vec::new();
    let mut terminated_by = Termination::MaxRounds;
    for round in 1..=config.max_refine_rounds {
        let dossier = EvidenceDossier::from_records(&evidence);
        let prompt = render_refine_prompt(question, &dossier);
        let chain = reason_chain(
            session,
            image,
            question,
            &prompt,
            ChainOrigin::FaithactRefined,
        )?;
        let refined = if config.reverify_refined {
            verify_new(
                session,
                image,
                collect_objects(&chain).names().map(String::from),
                &mut evidence,
                vcfg,
            )?;
            let steps = score_steps(&chain, &evidence, vcfg.gated_objects);
            ScoredChain::new(chain, steps)
        } else {
            ScoredChain::unscored(chain)
        };
        let met = config.reverify_refined && refined.meets_threshold(config.step_threshold_c);
        rounds.push(RefineRound {
            round,
            dossier,
            prompt,
            refined,
        });
        if met {
            terminated_by = Termination::ThresholdMet;
            break;
        }
        if !config.reverify_refined {
            break;
        }
    }

    let final_answer = extract_final_answer(&rounds.last().unwrap().refined.chain);
    Ok(PlanTrace {
        item_id: item_id.to_string(),
        question: question.to_string(),
        initial_prompt,
        raw,
        question_objects,
        evidence,
        rounds_used: rounds.len() as u32,
        rounds,
        final_answer,
        terminated_by,
        calls: session.calls().to_vec(),
    })
}

/// Names that were abstained on but still claimed by some refined chain.
pub fn containment_violations(trace: &PlanTrace) -> BTreeSet<String> {
    let abstained: BTreeSet<&str> = trace
        .evidence
        .values()
        .filter(|r| r.verdict == Verdict::Abstained)
        .map(|r| r.name.as_str())
        .collect();
    trace
        .rounds
        .iter()
        .flat_map(|r| collect_objects(&r.refined.chain).provenance.into_keys())
        .filter(|n| abstained.contains(n.as_str()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        MockBackend, ReasonerScript, RefinedMode, Scene, SceneNoise, SceneObject,
    };

    fn seg(text: &str) -> ReasoningChain {
        segment_chain(text, ChainOrigin::CotBaseline).unwrap()
    }

    #[test]
    fn final_answer_rules() {
        assert_eq!(
            extract_final_answer(&seg("1. A car.\n\nTherefore, the answer is A.")),
            "A"
        );
        assert_eq!(
            extract_final_answer(&seg("1. A car.\n\n2. A bus.")),
            "A bus."
        );
        assert_eq!(
            extract_final_answer(&seg("Thus, the answer is (C) rightward arrow")),
            "(C) rightward arrow"
        );
    }

    fn dossier() -> EvidenceDossier {
        EvidenceDossier {
            entries: vec![
                DossierEntry {
                    name: "car".into(),
                    verdict: Verdict::Selected,
                    fused_conf: 0.9,
                    boxes: vec![
                        BoundingBox::new(0.1, 0.2, 0.3, 0.4, 0.9).unwrap(),
                        BoundingBox::new(0.5, 0.5, 0.6, 0.7, 0.8).unwrap(),
                    ],
                    count: 2,
                },
                DossierEntry {
                    name: "unicorn".into(),
                    verdict: Verdict::Abstained,
                    fused_conf: 0.1,
                    boxes: vec![],
                    count: 0,
                },
            ],
        }
    }

    #[test]
    fn refine_prompt_layout() {
        let p = render_refine_prompt("What is parked?", &dossier());
        assert_eq!(
            p,
            "Question: What is parked?.\n\nAdditional location information:\n\n\
             - car: exists (confidence 0.90, count 2, boxes [0.10, 0.20, 0.30, 0.40], [0.50, 0.50, 0.60, 0.70])\n\
             - unicorn: does not exist (confidence 0.10)\n\n\
             Using only the \"exists\" objects with high confidence and avoid using objects that do not exist. \
             Do not include new objects or descriptions. Do not repeat the evidences, confidence scores and bounding boxes in your reasoning. \
             Think step by step. Steps should be like: 1.<object1>:xxx\n\n2.<object2>:xxx\n\n...\n\n..., ."
        );
        assert!(is_refine_prompt(&p));
        assert_eq!(abstained_in_prompt(&p), vec!["unicorn"]);
        assert_eq!(p, render_refine_prompt("What is parked?", &dossier()));
    }

    #[test]
    fn empty_dossier_prompt() {
        let p = render_refine_prompt("Q", &EvidenceDossier::default());
        assert!(p.contains("Additional location information:\n\n\n\nUsing only"));
        assert!(is_refine_prompt(&p));
        assert!(abstained_in_prompt(&p).is_empty());
        assert!(!is_refine_prompt(&cot_prompt("Q")));
    }

    fn scene(initial: &str, refined: Option<&str>, mode: RefinedMode) -> Scene {
        let b = |s| BoundingBox::new(0.1, 0.1, 0.4, 0.4, s).unwrap();
        Scene {
            image_id: "park".into(),
            objects: vec![
                SceneObject {
                    name: "car".into(),
                    synonyms: vec![],
                    boxes: vec![b(0.9)],
                    poll_conf: 1.0,
                },
                SceneObject {
                    name: "tree".into(),
                    synonyms: vec![],
                    boxes: vec![b(0.8)],
                    poll_conf: 1.0,
                },
            ],
            absent_default_poll: 0.0,
            noise: SceneNoise::default(),
            script: Some(ReasonerScript {
                initial: initial.into(),
                refined: refined.map(String::from),
                refined_mode: mode,
            }),
        }
    }

    fn img() -> ImageRef {
        ImageRef::Path("park.png".into())
    }

    const HALLUCINATING: &str = "Let's begin reasoning.\n\n1. A <obj:car> is parked.\n\n2. A <obj:dog> sits by the <obj:tree>.\n\nTherefore, the answer is B.";

    #[test]
    fn baseline_scores_raw_chain() {
        let m =
            MockBackend::new([scene(HALLUCINATING, None, RefinedMode::EvidenceAware)], 0).unwrap();
        let mut s = Session::new(&m);
        let t =
            run_cot_baseline(&mut s, "i1", &img(), "Q?", &VerificationConfig::default()).unwrap();
        // step 2: car -> 1; step 3: dog -> 0, tree -> 1
        assert_eq!(t.scored.f_chain, Some((1.0 + 0.5) / 2.0));
        assert_eq!(t.final_answer, "B");
        assert_eq!(
            t.calls.len(),
            t.calls.iter().filter(|c| c.response.is_some()).count()
        );
    }

    #[test]
    fn baseline_without_evidence_is_unscored() {
        let m = MockBackend::new(
            [scene("The answer is B.", None, RefinedMode::EvidenceAware)],
            0,
        )
        .unwrap();
        let mut s = Session::new(&m);
        let t =
            run_cot_baseline(&mut s, "i1", &img(), "Q?", &VerificationConfig::default()).unwrap();
        assert_eq!(t.scored.f_chain, None);
    }

    #[test]
    fn faithact_drops_hallucination() {
        let m =
            MockBackend::new([scene(HALLUCINATING, None, RefinedMode::EvidenceAware)], 0).unwrap();
        let mut s = Session::new(&m);
        let t = run_faithact(&mut s, "i1", &img(), "Q?", &PlanConfig::default()).unwrap();
        assert_eq!(t.raw.f_chain, Some(0.75));
        assert_eq!(t.f_chain(), Some(1.0));
        assert_eq!(t.terminated_by, Termination::ThresholdMet);
        assert_eq!(t.rounds_used, 1);
        assert!(containment_violations(&t).is_empty());
        assert!(t.rounds[0].prompt.contains("- dog: does not exist"));
    }

    #[test]
    fn faithful_chain_stops_after_first_round() {
        let text = "1. A <obj:car>.\n\n2. A <obj:tree>.";
        let m = MockBackend::new([scene(text, None, RefinedMode::EvidenceAware)], 0).unwrap();
        let mut s = Session::new(&m);
        let t = run_faithact(&mut s, "i1", &img(), "Q?", &PlanConfig::default()).unwrap();
        assert_eq!(t.raw.f_chain, Some(1.0));
        assert_eq!(
            (t.rounds_used, t.terminated_by),
            (1, Termination::ThresholdMet)
        );
    }

    #[test]
    fn stubborn_reasoner_exhausts_rounds() {
        let m = MockBackend::new([scene(HALLUCINATING, None, RefinedMode::Verbatim)], 0).unwrap();
        let mut s = Session::new(&m);
        let cfg = PlanConfig {
            max_refine_rounds: 2,
            ..PlanConfig::default()
        };
        let t = run_faithact(&mut s, "i1", &img(), "Q?", &cfg).unwrap();
        assert_eq!(t.terminated_by, Termination::MaxRounds);
        assert_eq!(t.rounds.len(), 2);
        assert!(t.rounds.iter().all(|r| r.refined.f_chain == Some(0.75)));
        assert!(!containment_violations(&t).is_empty());
    }

    #[test]
    fn without_reverification_refined_chain_is_unscored() {
        let m =
            MockBackend::new([scene(HALLUCINATING, None, RefinedMode::EvidenceAware)], 0).unwrap();
        let mut s = Session::new(&m);
        let cfg = PlanConfig {
            reverify_refined: false,
            max_refine_rounds: 3,
            ..PlanConfig::default()
        };
        let t = run_faithact(&mut s, "i1", &img(), "Q?", &cfg).unwrap();
        assert_eq!(t.rounds.len(), 1);
        assert_eq!(t.f_chain(), None);
    }

    #[test]
    fn trace_is_deterministic() {
        let m =
            MockBackend::new([scene(HALLUCINATING, None, RefinedMode::EvidenceAware)], 3).unwrap();
        let run = || {
            let mut s = Session::new(&m);
            serde_json::to_string(
                &run_faithact(&mut s, "i1", &img(), "Q?", &PlanConfig::default()).unwrap(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
