//! Reasoning-chain segmentation and claimed-object extraction.
//!
//! Raw model output is split into ordered steps, each step is labelled as
//! introductory, evidential or concluding, and the helper extractor's reply
//! for every evidential step is parsed into a set of normalized object names.

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("reasoning text is empty")]
    EmptyChain,
    #[error("extractor reply contains no bracketed list: {0:?}")]
    MalformedReply(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainOrigin {
    CotBaseline,
    FaithactRaw,
    FaithactRefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Intro,
    Evidential,
    Concluding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimedObject {
    pub name: String,
    pub step_index: usize,
    pub object_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// 1-based position in the chain.
    pub index: usize,
    pub text: String,
    /// Byte range of `text` inside the chain's source text.
    pub span: Range<usize>,
    pub role: StepRole,
    pub claimed_objects: Vec<ClaimedObject>,
}

impl ReasoningStep {
    pub fn object_names(&self) -> impl Iterator<Item = &str> {
        self.claimed_objects.iter().map(|o| o.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub source_text: String,
    pub steps: Vec<ReasoningStep>,
    pub origin: ChainOrigin,
}

impl ReasoningChain {
    /// Renders the chain back to text as numbered, blank-line separated steps.
    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(|s| format!("{}. {}", s.index, s.text))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Attaches parsed object names to a step, assigning object indices and
    /// dropping duplicates. Non-evidential steps never carry objects.
    pub fn set_step_objects(&mut self, step_index: usize, names: Vec<String>) {
        let Some(step) = self.steps.iter_mut().find(|s| s.index == step_index) else {
            return;
        };
        step.claimed_objects.clear();
        if step.role != StepRole::Evidential {
            return;
        }
        for name in names {
            if step.claimed_objects.iter().any(|o| o.name == name) {
                continue;
            }
            let object_index = step.claimed_objects.len() + 1;
            step.claimed_objects.push(ClaimedObject {
                name,
                step_index,
                object_index,
            });
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectUnion {
    /// Maps each distinct name to its `(step_index, object_index)` sites, in
    /// first-appearance order.
    pub provenance: IndexMap<String, Vec<(usize, usize)>>,
}

impl ObjectUnion {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.provenance.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.provenance.contains_key(name)
    }
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[ \t]*(?:step[ \t]*)?\d+[ \t]*[.):][ \t]*").unwrap())
}

fn blank_line_split() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t\r]*\n").unwrap())
}

/// Trims a byte range of `text` to its non-whitespace content.
fn trim_range(text: &str, range: Range<usize>) -> Option<Range<usize>> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if trimmed.is_empty() {
        return None;
    }
    let start = range.start + lead;
    Some(start..start + trimmed.len())
}

fn paragraphs(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in blank_line_split().find_iter(text) {
        out.extend(trim_range(text, start..m.start()));
        start = m.end();
    }
    out.extend(trim_range(text, start..text.len()));
    out
}

/// Splits a paragraph at numbered-line markers. Returns `None` when the
/// paragraph contains no numbered line.
fn split_numbered(text: &str, para: Range<usize>) -> Option<Vec<Range<usize>>> {
    let mut starts = Vec::new();
    let mut line_start = para.start;
    for line in text[para.clone()].split_inclusive('\n') {
        if let Some(m) = numbered_line().find(line) {
            starts.push((line_start, line_start + m.end()));
        }
        line_start += line.len();
    }
    if starts.is_empty() {
        return None;
    }
    let mut out = Vec::new();
    if starts[0].0 > para.start {
        out.extend(trim_range(text, para.start..starts[0].0));
    }
    for (i, &(_, content_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(para.end, |s| s.0);
        out.extend(trim_range(text, content_start..end));
    }
    Some(out)
}

fn split_sentences(text: &str, para: Range<usize>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut line_start = para.start;
    for line in text[para.clone()].split_inclusive('\n') {
        let mut start = line_start;
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            let at_break = matches!(b, b'.' | b'!' | b'?')
                && bytes.get(i + 1).is_some_and(|n| n.is_ascii_whitespace());
            if at_break {
                let end = line_start + i + 1;
                out.extend(trim_range(text, start..end));
                start = end;
            }
        }
        out.extend(trim_range(text, start..line_start + line.len()));
        line_start += line.len();
    }
    out
}

const OPENERS: &[&str] = &["let's", "let us", "i will", "i'll"];
const CLOSERS: &[&str] = &[
    "therefore",
    "thus",
    "hence",
    "in conclusion",
    "so the answer",
];

fn pattern_text(text: &str) -> String {
    text.trim_start_matches(|c: char| c == '*' || c == '#' || c == '-' || c.is_whitespace())
        .replace('\u{2019}', "'")
        .to_lowercase()
}

fn is_opener(text: &str) -> bool {
    let t = pattern_text(text);
    OPENERS.iter().any(|p| t.starts_with(p))
}

fn is_closer(text: &str) -> bool {
    let t = pattern_text(text);
    CLOSERS.iter().any(|p| t.starts_with(p)) || t.contains("the answer is")
}

/// Where a step sits relative to the chain's head and tail runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    /// Every earlier step is introductory.
    pub at_head: bool,
    /// Every later step is concluding.
    pub at_tail: bool,
}

pub fn classify_step(text: &str, position: Position) -> StepRole {
    if position.at_tail && is_closer(text) {
        StepRole::Concluding
    } else if position.at_head && is_opener(text) {
        StepRole::Intro
    } else {
        StepRole::Evidential
    }
}

pub fn segment_chain(text: &str, origin: ChainOrigin) -> Result<ReasoningChain, ExtractionError> {
    if text.trim().is_empty() {
        return Err(ExtractionError::EmptyChain);
    }
    let paras = paragraphs(text);
    let mut numbered = false;
    let mut ranges = Vec::new();
    for para in &paras {
        match split_numbered(text, para.clone()) {
            Some(parts) => {
                numbered = true;
                ranges.extend(parts);
            }
            None => ranges.push(para.clone()),
        }
    }
    if !numbered && paras.len() == 1 {
        ranges = split_sentences(text, paras[0].clone());
    }

    let mut steps: Vec<ReasoningStep> = ranges
        .into_iter()
        .enumerate()
        .map(|(i, span)| ReasoningStep {
            index: i + 1,
            text: text[span.clone()].to_string(),
            span,
            role: StepRole::Evidential,
            claimed_objects: Vec::new(),
        })
        .collect();

    // Tail first so a lone closing sentence is concluding, then the head run.
    let n = steps.len();
    let mut tail_start = n;
    for i in (0..n).rev() {
        let pos = Position {
            at_head: i == 0,
            at_tail: true,
        };
        if classify_step(&steps[i].text, pos) == StepRole::Concluding {
            steps[i].role = StepRole::Concluding;
            tail_start = i;
        } else {
            break;
        }
    }
    for step in steps.iter_mut().take(tail_start) {
        let pos = Position {
            at_head: true,
            at_tail: false,
        };
        if classify_step(&step.text, pos) == StepRole::Intro {
            step.role = StepRole::Intro;
        } else {
            break;
        }
    }

    Ok(ReasoningChain {
        source_text: text.to_string(),
        steps,
        origin,
    })
}

pub const EXTRACTION_PROMPT_HEAD: &str = "Extract all objects mentioned in the following sentence that may occur in an image. Only extract nouns meaning objects, not abstract adjectives, concepts, actions, general nouns or locations. Do not include non-object nouns or words like \"Image\", \"Object\", \"Feature\", or \"Photo\".\n\n###";
pub const EXTRACTION_PROMPT_TAIL: &str = "###\n\nReturn only a list of nouns like [\"xxx\", \"xxx\", \"xxx\"] and do not include any other things. If no available nouns, return an empty list [].";

/// Replaces every `###` run so the step cannot close the prompt's delimiter.
pub fn escape_delimiters(step_text: &str) -> String {
    let mut s = step_text.to_string();
    while s.contains("###") {
        s = s.replace("###", "# # #");
    }
    s
}

/// # Panics
/// If `step_text` is empty.
pub fn render_extraction_prompt(step_text: &str) -> String {
    assert!(!step_text.is_empty(), "extraction prompt needs a step");
    format!(
        "{EXTRACTION_PROMPT_HEAD}{}{EXTRACTION_PROMPT_TAIL}",
        escape_delimiters(step_text)
    )
}

pub const BLOCKED_NAMES: &[&str] = &["image", "object", "feature", "photo"];

pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.contains(['[', ']', '"', ',', '\u{201c}', '\u{201d}'])
        && !BLOCKED_NAMES.contains(&name)
}

fn finish(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for raw in items {
        let name = normalize_name(raw.trim_matches(|c: char| c == '\'' || c.is_whitespace()));
        if is_valid_name(&name) && !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

/// Tokenizes the inside of a bracketed list, accepting straight, single or
/// curly quotes and bare comma-separated items.
fn lenient_items(inner: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(&first) = chars.peek() else { break };
        let close = match first {
            '"' => Some('"'),
            '\'' => Some('\''),
            '\u{201c}' => Some('\u{201d}'),
            '\u{2018}' => Some('\u{2019}'),
            _ => None,
        };
        let mut item = String::new();
        match close {
            Some(close) => {
                chars.next();
                for c in chars.by_ref() {
                    if c == close {
                        break;
                    }
                    item.push(c);
                }
            }
            None => {
                while let Some(&c) = chars.peek() {
                    if c == ',' {
                        break;
                    }
                    item.push(c);
                    chars.next();
                }
            }
        }
        items.push(item);
    }
    items
}

pub fn parse_object_list(reply: &str) -> Result<Vec<String>, ExtractionError> {
    let trimmed = reply.trim();
    if let Ok(items) = serde_json::from_str::<Vec<String>>(trimmed) {
        return Ok(finish(items));
    }
    let (Some(open), Some(close)) = (trimmed.find('['), trimmed.rfind(']')) else {
        return Err(ExtractionError::MalformedReply(reply.to_string()));
    };
    if close < open {
        return Err(ExtractionError::MalformedReply(reply.to_string()));
    }
    let slice = &trimmed[open..=close];
    if let Ok(items) = serde_json::from_str::<Vec<String>>(slice) {
        return Ok(finish(items));
    }
    Ok(finish(lenient_items(&slice[1..slice.len() - 1])))
}

/// Collects the union of claimed objects over evidential steps.
pub fn collect_objects(chain: &ReasoningChain) -> ObjectUnion {
    let mut union = ObjectUnion::default();
    for step in chain
        .steps
        .iter()
        .filter(|s| s.role == StepRole::Evidential)
    {
        for obj in &step.claimed_objects {
            union
                .provenance
                .entry(obj.name.clone())
                .or_default()
                .push((obj.step_index, obj.object_index));
        }
    }
    union
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(text: &str) -> ReasoningChain {
        segment_chain(text, ChainOrigin::CotBaseline).unwrap()
    }

    #[test]
    fn numbered_steps_in_refine_format() {
        let chain = seg("1.<object1>:xxx\n\n2.<object2>:yyy");
        let idx: Vec<_> = chain.steps.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(chain.steps[0].text, "<object1>:xxx");
        assert_eq!(chain.steps[1].text, "<object2>:yyy");
    }

    #[test]
    fn single_sentence() {
        let chain = seg("Only one sentence.");
        assert_eq!(chain.steps.len(), 1);
        assert_eq!(chain.steps[0].index, 1);
        assert_eq!(chain.steps[0].role, StepRole::Evidential);
    }

    #[test]
    fn roles_for_intro_evidence_conclusion() {
        let chain =
            seg("Let's begin reasoning.\n\n1. The car is red.\n\nTherefore, the answer is A.");
        let roles: Vec<_> = chain.steps.iter().map(|s| s.role).collect();
        assert_eq!(
            roles,
            vec![StepRole::Intro, StepRole::Evidential, StepRole::Concluding]
        );
    }

    #[test]
    fn numbered_variants() {
        let chain = seg("Step 1: a cat\nStep 2: a dog\n3) a bird");
        let texts: Vec<_> = chain.steps.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["a cat", "a dog", "a bird"]);
    }

    #[test]
    fn decimals_do_not_split_sentences() {
        let chain = seg("The score is 0.9 here. A car is parked.");
        assert_eq!(chain.steps.len(), 2);
        assert_eq!(chain.steps[0].text, "The score is 0.9 here.");
    }

    #[test]
    fn empty_text_rejected() {
        assert_eq!(
            segment_chain(" \n\t ", ChainOrigin::CotBaseline),
            Err(ExtractionError::EmptyChain)
        );
    }

    #[test]
    fn spans_point_into_source() {
        let chain = seg("Intro text here.\n\n1. first\n2. second\n\nDone now.");
        let mut last = 0;
        for s in &chain.steps {
            assert!(s.span.start >= last);
            assert_eq!(&chain.source_text[s.span.clone()], s.text);
            last = s.span.end;
        }
    }

    #[test]
    fn classify_examples() {
        let head = Position {
            at_head: true,
            at_tail: false,
        };
        let tail = Position {
            at_head: false,
            at_tail: true,
        };
        let mid = Position {
            at_head: false,
            at_tail: false,
        };
        assert_eq!(
            classify_step("Let's begin reasoning", head),
            StepRole::Intro
        );
        assert_eq!(
            classify_step("Therefore, the answer is A", tail),
            StepRole::Concluding
        );
        assert_eq!(
            classify_step("There are two cars near the curb.", mid),
            StepRole::Evidential
        );
        // patterns only count at the ends of the chain
        assert_eq!(
            classify_step("Let's look at the car", mid),
            StepRole::Evidential
        );
        assert_eq!(
            classify_step("Thus the car is red", mid),
            StepRole::Evidential
        );
    }

    #[test]
    fn lone_answer_is_concluding() {
        let chain = seg("The answer is B.");
        assert_eq!(chain.steps.len(), 1);
        assert_eq!(chain.steps[0].role, StepRole::Concluding);
    }

    #[test]
    fn prompt_slot() {
        let p = render_extraction_prompt("The car is red.");
        assert!(p.contains("###The car is red.###"));
        assert!(p.starts_with("Extract all objects mentioned in the following sentence"));
        assert!(p.ends_with("If no available nouns, return an empty list []."));
        assert_eq!(p, render_extraction_prompt("The car is red."));
    }

    #[test]
    fn prompt_escapes_delimiters() {
        for step in ["a ### b", "####", "x######y"] {
            let p = render_extraction_prompt(step);
            assert_eq!(p.matches("###").count(), 2, "{p}");
            let slot = &p[EXTRACTION_PROMPT_HEAD.len()..p.len() - EXTRACTION_PROMPT_TAIL.len()];
            assert_eq!(slot, escape_delimiters(step));
            assert_eq!(slot.replace(' ', ""), step.replace(' ', ""));
        }
    }

    #[test]
    #[should_panic]
    fn prompt_rejects_empty_step() {
        render_extraction_prompt("");
    }

    #[test]
    fn parse_reference_replies() {
        assert_eq!(
            parse_object_list(r#"["coastal area", "beach", "city"]"#).unwrap(),
            vec!["coastal area", "beach", "city"]
        );
        assert_eq!(
            parse_object_list(r#"["taxis", "buildings"]"#).unwrap(),
            vec!["taxis", "buildings"]
        );
        assert!(parse_object_list("[]").unwrap().is_empty());
    }

    #[test]
    fn parse_lenient_forms() {
        assert_eq!(
            parse_object_list(
                "Sure! Here you go: ['Red  Car', \u{201c}Bus\u{201d}, tree] hope it helps"
            )
            .unwrap(),
            vec!["red car", "bus", "tree"]
        );
        assert_eq!(
            parse_object_list(r#"["car", "Car", " car "]"#).unwrap(),
            vec!["car"]
        );
        assert_eq!(
            parse_object_list(r#"["Image", "photo", "dog"]"#).unwrap(),
            vec!["dog"]
        );
    }

    #[test]
    fn parse_rejects_missing_list() {
        assert!(matches!(
            parse_object_list("no objects here"),
            Err(ExtractionError::MalformedReply(_))
        ));
        assert!(matches!(
            parse_object_list("] backwards ["),
            Err(ExtractionError::MalformedReply(_))
        ));
    }

    fn chain_with(objects: &[&[&str]]) -> ReasoningChain {
        let text = objects
            .iter()
            .enumerate()
            .map(|(i, _)| format!("{}. step {}", i + 1, i + 1))
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut chain = seg(&text);
        for (i, names) in objects.iter().enumerate() {
            chain.set_step_objects(i + 1, names.iter().map(|s| s.to_string()).collect());
        }
        chain
    }

    #[test]
    fn union_examples() {
        let u = collect_objects(&chain_with(&[&["car"], &["car", "bus"]]));
        assert_eq!(u.names().collect::<Vec<_>>(), vec!["car", "bus"]);
        assert_eq!(u.provenance["car"], vec![(1, 1), (2, 1)]);

        assert!(collect_objects(&chain_with(&[&[], &[]])).is_empty());

        let u = collect_objects(&chain_with(&[&["a", "b"], &["c", "d"], &["e", "f"]]));
        assert_eq!(u.len(), 6);
    }

    #[test]
    fn non_evidential_steps_hold_no_objects() {
        let mut chain = seg("Let's begin.\n\n1. A car.\n\nTherefore, the answer is A.");
        chain.set_step_objects(1, vec!["car".into()]);
        chain.set_step_objects(2, vec!["car".into()]);
        chain.set_step_objects(3, vec!["bus".into()]);
        let u = collect_objects(&chain);
        assert_eq!(u.names().collect::<Vec<_>>(), vec!["car"]);
        assert_eq!(u.provenance["car"], vec![(2, 1)]);
    }
}
