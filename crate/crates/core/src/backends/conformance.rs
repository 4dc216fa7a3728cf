//! Wire-contract checks that any backend, mock or live, must pass.

use super::{validate_response, Backend, ImageRef, Request, Response};
use crate::extraction::parse_object_list;

/// Inputs for one conformance run.
#[derive(Debug, Clone)]
pub struct Probe {
    pub image: ImageRef,
    /// An object the image contains.
    pub present: String,
    /// An object the image does not contain.
    pub absent: String,
    pub extract_text: String,
    /// Names the extractor must return for `extract_text` (a subset check).
    pub expected_objects: Vec<String>,
    pub question: String,
}

fn exchange(backend: &dyn Backend, req: Request, failures: &mut Vec<String>) -> Option<Response> {
    let endpoint = req.endpoint();
    match backend.call(&req) {
        Ok(ex) => match validate_response(&req, &ex.response) {
            Ok(()) => Some(ex.response),
            Err(e) => {
                failures.push(e.to_string());
                None
            }
        },
        Err(e) => {
            failures.push(format!("{endpoint}: {e}"));
            None
        }
    }
}

/// Runs every check and returns the failures; empty means conformant.
pub fn check(
    backend: &dyn Backend,
    probe: &Probe,
    box_threshold: f64,
    text_threshold: f64,
) -> Vec<String> {
    let mut failures = Vec::new();

    for object in [&probe.present, &probe.absent] {
        exchange(
            backend,
            Request::Poll {
                image: probe.image.clone(),
                object: object.clone(),
            },
            &mut failures,
        );
    }

    for threshold in [box_threshold, 0.99] {
        let resp = exchange(
            backend,
            Request::Ground {
                image: probe.image.clone(),
                object: probe.present.clone(),
                box_threshold: threshold,
                text_threshold,
            },
            &mut failures,
        );
        if let Some(Response::Ground { boxes }) = resp {
            if let Some(b) = boxes.iter().find(|b| b.score < threshold) {
                failures.push(format!(
                    "/ground returned score {} below threshold {threshold}",
                    b.score
                ));
            }
        }
    }

    let resp = exchange(
        backend,
        Request::Extract {
            text: probe.extract_text.clone(),
            prompt: crate::extraction::render_extraction_prompt(&probe.extract_text),
        },
        &mut failures,
    );
    if let Some(Response::Extract { reply }) = resp {
        match parse_object_list(&reply) {
            Ok(names) => {
                for want in &probe.expected_objects {
                    if !names.contains(want) {
                        failures.push(format!("/extract missed {want:?} (got {names:?})"));
                    }
                }
            }
            Err(e) => failures.push(format!("/extract: {e}")),
        }
    }

    exchange(
        backend,
        Request::Reason {
            image: probe.image.clone(),
            question: probe.question.clone(),
            prompt: crate::planner::cot_prompt(&probe.question),
        },
        &mut failures,
    );

    failures
}
