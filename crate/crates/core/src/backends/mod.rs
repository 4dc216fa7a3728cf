//! Model backend contracts.
//!
//! The engine talks to four services: a reasoner (the MLLM), an extractor
//! (the helper LLM that lists claimed objects), a poller (existence
//! confidence) and a grounder (phrase detection). All four go through one
//! [`Backend::call`] surface so that mock and HTTP implementations share a
//! schema and every exchange can be recorded into an episode trace.

pub mod conformance;
mod http;
mod mock;
mod scene;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{mock_extract, mock_ground, mock_poll, MockBackend};
pub use scene::{ReasonerScript, RefinedMode, Scene, SceneNoise, SceneObject};

use crate::evidence::BoundingBox;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{endpoint} unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        endpoint: Endpoint,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint} response violates schema: {message}")]
    SchemaViolation { endpoint: Endpoint, message: String },
    #[error("no scene for image {0:?}")]
    UnknownImage(String),
    #[error("no reasoner script for image {0:?}")]
    MissingScript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Poll,
    Ground,
    Extract,
    Reason,
}

impl Endpoint {
    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Poll => "/poll",
            Endpoint::Ground => "/ground",
            Endpoint::Extract => "/extract",
            Endpoint::Reason => "/reason",
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.path())
    }
}

/// An image passed opaquely to backends, either by path or inline base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRef {
    Path(String),
    B64(String),
}

impl ImageRef {
    /// The scene key for mock backends: the file stem of a path reference.
    pub fn image_id(&self) -> Option<&str> {
        match self {
            ImageRef::Path(p) => Path::new(p).file_stem().and_then(|s| s.to_str()),
            ImageRef::B64(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "endpoint", rename_all = "snake_case")]
pub enum Request {
    Poll {
        image: ImageRef,
        object: String,
    },
    Ground {
        image: ImageRef,
        object: String,
        box_threshold: f64,
        text_threshold: f64,
    },
    /// `prompt` is the rendered extraction prompt; only `text` goes on the wire.
    Extract {
        text: String,
        prompt: String,
    },
    Reason {
        image: ImageRef,
        question: String,
        prompt: String,
    },
}

impl Request {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Request::Poll { .. } => Endpoint::Poll,
            Request::Ground { .. } => Endpoint::Ground,
            Request::Extract { .. } => Endpoint::Extract,
            Request::Reason { .. } => Endpoint::Reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "endpoint", rename_all = "snake_case")]
pub enum Response {
    Poll {
        confidence: f64,
    },
    Ground {
        boxes: Vec<BoundingBox>,
    },
    /// Raw extractor reply: a bracketed list of quoted names.
    Extract {
        reply: String,
    },
    Reason {
        text: String,
    },
}

impl Response {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Response::Poll { .. } => Endpoint::Poll,
            Response::Ground { .. } => Endpoint::Ground,
            Response::Extract { .. } => Endpoint::Extract,
            Response::Reason { .. } => Endpoint::Reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub response: Response,
    pub attempts: u32,
}

pub trait Backend: Send + Sync {
    fn call(&self, request: &Request) -> Result<Exchange, BackendError>;
}

/// Range and shape checks shared by every backend implementation.
pub fn validate_response(request: &Request, response: &Response) -> Result<(), BackendError> {
    let endpoint = request.endpoint();
    let violation = |message: String| BackendError::SchemaViolation { endpoint, message };
    if response.endpoint() != endpoint {
        return Err(violation(format!("got a {} response", response.endpoint())));
    }
    match response {
        Response::Poll { confidence } => {
            if !(0.0..=1.0).contains(confidence) {
                return Err(violation(format!("confidence {confidence} outside [0,1]")));
            }
        }
        Response::Ground { boxes } => {
            for b in boxes {
                b.validate().map_err(violation)?;
            }
        }
        Response::Extract { .. } | Response::Reason { .. } => {}
    }
    Ok(())
}

/// One backend exchange as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub request: Request,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<Response>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
}

/// A recording view over a backend, owned by a single episode.
pub struct Session<'a> {
    backend: &'a dyn Backend,
    calls: Vec<CallRecord>,
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self {
            backend,
            calls: Vec::new(),
        }
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }

    pub fn into_calls(self) -> Vec<CallRecord> {
        self.calls
    }

    fn exchange(&mut self, request: Request) -> Result<Response, BackendError> {
        let result = self
            .backend
            .call(&request)
            .and_then(|ex| validate_response(&request, &ex.response).map(|_| ex));
        match result {
            Ok(ex) => {
                self.calls.push(CallRecord {
                    request,
                    response: Some(ex.response.clone()),
                    error: None,
                    attempts: ex.attempts,
                });
                Ok(ex.response)
            }
            Err(err) => {
                let attempts = match &err {
                    BackendError::Unavailable { attempts, .. } => *attempts,
                    _ => 1,
                };
                self.calls.push(CallRecord {
                    request,
                    response: None,
                    error: Some(err.to_string()),
                    attempts,
                });
                Err(err)
            }
        }
    }

    pub fn poll(&mut self, image: &ImageRef, object: &str) -> Result<f64, BackendError> {
        match self.exchange(Request::Poll {
            image: image.clone(),
            object: object.to_string(),
        })? {
            Response::Poll { confidence } => Ok(confidence),
            _ => unreachable!("validated"),
        }
    }

    pub fn ground(
        &mut self,
        image: &ImageRef,
        object: &str,
        box_threshold: f64,
        text_threshold: f64,
    ) -> Result<Vec<BoundingBox>, BackendError> {
        match self.exchange(Request::Ground {
            image: image.clone(),
            object: object.to_string(),
            box_threshold,
            text_threshold,
        })? {
            Response::Ground { boxes } => Ok(boxes),
            _ => unreachable!("validated"),
        }
    }

    pub fn extract(&mut self, text: &str) -> Result<String, BackendError> {
        match self.exchange(Request::Extract {
            text: text.to_string(),
            prompt: crate::extraction::render_extraction_prompt(text),
        })? {
            Response::Extract { reply } => Ok(reply),
            _ => unreachable!("validated"),
        }
    }

    pub fn reason(
        &mut self,
        image: &ImageRef,
        question: &str,
        prompt: &str,
    ) -> Result<String, BackendError> {
        match self.exchange(Request::Reason {
            image: image.clone(),
            question: question.to_string(),
            prompt: prompt.to_string(),
        })? {
            Response::Reason { text } => Ok(text),
            _ => unreachable!("validated"),
        }
    }
}
