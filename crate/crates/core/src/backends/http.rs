use super::{Backend, BackendError, Endpoint, Exchange, ImageRef, Request, Response};
use crate::evidence::BoundingBox;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_base_ms: 250,
            max_in_flight: 8,
        }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum WireRequest<'a> {
    Poll {
        image: &'a ImageRef,
        object: &'a str,
    },
    Ground {
        image: &'a ImageRef,
        object: &'a str,
        box_threshold: f64,
        text_threshold: f64,
    },
    Extract {
        text: &'a str,
    },
    Reason {
        image: &'a ImageRef,
        question: &'a str,
        prompt: &'a str,
    },
}

impl<'a> From<&'a Request> for WireRequest<'a> {
    fn from(req: &'a Request) -> Self {
        match req {
            Request::Poll { image, object } => WireRequest::Poll { image, object },
            Request::Ground {
                image,
                object,
                box_threshold,
                text_threshold,
            } => WireRequest::Ground {
                image,
                object,
                box_threshold: *box_threshold,
                text_threshold: *text_threshold,
            },
            Request::Extract { text, .. } => WireRequest::Extract { text },
            Request::Reason {
                image,
                question,
                prompt,
            } => WireRequest::Reason {
                image,
                question,
                prompt,
            },
        }
    }
}

#[derive(Deserialize)]
struct PollBody {
    confidence: f64,
}

#[derive(Deserialize)]
struct GroundBody {
    boxes: Vec<BoundingBox>,
}

#[derive(Deserialize)]
struct ExtractBody {
    objects: Vec<String>,
}

#[derive(Deserialize)]
struct ReasonBody {
    text: String,
}

/// Decodes a response body for `endpoint`. Any shape mismatch is a schema
/// violation.
pub(crate) fn decode_body(endpoint: Endpoint, body: &[u8]) -> Result<Response, BackendError> {
    let violation = |e: serde_json::Error| BackendError::SchemaViolation {
        endpoint,
        message: e.to_string(),
    };
    Ok(match endpoint {
        Endpoint::Poll => {
            let b: PollBody = serde_json::from_slice(body).map_err(violation)?;
            Response::Poll {
                confidence: b.confidence,
            }
        }
        Endpoint::Ground => {
            let b: GroundBody = serde_json::from_slice(body).map_err(violation)?;
            Response::Ground { boxes: b.boxes }
        }
        Endpoint::Extract => {
            let b: ExtractBody = serde_json::from_slice(body).map_err(violation)?;
            Response::Extract {
                reply: serde_json::to_string(&b.objects).unwrap(),
            }
        }
        Endpoint::Reason => {
            let b: ReasonBody = serde_json::from_slice(body).map_err(violation)?;
            Response::Reason { text: b.text }
        }
    })
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(Result<Response, BackendError>),
    Retry(String),
}

/// JSON-over-HTTP client for a model service implementing the four
/// endpoints.
pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
    in_flight: Semaphore,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, String> {
        if config.base_url.is_empty() {
            return Err("http backend requires a base url".into());
        }
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        let in_flight = Semaphore {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Ok(Self {
            config,
            client,
            in_flight,
        })
    }

    fn url(&self, endpoint: Endpoint) -> String {
        format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            endpoint.path()
        )
    }

    fn attempt(&self, request: &Request) -> Attempt {
        let endpoint = request.endpoint();
        let _permit = self.in_flight.acquire();
        let sent = self
            .client
            .post(self.url(endpoint))
            .json(&WireRequest::from(request))
            .send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retry(format!("status {status}"));
        }
        let body = match resp.bytes() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if !status.is_success() {
            return Attempt::Done(Err(BackendError::Unavailable {
                endpoint,
                attempts: 0,
                message: format!("status {status}: {}", String::from_utf8_lossy(&body)),
            }));
        }
        Attempt::Done(decode_body(endpoint, &body))
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &Request) -> Result<Exchange, BackendError> {
        let endpoint = request.endpoint();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Attempt::Done(Ok(response)) => return Ok(Exchange { response, attempts }),
                Attempt::Done(Err(BackendError::Unavailable { message, .. })) => {
                    return Err(BackendError::Unavailable {
                        endpoint,
                        attempts,
                        message,
                    })
                }
                Attempt::Done(Err(e)) => return Err(e),
                Attempt::Retry(message) => {
                    if attempts > self.config.max_retries {
                        return Err(BackendError::Unavailable {
                            endpoint,
                            attempts,
                            message,
                        });
                    }
                    let delay = self.config.backoff_base_ms << (attempts - 1).min(16);
                    log::debug!(
                        "{endpoint} attempt {attempts} failed ({message}); retrying in {delay}ms"
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}
