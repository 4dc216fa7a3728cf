//! An in-process model service that speaks the JSON wire protocol, answering
//! from a [`MockBackend`] with injectable faults.

#![allow(dead_code)]

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::post;
use axum::{Json, Router};
use faithkit::backends::{
    Backend, HttpBackend, HttpConfig, ImageRef, MockBackend, Request, Response,
};
use faithkit::extraction::parse_object_list;
use serde::Deserialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn golden_mock(seed: u64) -> MockBackend {
    MockBackend::from_dir(&fixtures().join("golden/scenes"), seed).unwrap()
}

#[derive(Default)]
pub struct Faults {
    /// Respond 503 to this many requests before behaving.
    pub unavailable: AtomicU32,
    /// Stall this many requests by `stall_ms` before answering.
    pub stalls: AtomicU32,
    pub stall_ms: AtomicU64,
    /// Rename `confidence` in poll replies.
    pub drop_confidence: AtomicBool,
    /// Always answer 500 for this image id.
    pub poisoned_image: Mutex<Option<String>>,
    /// Answer 400 to everything.
    pub reject_all: AtomicBool,
    pub requests: AtomicU32,
}

fn take(counter: &AtomicU32) -> bool {
    counter
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
}

struct Shared {
    mock: MockBackend,
    faults: Arc<Faults>,
}

#[derive(Deserialize)]
struct PollIn {
    image: ImageRef,
    object: String,
}

#[derive(Deserialize)]
struct GroundIn {
    image: ImageRef,
    object: String,
    box_threshold: f64,
    text_threshold: f64,
}

#[derive(Deserialize)]
struct ExtractIn {
    text: String,
}

#[derive(Deserialize)]
struct ReasonIn {
    image: ImageRef,
    question: String,
    prompt: String,
}

fn image_of(req: &Request) -> Option<&ImageRef> {
    match req {
        Request::Poll { image, .. }
        | Request::Ground { image, .. }
        | Request::Reason { image, .. } => Some(image),
        Request::Extract { .. } => None,
    }
}

async fn serve(shared: &Shared, req: Request) -> HttpResponse {
    let f = &shared.faults;
    f.requests.fetch_add(1, Ordering::SeqCst);
    if take(&f.stalls) {
        tokio::time::sleep(Duration::from_millis(f.stall_ms.load(Ordering::SeqCst))).await;
    }
    if f.reject_all.load(Ordering::SeqCst) {
        return (StatusCode::BAD_REQUEST, "rejected").into_response();
    }
    if take(&f.unavailable) {
        return (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response();
    }
    let poisoned = f.poisoned_image.lock().unwrap().clone();
    if let (Some(p), Some(img)) = (poisoned, image_of(&req)) {
        if img.image_id() == Some(p.as_str()) {
            return (StatusCode::INTERNAL_SERVER_ERROR, "crashed").into_response();
        }
    }
    let response = match shared.mock.call(&req) {
        Ok(ex) => ex.response,
        Err(e) => return (StatusCode::NOT_FOUND, e.to_string()).into_response(),
    };
    let body: Value = match response {
        Response::Poll { confidence } if f.drop_confidence.load(Ordering::SeqCst) => {
            json!({ "conf": confidence })
        }
        Response::Poll { confidence } => json!({ "confidence": confidence }),
        Response::Ground { boxes } => json!({ "boxes": boxes }),
        Response::Extract { reply } => {
            json!({ "objects": parse_object_list(&reply).unwrap_or_default() })
        }
        Response::Reason { text } => json!({ "text": text }),
    };
    Json(body).into_response()
}

pub struct Sidecar {
    pub url: String,
    pub faults: Arc<Faults>,
}

impl Sidecar {
    pub fn start(mock: MockBackend) -> Self {
        let faults = Arc::new(Faults::default());
        let shared = Arc::new(Shared {
            mock,
            faults: faults.clone(),
        });
        let app = Router::new()
            .route(
                "/poll",
                post(
                    |State(s): State<Arc<Shared>>, Json(b): Json<PollIn>| async move {
                        serve(
                            &s,
                            Request::Poll {
                                image: b.image,
                                object: b.object,
                            },
                        )
                        .await
                    },
                ),
            )
            .route(
                "/ground",
                post(
                    |State(s): State<Arc<Shared>>, Json(b): Json<GroundIn>| async move {
                        let req = Request::Ground {
                            image: b.image,
                            object: b.object,
                            box_threshold: b.box_threshold,
                            text_threshold: b.text_threshold,
                        };
                        serve(&s, req).await
                    },
                ),
            )
            .route(
                "/extract",
                post(
                    |State(s): State<Arc<Shared>>, Json(b): Json<ExtractIn>| async move {
                        serve(
                            &s,
                            Request::Extract {
                                text: b.text,
                                prompt: String::new(),
                            },
                        )
                        .await
                    },
                ),
            )
            .route(
                "/reason",
                post(
                    |State(s): State<Arc<Shared>>, Json(b): Json<ReasonIn>| async move {
                        let req = Request::Reason {
                            image: b.image,
                            question: b.question,
                            prompt: b.prompt,
                        };
                        serve(&s, req).await
                    },
                ),
            )
            .with_state(shared);

        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Sidecar {
            url: format!("http://{addr}"),
            faults,
        }
    }

    pub fn client(&self, tweak: impl FnOnce(&mut HttpConfig)) -> HttpBackend {
        let mut cfg = HttpConfig::new(&self.url);
        cfg.backoff_base_ms = 5;
        tweak(&mut cfg);
        HttpBackend::new(cfg).unwrap()
    }
}
