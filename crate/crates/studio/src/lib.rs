//! HTTP front end for single-pass dual-intent inpainting.
//!
//! `POST /api/inpaint` takes a multipart form with `image` (PNG), `intent`
//! (single-channel PNG, 0 = removal, 128 = none, 255 = creation) and optional
//! `w`, `steps`, `seed` and `sampler` fields. A success returns the result as
//! `image/png` with `x-seed`, `x-elapsed-ms` and `x-request-echo` headers;
//! failures return JSON `{"error": ..., "status": ...}`.
//!
//! `GET /api/health` reports the loaded checkpoint hash and model config.
//! Inference runs on a single worker thread in arrival order.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intentfill::checkpoint::load_checkpoint_with_digest;
use intentfill::pipeline::InpaintModel;
use intentfill::{wire, Checkpoint, GuidanceConfig, Sampler, TernaryIntentMask, Tensor};
use serde::Serialize;
use serde_json::json;
use tokio::sync::oneshot;

#[derive(Debug, thiserror::Error)]
pub enum StudioError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no checkpoint loaded")]
    NoCheckpoint,
    #[error("queue full ({0} requests waiting)")]
    Busy(usize),
    #[error("inference failed: {0}")]
    Inference(String),
}

impl StudioError {
    fn status(&self) -> StatusCode {
        match self {
            StudioError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StudioError::NoCheckpoint => StatusCode::CONFLICT,
            StudioError::Busy(_) => StatusCode::SERVICE_UNAVAILABLE,
            StudioError::Inference(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(json!({ "error": self.to_string(), "status": status.as_u16() }))).into_response()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StudioConfig {
    /// Requests allowed to wait behind the one being served.
    pub max_queue: usize,
    pub max_upload_bytes: usize,
}

impl Default for StudioConfig {
    fn default() -> Self {
        Self {
            max_queue: 8,
            max_upload_bytes: 16 << 20,
        }
    }
}

struct Loaded {
    model: InpaintModel,
    checkpoint_id: String,
}

struct Job {
    model: Arc<Loaded>,
    image: Tensor<f32>,
    intent: TernaryIntentMask,
    guidance: GuidanceConfig,
    reply: oneshot::Sender<Result<Vec<u8>, StudioError>>,
}

/// Pauses the worker between jobs; only used to make queueing observable.
#[derive(Default)]
struct Gate {
    closed: Mutex<bool>,
    cv: Condvar,
}

impl Gate {
    fn wait(&self) {
        let mut closed = self.closed.lock().expect("gate lock");
        while *closed {
            closed = self.cv.wait(closed).expect("gate lock");
        }
    }

    fn set(&self, closed: bool) {
        *self.closed.lock().expect("gate lock") = closed;
        self.cv.notify_all();
    }
}

struct Shared {
    config: StudioConfig,
    loaded: RwLock<Option<Arc<Loaded>>>,
    queued: AtomicUsize,
    jobs: Mutex<mpsc::Sender<Job>>,
    gate: Arc<Gate>,
}

/// Service state. Cloning shares the same model and worker.
#[derive(Clone)]
pub struct Studio {
    shared: Arc<Shared>,
}

fn run_job(job: &Job) -> Result<Vec<u8>, StudioError> {
    let out = job
        .model
        .model
        .inpaint(&job.image, &job.intent, &job.guidance)
        .map_err(|e| StudioError::Inference(e.to_string()))?;
    wire::encode_rgb(&out).map_err(|e| StudioError::Inference(e.to_string()))
}

impl Studio {
    pub fn new(config: StudioConfig) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let gate = Arc::new(Gate::default());
        let shared = Arc::new(Shared {
            config,
            loaded: RwLock::new(None),
            queued: AtomicUsize::new(0),
            jobs: Mutex::new(tx),
            gate: gate.clone(),
        });
        let weak = Arc::downgrade(&shared);
        std::thread::Builder::new()
            .name("inpaint-worker".into())
            .spawn(move || {
                while let Ok(job) = rx.recv() {
                    gate.wait();
                    if let Some(s) = weak.upgrade() {
                        s.queued.fetch_sub(1, Ordering::SeqCst);
                    }
                    let result = run_job(&job);
                    let _ = job.reply.send(result);
                }
            })
            .expect("spawn worker thread");
        Self { shared }
    }

    pub fn load_checkpoint(&self, path: &Path) -> intentfill::Result<String> {
        let (ckpt, digest) = load_checkpoint_with_digest(path)?;
        self.install(&ckpt, digest.clone())?;
        Ok(digest)
    }

    /// Installs an in-memory checkpoint under the given identifier.
    pub fn install(&self, ckpt: &Checkpoint, checkpoint_id: String) -> intentfill::Result<()> {
        let loaded = Arc::new(Loaded {
            model: InpaintModel::from_checkpoint(ckpt)?,
            checkpoint_id,
        });
        *self.shared.loaded.write().expect("model lock") = Some(loaded);
        Ok(())
    }

    /// Requests accepted but not yet picked up by the worker.
    pub fn queue_depth(&self) -> usize {
        self.shared.queued.load(Ordering::SeqCst)
    }

    #[doc(hidden)]
    pub fn pause_worker(&self) {
        self.shared.gate.set(true);
    }

    #[doc(hidden)]
    pub fn resume_worker(&self) {
        self.shared.gate.set(false);
    }

    fn current(&self) -> Option<Arc<Loaded>> {
        self.shared.loaded.read().expect("model lock").clone()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/health", get(health))
            .route("/api/inpaint", post(inpaint))
            .layer(DefaultBodyLimit::max(self.shared.config.max_upload_bytes))
            .with_state(self.clone())
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    checkpoint_id: String,
    model_config: Option<intentfill::nn::DenoiserConfig>,
}

async fn health(State(studio): State<Studio>) -> Json<Health> {
    let loaded = studio.current();
    Json(Health {
        status: "ok",
        checkpoint_id: loaded.as_ref().map_or_else(|| "none".to_string(), |l| l.checkpoint_id.clone()),
        model_config: loaded.map(|l| *l.model.config()),
    })
}

#[derive(Default)]
struct Form {
    image: Option<Vec<u8>>,
    intent: Option<Vec<u8>>,
    w: Option<String>,
    steps: Option<String>,
    seed: Option<String>,
    sampler: Option<String>,
}

async fn read_form(mut multipart: Multipart) -> Result<Form, StudioError> {
    let bad = |e: axum::extract::multipart::MultipartError| StudioError::BadRequest(format!("malformed multipart body: {e}"));
    let mut form = Form::default();
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => form.image = Some(field.bytes().await.map_err(bad)?.to_vec()),
            "intent" => form.intent = Some(field.bytes().await.map_err(bad)?.to_vec()),
            "w" => form.w = Some(field.text().await.map_err(bad)?),
            "steps" => form.steps = Some(field.text().await.map_err(bad)?),
            "seed" => form.seed = Some(field.text().await.map_err(bad)?),
            "sampler" => form.sampler = Some(field.text().await.map_err(bad)?),
            other => return Err(StudioError::BadRequest(format!("unexpected form field '{other}'"))),
        }
    }
    Ok(form)
}

fn parse_field<T: std::str::FromStr>(value: Option<&str>, name: &str, default: T) -> Result<T, StudioError> {
    match value {
        None => Ok(default),
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| StudioError::BadRequest(format!("field '{name}' has invalid value '{v}'"))),
    }
}

#[derive(Serialize)]
struct Echo {
    w: f64,
    steps: usize,
    seed: u64,
    sampler: Sampler,
    width: usize,
    height: usize,
    creation_pixels: usize,
    removal_pixels: usize,
}

async fn inpaint(State(studio): State<Studio>, multipart: Multipart) -> Result<Response, StudioError> {
    let started = Instant::now();
    let form = read_form(multipart).await?;
    let image_png = form.image.ok_or_else(|| StudioError::BadRequest("missing form field 'image'".into()))?;
    let intent_png = form.intent.ok_or_else(|| StudioError::BadRequest("missing form field 'intent'".into()))?;
    let image = wire::decode_rgb(&image_png).map_err(|e| StudioError::BadRequest(format!("image: {e}")))?;
    let intent = wire::decode_intent(&intent_png).map_err(|e| StudioError::BadRequest(e.to_string()))?;
    if (image.height(), image.width()) != (intent.height(), intent.width()) {
        return Err(StudioError::BadRequest(format!(
            "image is {}x{} but intent is {}x{}",
            image.width(),
            image.height(),
            intent.width(),
            intent.height()
        )));
    }
    if !intent.has_intent() {
        return Err(StudioError::BadRequest(
            "intent mask has no creation or removal pixels (all 128)".into(),
        ));
    }
    let defaults = GuidanceConfig::default();
    let guidance = GuidanceConfig {
        w: parse_field(form.w.as_deref(), "w", defaults.w)?,
        steps: parse_field(form.steps.as_deref(), "steps", defaults.steps)?,
        seed: parse_field(form.seed.as_deref(), "seed", defaults.seed)?,
        sampler: parse_field(form.sampler.as_deref(), "sampler", defaults.sampler)?,
    };

    let model = studio.current().ok_or(StudioError::NoCheckpoint)?;
    let cfg = model.model.config();
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(StudioError::BadRequest(format!(
            "model works on {0}x{0} images, got {1}x{2}",
            cfg.image_size,
            image.width(),
            image.height()
        )));
    }
    guidance
        .validate(model.model.schedule.len())
        .map_err(|e| StudioError::BadRequest(e.to_string()))?;

    let echo = Echo {
        w: guidance.w,
        steps: guidance.steps,
        seed: guidance.seed,
        sampler: guidance.sampler,
        width: image.width(),
        height: image.height(),
        creation_pixels: intent.region(1).count(),
        removal_pixels: intent.region(-1).count(),
    };

    let shared = &studio.shared;
    let reserved = shared
        .queued
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |q| (q < shared.config.max_queue).then_some(q + 1));
    if let Err(depth) = reserved {
        return Err(StudioError::Busy(depth));
    }
    let (reply, response) = oneshot::channel();
    let job = Job {
        model,
        image,
        intent,
        guidance,
        reply,
    };
    if shared.jobs.lock().expect("queue lock").send(job).is_err() {
        shared.queued.fetch_sub(1, Ordering::SeqCst);
        return Err(StudioError::Inference("worker stopped".into()));
    }
    let png = response
        .await
        .map_err(|_| StudioError::Inference("worker dropped the request".into()))??;

    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-seed", HeaderValue::from(guidance.seed));
    headers.insert("x-elapsed-ms", HeaderValue::from(started.elapsed().as_millis() as u64));
    let echo = serde_json::to_string(&echo).expect("echo serializes");
    headers.insert("x-request-echo", HeaderValue::from_str(&echo).expect("ascii json"));
    Ok((StatusCode::OK, headers, png).into_response())
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(studio: Studio, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, studio.router()).await
}
