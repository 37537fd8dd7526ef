//! HTTP job service over the directed diffusion library.
//!
//! Submissions are validated up front and queued; one worker thread runs
//! them in order, so at most one generation is in flight per backend.

pub mod api;
pub mod jobs;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use dd_core::attention::TOKEN_SLOTS;
use dd_core::compose::run_scene_compositing;
use dd_core::harness::diag::HEATMAP_UPSCALE;
use dd_core::harness::{ablation_grid, attention_heatmap, run_ssk, BatchMode, Cell, RunStore};
use dd_core::placement::run_placement_finetune;
use dd_core::{open_backend, run_directed_diffusion, Backend, BackendSelection, DdError, RunRecord};
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use api::{ApiError, FieldError, Payload};
pub use jobs::{Job, JobKind, JobQueue, JobStatus, Outcome, QueueStats};

/// Longest a `GET /jobs/{id}?wait=` request is held open.
pub const MAX_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    pub backend: BackendSelection,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

#[derive(Clone)]
struct AppState {
    queue: Arc<JobQueue>,
    store: Arc<RunStore>,
    backend: Arc<dyn Backend>,
}

/// A running service: the job worker plus the state shared with the router.
pub struct Service {
    state: AppState,
    cors_origin: Option<String>,
    worker: Option<std::thread::JoinHandle<()>>,
}

impl Service {
    pub fn start(config: ServiceConfig) -> dd_core::Result<Self> {
        let store = Arc::new(RunStore::open(&config.store_root)?);
        let backend: Arc<dyn Backend> = Arc::from(open_backend(&config.backend)?);
        let queue = JobQueue::new();
        let worker = {
            let exec = Executor {
                store: Arc::clone(&store),
                backend: Arc::clone(&backend),
                selection: config.backend.clone(),
            };
            let queue = Arc::clone(&queue);
            std::thread::Builder::new()
                .name("dd-worker".into())
                .spawn(move || queue.work_loop(|p| exec.run(p)))
                .map_err(|e| DdError::Unavailable(format!("cannot start worker: {e}")))?
        };
        Ok(Self {
            state: AppState { queue, store, backend },
            cors_origin: config.cors_origin,
            worker: Some(worker),
        })
    }

    pub fn queue(&self) -> &Arc<JobQueue> {
        &self.state.queue
    }

    pub fn store(&self) -> &Arc<RunStore> {
        &self.state.store
    }

    /// Serves the API on `listener` until the connection loop ends.
    pub async fn serve(&self, listener: tokio::net::TcpListener) -> std::io::Result<()> {
        axum::serve(listener, self.router()).await
    }

    pub fn router(&self) -> Router {
        let cors = match &self.cors_origin {
            Some(origin) => match HeaderValue::from_str(origin) {
                Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
                Err(_) => CorsLayer::new(),
            },
            None => CorsLayer::new().allow_origin(AllowOrigin::any()),
        }
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
        Router::new()
            .route("/health", get(|| async { "ok" }))
            .route("/tokenize", get(tokenize))
            .route("/queue", get(queue_stats))
            .route("/jobs/{id}", get(job_status).post(submit))
            .route("/runs", get(list_runs))
            .route("/runs/{id}", get(run_manifest))
            .route("/runs/{id}/image", get(run_image))
            .route("/runs/{id}/attention/{token_index}", get(run_attention))
            .route("/runs/{id}/losses", get(run_losses))
            .layer(cors)
            .with_state(self.state.clone())
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.state.queue.shutdown();
        // The worker finishes its current job on its own; never block here.
        drop(self.worker.take());
    }
}

struct Executor {
    store: Arc<RunStore>,
    backend: Arc<dyn Backend>,
    selection: BackendSelection,
}

impl Executor {
    fn run(&self, payload: &Payload) -> Outcome {
        let kind = payload.kind();
        tracing::info!(?kind, "job started");
        match self.try_run(payload) {
            Ok(outcome) => {
                tracing::info!(?kind, runs = outcome.run_ids.len(), error = ?outcome.error, "job finished");
                outcome
            }
            Err(e) => {
                tracing::warn!(?kind, error = %e, "job failed");
                Outcome {
                    error: Some(e.to_string()),
                    ..Outcome::default()
                }
            }
        }
    }

    fn single(&self, record: RunRecord) -> dd_core::Result<Outcome> {
        self.store.save(&record)?;
        let error = match &record.status {
            dd_core::RunStatus::Complete => None,
            dd_core::RunStatus::Failed { step, message } => Some(format!("step {step}: {message}")),
        };
        Ok(Outcome {
            run_ids: vec![record.run_id],
            run_errors: Vec::new(),
            error,
        })
    }

    fn batch<K: std::fmt::Debug>(cells: Vec<Cell<K>>) -> Outcome {
        let mut out = Outcome::default();
        for cell in cells {
            match cell.outcome {
                Ok(rec) => {
                    if let dd_core::RunStatus::Failed { step, message } = &rec.status {
                        out.run_errors.push(format!("{:?}: step {step}: {message}", cell.key));
                    }
                    out.run_ids.push(rec.run_id);
                }
                Err(e) => out.run_errors.push(format!("{:?}: {e}", cell.key)),
            }
        }
        if out.run_ids.is_empty() {
            out.error = Some(format!("every run failed: {}", out.run_errors.join("; ")));
        }
        out
    }

    fn try_run(&self, payload: &Payload) -> dd_core::Result<Outcome> {
        let backend = self.backend.as_ref();
        let factory = || open_backend(&self.selection);
        match payload {
            Payload::Generate(r) => self.single(run_directed_diffusion(backend, &r.prompt, &r.directives, &r.config)?),
            Payload::Ssk(r) => Ok(Self::batch(run_ssk(
                &factory,
                BatchMode::Sequential,
                &r.prompt,
                &r.directives,
                &r.config,
                r.seed0,
                r.k,
                Some(&self.store),
            )?)),
            Payload::Compose(r) => {
                let sources = r
                    .sources
                    .iter()
                    .map(|s| self.store.load(&s.run_id))
                    .collect::<dd_core::Result<Vec<_>>>()?;
                let refs: Vec<&RunRecord> = sources.iter().collect();
                self.single(run_scene_compositing(backend, &r.spec(), &refs, &r.config)?)
            }
            Payload::Pf(r) => {
                let source = self.store.load(&r.source_run_id)?;
                self.single(run_placement_finetune(backend, &source, r)?)
            }
            Payload::Ablate(r) => Ok(Self::batch(ablation_grid(
                &factory,
                BatchMode::Sequential,
                &r.prompt,
                &r.directives,
                &r.config,
                &r.grid(),
                Some(&self.store),
            )?)),
        }
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn submit(State(state): State<AppState>, Path(kind): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let kind: JobKind = kind.parse().map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let (payload, raw) = blocking(move || {
        let payload = Payload::parse(kind, &body, state.backend.as_ref(), &state.store)?;
        let raw: serde_json::Value = serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        Ok((payload, raw))
    })
    .await?;
    let (job_id, position) = state.queue.submit(payload, raw);
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "position": position }))).into_response())
}

#[derive(Deserialize)]
struct WaitQuery {
    /// Milliseconds to hold the request while the job is not finished.
    wait: Option<u64>,
}

async fn job_status(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> Result<Json<Job>, ApiError> {
    let wait = Duration::from_millis(q.wait.unwrap_or(0)).min(MAX_WAIT);
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let notified = state.queue.changed.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let job = state
            .queue
            .get(&id)
            .ok_or_else(|| ApiError::not_found(format!("job {id} not found")))?;
        if job.status.is_terminal() || tokio::time::Instant::now() >= deadline {
            return Ok(Json(job));
        }
        let _ = tokio::time::timeout_at(deadline, notified).await;
    }
}

async fn queue_stats(State(state): State<AppState>) -> Json<QueueStats> {
    Json(state.queue.stats())
}

#[derive(Deserialize)]
struct TokenizeQuery {
    prompt: Option<String>,
}

async fn tokenize(State(state): State<AppState>, Query(q): Query<TokenizeQuery>) -> Result<Response, ApiError> {
    let prompt = q.prompt.ok_or_else(|| ApiError::field("prompt", "is required"))?;
    let tokens = state.backend.tokenize(&prompt)?;
    let prompt_len = tokens.len();
    Ok(Json(json!({
        "prompt": prompt,
        "tokens": tokens,
        "prompt_len": prompt_len,
        "trailing_len": TOKEN_SLOTS - prompt_len,
    }))
    .into_response())
}

async fn list_runs(State(state): State<AppState>) -> Result<Json<Vec<String>>, ApiError> {
    blocking(move || Ok(state.store.list()?)).await.map(Json)
}

async fn run_manifest(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let m = blocking(move || Ok(state.store.manifest(&id)?)).await?;
    Ok(Json(m).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn run_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(state.store.image_png(&id)?)).await.map(png)
}

async fn run_attention(
    State(state): State<AppState>,
    Path((id, token)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let token_index: usize = token
        .parse()
        .ok()
        .filter(|i| (1..=TOKEN_SLOTS).contains(i))
        .ok_or_else(|| ApiError::field("token_index", format!("must be an integer in 1..={TOKEN_SLOTS}, got {token:?}")))?;
    blocking(move || {
        let maps = state
            .store
            .final_attention(&id)?
            .ok_or_else(|| ApiError::not_found(format!("run {id} has no attention maps")))?;
        Ok(attention_heatmap(&maps, token_index, HEATMAP_UPSCALE)?.to_png()?)
    })
    .await
    .map(png)
}

async fn run_losses(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let text = blocking(move || Ok(state.store.losses_jsonl(&id)?)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}
