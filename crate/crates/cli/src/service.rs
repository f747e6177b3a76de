//! HTTP JSON API: labeler registration, task leases, annotation submission,
//! batch consensus and review, pipeline control, reports and images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use defectloop_core::backend::{ExternalBackend, ExternalConfig, InMemoryData, ModelBackend, ReferenceClassical};
use defectloop_core::ingest::split_dataset;
use defectloop_core::labeling::{BatchStatus, LabelingBatch, PreAnnotatedBatch, ReviewDecision};
use defectloop_core::orchestrator::{
    ImageSource, LabelSource, OrchestratorError, Phase, Pipeline, PipelineConfig, PipelineControl, PipelineState, Registry,
    GRID_REPORT_FILE,
};
use defectloop_core::store::read_json;
use defectloop_core::synthetic::{CrowdLabels, SimulatedCrowd, SyntheticConfig, SyntheticCorpus, SyntheticImages};
use defectloop_core::{AnnotationSet, Plane};

use crate::board::{check_id, BoardError, TaskBoard, DEFAULT_LEASE};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    pub lease: Duration,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_root: data_root.into(),
            lease: DEFAULT_LEASE,
        }
    }
}

/// Machine-readable API error: `{"error": <code>, "message": <text>}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<BoardError> for ApiError {
    fn from(e: BoardError) -> Self {
        let (status, code) = match &e {
            BoardError::UnknownLabeler(_) => (StatusCode::NOT_FOUND, "unknown_labeler"),
            BoardError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            BoardError::UnknownBatch(_) => (StatusCode::NOT_FOUND, "unknown_batch"),
            BoardError::NotSubmitted(_) => (StatusCode::NOT_FOUND, "not_submitted"),
            BoardError::LeaseExpired(_) => (StatusCode::GONE, "lease_expired"),
            BoardError::ValidationFailed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation_failed"),
            BoardError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            BoardError::Aborted => (StatusCode::CONFLICT, "aborted"),
            BoardError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------- pipeline runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSpec {
    /// Generated scenes; the simulated crowd can label them.
    Synthetic { images: usize, seed: u64 },
    /// `images/<id>.png` under the data root, with expert labels for the
    /// test split in `labels/<id>.json`.
    Directory,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Synthetic { images: 60, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Batches are published as tasks and wait for labelers and an expert.
    #[default]
    Http,
    /// The simulated crowd answers immediately (synthetic corpus only).
    Synthetic,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartRequest {
    pub config: PipelineConfig,
    pub corpus: CorpusSpec,
    pub labels: LabelMode,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub labelers_per_image: usize,
    /// Remote trainer; the built-in backend is used when absent.
    pub backend_endpoint: Option<String>,
}

impl Default for StartRequest {
    fn default() -> Self {
        StartRequest {
            config: PipelineConfig::default(),
            corpus: CorpusSpec::default(),
            labels: LabelMode::default(),
            split_ratio: 0.9,
            split_seed: 0,
            labelers_per_image: 1,
            backend_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub running: bool,
    pub state: PipelineState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Batch currently waiting on labelers, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_batch: Option<String>,
}

struct Run {
    control: Arc<PipelineControl>,
    status: Arc<Mutex<RunStatus>>,
    corpus: Option<(Arc<SyntheticCorpus>, u32)>,
    thread: Option<JoinHandle<()>>,
}

pub struct AppState {
    config: ServiceConfig,
    board: Arc<TaskBoard>,
    run: Mutex<Option<Run>>,
    runs_started: Mutex<u64>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let board = Arc::new(TaskBoard::new(Some(config.data_root.clone()), config.lease));
        AppState {
            config,
            board,
            run: Mutex::new(None),
            runs_started: Mutex::new(0),
        }
    }

    pub fn board(&self) -> &TaskBoard {
        &self.board
    }

    /// Images of the active synthetic corpus, else `images/<id>.png`.
    fn image(&self, image_id: &str) -> Option<Plane> {
        if let Some((corpus, res)) = self.run.lock().as_ref().and_then(|r| r.corpus.clone()) {
            if corpus.scene(image_id).is_some() {
                return corpus.render(image_id, res).ok();
            }
        }
        Plane::load(&self.config.data_root.join("images").join(format!("{image_id}.png"))).ok()
    }

    fn status(&self) -> ApiResult<RunStatus> {
        let guard = self.run.lock();
        let run = guard
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_active_run", "no pipeline run has been started"))?;
        let status = run.status.lock().clone();
        Ok(status)
    }

    fn active_control(&self) -> ApiResult<Arc<PipelineControl>> {
        let run = self.run.lock();
        match run.as_ref() {
            Some(r) if r.status.lock().running => Ok(r.control.clone()),
            _ => Err(ApiError::new(StatusCode::NOT_FOUND, "no_active_run", "no pipeline run is in progress")),
        }
    }

    /// Waits for the background run (if any) to finish.
    pub fn join(&self) {
        let handle = self.run.lock().as_mut().and_then(|r| r.thread.take());
        if let Some(h) = handle {
            let _ = h.join();
        }
    }
}

/// Publishes each pipeline batch on the task board and waits for the expert.
struct BoardLabels {
    board: Arc<TaskBoard>,
    control: Arc<PipelineControl>,
    status: Arc<Mutex<RunStatus>>,
    run_id: String,
    resolution: u32,
    per_image: usize,
}

impl LabelSource for BoardLabels {
    fn label(&mut self, pre: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError> {
        let batch_id = format!("{}-{}", self.run_id, pre.batch.batch_id);
        let batch = LabelingBatch {
            batch_id: batch_id.clone(),
            status: BatchStatus::Open,
            ..pre.batch.clone()
        };
        let dims = batch.image_ids.iter().map(|id| (id.clone(), (self.resolution, self.resolution))).collect();
        self.board
            .open_batch(batch, pre.drafts.clone(), &dims, self.per_image)
            .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        self.status.lock().open_batch = Some(batch_id.clone());
        let control = self.control.clone();
        let result = self.board.wait_finalized(&batch_id, &|| control.abort_requested());
        self.status.lock().open_batch = None;
        match result {
            Ok(sets) => Ok(sets),
            Err(BoardError::Aborted) => {
                self.board.withdraw(&batch_id);
                Err(OrchestratorError::Aborted)
            }
            Err(e) => Err(OrchestratorError::InvalidConfig(e.to_string())),
        }
    }
}

/// Loads `images/<id>.png` at the run resolution.
struct DirectoryImages {
    root: PathBuf,
    resolution: u32,
}

impl ImageSource for DirectoryImages {
    fn image(&self, image_id: &str) -> Result<Plane, OrchestratorError> {
        let plane = Plane::load(&self.root.join("images").join(format!("{image_id}.png")))
            .map_err(|e| OrchestratorError::Image(format!("{image_id}: {e}")))?;
        if plane.width() == self.resolution && plane.height() == self.resolution {
            Ok(plane)
        } else {
            Ok(plane.resize_area(self.resolution, self.resolution))
        }
    }
}

/// Ids of `dir/*.<ext>` files, sorted.
pub fn list_ids(dir: &Path, ext: &str) -> std::io::Result<Vec<String>> {
    let mut ids = Vec::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", msg)
}

fn start_run(state: &Arc<AppState>, req: StartRequest) -> ApiResult<RunStatus> {
    req.config.validate().map_err(|e| invalid(e.to_string()))?;
    if req.labelers_per_image == 0 {
        return Err(invalid("labelers_per_image must be positive"));
    }
    let res = req.config.resolution;
    let root = state.config.data_root.clone();
    let (corpus, ids) = match &req.corpus {
        CorpusSpec::Synthetic { images, seed } => {
            let corpus = SyntheticCorpus::generate(&SyntheticConfig {
                images: *images,
                seed: *seed,
                ..SyntheticConfig::default()
            });
            let ids = corpus.ids();
            (Some(Arc::new(corpus)), ids)
        }
        CorpusSpec::Directory => {
            if req.labels == LabelMode::Synthetic {
                return Err(invalid("synthetic labels need a synthetic corpus"));
            }
            (None, list_ids(&root.join("images"), "png").map_err(|e| invalid(e.to_string()))?)
        }
    };
    let (pool, test_ids) = split_dataset(&ids, req.split_ratio, req.split_seed).map_err(|e| invalid(e.to_string()))?;
    let test = match &corpus {
        Some(c) => c.labeled("test", &test_ids, res).map_err(|e| invalid(e.to_string()))?,
        None => {
            let images = DirectoryImages {
                root: root.clone(),
                resolution: res,
            };
            let mut samples = Vec::with_capacity(test_ids.len());
            for id in &test_ids {
                let plane = images.image(id).map_err(|e| invalid(e.to_string()))?;
                let labels: AnnotationSet = read_json(&root.join("labels").join(format!("{id}.json")))
                    .map_err(|e| invalid(format!("test image {id} needs expert labels: {e}")))?;
                samples.push((plane, labels));
            }
            InMemoryData::new("test", res, samples)
        }
    };
    let registry = Registry::open(&root).map_err(|e| invalid(e.to_string()))?;

    let mut slot = state.run.lock();
    if slot.as_ref().is_some_and(|r| r.status.lock().running) {
        return Err(ApiError::new(StatusCode::CONFLICT, "already_running", "a pipeline run is already in progress"));
    }
    let run_id = {
        let mut n = state.runs_started.lock();
        *n += 1;
        format!("run{n}")
    };
    let control = Arc::new(PipelineControl::default());
    let initial = RunStatus {
        run_id: run_id.clone(),
        running: true,
        state: PipelineState::new(&req.config),
        error: None,
        open_batch: None,
    };
    let status = Arc::new(Mutex::new(initial.clone()));
    let job = {
        let (control, status, board, corpus) = (control.clone(), status.clone(), state.board.clone(), corpus.clone());
        move || {
            let backend: Box<dyn ModelBackend> = match &req.backend_endpoint {
                Some(url) => Box::new(ExternalBackend::new(ExternalConfig::new(url.clone()))),
                None => Box::new(ReferenceClassical::new(run_id.clone())),
            };
            let images: Box<dyn ImageSource> = match &corpus {
                Some(c) => Box::new(SyntheticImages {
                    corpus: c,
                    resolution: res,
                }),
                None => Box::new(DirectoryImages { root, resolution: res }),
            };
            let mut labels: Box<dyn LabelSource> = match (&corpus, req.labels) {
                (Some(c), LabelMode::Synthetic) => Box::new(CrowdLabels {
                    corpus: c,
                    crowd: SimulatedCrowd::new(res, req.config.seed),
                }),
                _ => Box::new(BoardLabels {
                    board,
                    control: control.clone(),
                    status: status.clone(),
                    run_id: run_id.clone(),
                    resolution: res,
                    per_image: req.labelers_per_image,
                }),
            };
            let observed = status.clone();
            let outcome = Pipeline::new(req.config.clone(), backend.as_ref(), images.as_ref(), labels.as_mut(), pool, test)
                .map(|p| {
                    p.with_registry(registry)
                        .with_control(control)
                        .with_observer(move |s| observed.lock().state = s.clone())
                })
                .and_then(|mut p| p.run_full().map(|summary| summary.state));
            let mut st = status.lock();
            st.running = false;
            match outcome {
                Ok(final_state) => st.state = final_state,
                Err(e) => {
                    log::warn!("pipeline {} stopped: {e}", st.run_id);
                    st.error = Some(e.to_string());
                }
            }
        }
    };
    let thread = std::thread::Builder::new()
        .name("pipeline".into())
        .spawn(job)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "spawn", e.to_string()))?;
    *slot = Some(Run {
        control,
        status,
        corpus: corpus.map(|c| (c, res)),
        thread: Some(thread),
    });
    Ok(initial)
}

// ---------------------------------------------------------------- handlers

#[derive(Deserialize)]
struct NewLabeler {
    labeler_id: String,
}

async fn register_labeler(
    State(st): State<Arc<AppState>>,
    payload: Result<Json<NewLabeler>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    let added = st.board.register_labeler(&req.labeler_id)?;
    let status = if added { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(json!({"labeler_id": req.labeler_id}))))
}

#[derive(Deserialize)]
struct NextQuery {
    labeler: Option<String>,
}

async fn next_task(State(st): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    let labeler = q
        .labeler
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "missing labeler query parameter"))?;
    Ok(match st.board.next_task(&labeler, Instant::now())? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    annotation: AnnotationSet,
    elapsed_seconds: f64,
}

async fn submit_annotation(
    State(st): State<Arc<AppState>>,
    UrlPath(task_id): UrlPath<String>,
    payload: Result<Json<Submission>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let sub = body(payload).map_err(|e| {
        // a syntactically valid body that breaks annotation invariants
        if e.status == StatusCode::UNPROCESSABLE_ENTITY {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", e.message)
        } else {
            e
        }
    })?;
    Ok(Json(st.board.submit(&task_id, sub.annotation, sub.elapsed_seconds, Instant::now())?))
}

async fn get_annotation(State(st): State<Arc<AppState>>, UrlPath(task_id): UrlPath<String>) -> ApiResult<Response> {
    let stored = st.board.annotation(&task_id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], stored).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewBatch {
    batch_id: String,
    image_ids: Vec<String>,
    #[serde(default = "one")]
    labelers_per_image: usize,
}

fn one() -> usize {
    1
}

async fn create_batch(
    State(st): State<Arc<AppState>>,
    payload: Result<Json<NewBatch>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    let mut dims = BTreeMap::new();
    for id in &req.image_ids {
        check_id("image", id)?;
        let plane = st
            .image(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no image {id}")))?;
        dims.insert(id.clone(), (plane.width(), plane.height()));
    }
    let batch = LabelingBatch {
        batch_id: req.batch_id,
        image_ids: req.image_ids,
        status: BatchStatus::Open,
        assigned_labelers: Default::default(),
    };
    let view = st.board.open_batch(batch, BTreeMap::new(), &dims, req.labelers_per_image)?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_consensus(State(st): State<Arc<AppState>>, UrlPath(batch_id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.board.batch(&batch_id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Review {
    decision: ReviewDecision,
    #[serde(default)]
    image_ids: Vec<String>,
}

async fn review_batch(
    State(st): State<Arc<AppState>>,
    UrlPath(batch_id): UrlPath<String>,
    payload: Result<Json<Review>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    Ok(Json(st.board.review(&batch_id, req.decision, &req.image_ids)?))
}

async fn pipeline_start(
    State(st): State<Arc<AppState>>,
    payload: Option<Json<serde_json::Value>>,
) -> ApiResult<impl IntoResponse> {
    let raw = payload.map(|Json(v)| v).unwrap_or_else(|| json!({}));
    let req: StartRequest =
        serde_json::from_value(raw).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    let st2 = st.clone();
    let status = tokio::task::spawn_blocking(move || start_run(&st2, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn pipeline_status(State(st): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.status()?))
}

async fn pipeline_advance(State(st): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    let control = st.active_control()?;
    let phase = st.status()?.state.phase;
    if phase == Phase::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, "illegal_phase", "run is already done"));
    }
    control.request_advance();
    Ok((StatusCode::ACCEPTED, Json(st.status()?)))
}

async fn pipeline_abort(State(st): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    st.active_control()?.request_abort();
    Ok((StatusCode::ACCEPTED, Json(st.status()?)))
}

async fn grid_report(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let path = st.config.data_root.join(GRID_REPORT_FILE);
    let csv = std::fs::read_to_string(&path)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "no_report", "no grid report has been written yet"))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn image_png(State(st): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", "images are served as <id>.png"))?;
    check_id("image", id)?;
    let plane = st
        .image(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no image {id}")))?;
    let png = plane
        .encode_png()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/labelers", post(register_labeler))
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}/annotation", post(submit_annotation).get(get_annotation))
        .route("/batches", post(create_batch))
        .route("/batches/{id}/consensus", get(get_consensus))
        .route("/batches/{id}/review", post(review_batch))
        .route("/pipeline/start", post(pipeline_start))
        .route("/pipeline/status", get(pipeline_status))
        .route("/pipeline/advance", post(pipeline_advance))
        .route("/pipeline/abort", post(pipeline_abort))
        .route("/reports/grid.csv", get(grid_report))
        .route("/images/{file}", get(image_png))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
