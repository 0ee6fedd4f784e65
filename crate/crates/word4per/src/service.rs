//! The `/api/v1` HTTP service: composed retrieval for interactive probing
//! and the false-negative curation queue.
//!
//! Retrieval requests share a read lock on the loaded model; `POST
//! /api/v1/reload` takes the write lock, so it waits for in-flight requests
//! to drain before swapping. Verdicts go through a single writer that
//! appends to the locked verdict log and syncs it before answering 200.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};
use word4per_core::cache::FeatureTable;
use word4per_core::curation::{apply_verdicts, Candidate, Decision, Verdict};
use word4per_core::dataset::{ManifestKind, Triplet};
use word4per_core::encoder::{DualEncoder, ToyDualEncoder};
use word4per_core::retrieval::{rank_gallery, QueryEngine, QueryMode, QuerySpec};
use word4per_core::tinet::TiNet;

use crate::commands::{load_frozen_encoder, load_tinets, read_candidates, read_verdicts, split_features};
use crate::config::Config;
use crate::error::{AppError, Result};
use crate::imageio::{content_type, decode_bytes};
use crate::manifest::{load_images, load_triplets, write_jsonl};

pub const DEFAULT_BIND: &str = "127.0.0.1:8787";
pub const BIND_ENV: &str = "W4P_BIND";
/// Request bodies may carry a base64 image.
pub const MAX_BODY: usize = 16 << 20;

/// Everything retrieval needs, swapped as a unit on reload.
pub struct Model {
    pub encoder: ToyDualEncoder,
    pub references: FeatureTable,
    pub gallery: FeatureTable,
    pub tinets: BTreeMap<String, TiNet>,
    /// Files behind the thumbnail route, by image id.
    pub images: BTreeMap<String, PathBuf>,
}

impl Model {
    pub fn load(cfg: &Config) -> Result<Self> {
        cfg.require(&["encoder.checkpoint", "data.gallery"])?;
        let encoder = load_frozen_encoder(cfg)?;
        let gallery_m = load_images(cfg.data.gallery.as_deref().unwrap(), ManifestKind::ImageOnly)?;
        let gallery = split_features(cfg, &encoder, "gallery", &gallery_m)?.images;
        let mut images = BTreeMap::new();
        let mut references = FeatureTable::new(encoder.embed_dim());
        if let Some(p) = &cfg.data.references {
            let m = load_images(p, ManifestKind::ImageOnly)?;
            references = split_features(cfg, &encoder, "references", &m)?.images;
            for r in m.dataset.images() {
                images.insert(r.image_id.clone(), m.resolve(r));
            }
        }
        for r in gallery_m.dataset.images() {
            images.insert(r.image_id.clone(), gallery_m.resolve(r));
        }
        let (tinets, _) = load_tinets(&cfg.serve.tinets)?;
        Ok(Self {
            encoder,
            references,
            gallery,
            tinets,
            images,
        })
    }

    pub fn engine(&self) -> QueryEngine<'_, ToyDualEncoder> {
        QueryEngine {
            encoder: &self.encoder,
            references: &self.references,
            gallery: &self.gallery,
            tinets: &self.tinets,
        }
    }
}

/// Pending candidates plus the verdict log that resolves them.
pub struct Curation {
    candidates: Vec<Candidate>,
    by_pair: BTreeMap<String, usize>,
    verdicts: Vec<Verdict>,
    decided: BTreeSet<String>,
    log: PathBuf,
    triplets: Vec<Triplet>,
    triplets_out: Option<PathBuf>,
}

impl Curation {
    pub fn load(cfg: &Config) -> Result<Option<Self>> {
        let Some(candidates_path) = &cfg.serve.candidates else {
            return Ok(None);
        };
        let mut required = vec!["serve.verdicts"];
        if cfg.serve.triplets_out.is_some() {
            required.push("data.triplets");
        }
        cfg.require(&required)?;
        let candidates = read_candidates(candidates_path)?;
        let by_pair = candidates.iter().enumerate().map(|(i, c)| (c.pair_id.clone(), i)).collect();
        let log = cfg.serve.verdicts.clone().unwrap();
        let verdicts = if log.exists() { read_verdicts(&log)? } else { Vec::new() };
        let triplets = match (&cfg.serve.triplets_out, &cfg.data.triplets) {
            (Some(_), Some(p)) => load_triplets(p)?,
            _ => Vec::new(),
        };
        let curation = Self {
            candidates,
            by_pair,
            decided: verdicts.iter().map(|v| v.pair_id.clone()).collect(),
            verdicts,
            log,
            triplets,
            triplets_out: cfg.serve.triplets_out.clone(),
        };
        curation.rewrite_triplets()?;
        Ok(Some(curation))
    }

    /// Highest-similarity pair without a verdict; ties go to the earlier row.
    pub fn next(&self) -> Option<&Candidate> {
        self.candidates
            .iter()
            .filter(|c| !self.decided.contains(&c.pair_id))
            .fold(None, |best: Option<&Candidate>, c| match best {
                Some(b) if b.similarity >= c.similarity => Some(b),
                _ => Some(c),
            })
    }

    pub fn remaining(&self) -> usize {
        self.candidates.len() - self.decided.len().min(self.candidates.len())
    }

    fn rewrite_triplets(&self) -> Result<Option<usize>> {
        let Some(out) = &self.triplets_out else {
            return Ok(None);
        };
        let applied = apply_verdicts(&self.triplets, &self.candidates, &self.verdicts)?;
        write_jsonl(out, &applied.triplets)?;
        Ok(Some(applied.triplets.iter().map(|t| t.target_image_ids.len()).sum()))
    }

    /// Appends `verdict` to the log and syncs it, then refreshes the triplet
    /// file. The log is locked while it is written.
    fn record(&mut self, verdict: Verdict) -> Result<()> {
        let mut line = serde_json::to_string(&verdict).map_err(|e| AppError::format(&self.log, e.to_string()))?;
        line.push('\n');
        append_locked(&self.log, line.as_bytes())?;
        self.decided.insert(verdict.pair_id.clone());
        self.verdicts.push(verdict);
        self.rewrite_triplets()?;
        Ok(())
    }
}

fn append_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AppError::io(path, e))?;
    f.lock().map_err(|e| AppError::io(path, e))?;
    let res = f.write_all(bytes).and_then(|_| f.sync_all());
    let _ = f.unlock();
    res.map_err(|e| AppError::io(path, e))
}

pub struct AppState {
    config: Config,
    model: Arc<RwLock<Arc<Model>>>,
    curation: Arc<Mutex<Option<Curation>>>,
}

impl AppState {
    pub fn load(config: Config) -> Result<Arc<Self>> {
        let model = Model::load(&config)?;
        let curation = Curation::load(&config)?;
        Ok(Arc::new(Self {
            config,
            model: Arc::new(RwLock::new(Arc::new(model))),
            curation: Arc::new(Mutex::new(curation)),
        }))
    }
}

/// An error rendered as `{"error": {...}}` with its HTTP status.
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": { "kind": kind, "message": message.into() } }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "request", message)
    }
}

fn core_status(e: &word4per_core::Error) -> StatusCode {
    use word4per_core::Error as E;
    match e {
        E::UnknownId(what) if what.starts_with("tinet ") => StatusCode::BAD_REQUEST,
        E::UnknownId(_) => StatusCode::NOT_FOUND,
        E::FingerprintMismatch | E::VerdictConflict(_) => StatusCode::CONFLICT,
        E::EncoderFrozen | E::EncoderNotFrozen | E::DanglingReference { .. } | E::Aborted(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        E::ImageSource(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let status = match &e {
            AppError::Core(c) => core_status(c),
            AppError::Image { .. } | AppError::Usage(_) | AppError::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, body: e.to_json() }
    }
}

impl From<word4per_core::Error> for ApiError {
    fn from(e: word4per_core::Error) -> Self {
        AppError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn thumbnail_url(image_id: &str) -> String {
    format!("/api/v1/images/{image_id}")
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    /// Base64-encoded PNG or JPEG, used instead of `image_id`.
    #[serde(default)]
    pub image_b64: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
    pub mode: QueryMode,
    #[serde(default)]
    pub tinet_ids: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub exclude_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveHit {
    pub image_id: String,
    pub score: f64,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<RetrieveHit>,
}

/// Answers `req` against `model`; the HTTP handler is a thin wrapper.
pub fn retrieve(model: &Model, req: &RetrieveRequest) -> ApiResult<RetrieveResponse> {
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let spec = QuerySpec {
        mode: req.mode,
        image_id: req.image_id.clone(),
        caption: req.caption.clone(),
        tinet_ids: req.tinet_ids.clone(),
    };
    let engine = model.engine();
    let result = match (&req.image_id, &req.image_b64) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give image_id or image_b64, not both")),
        (_, None) => engine.retrieve(&spec, req.k, req.exclude_reference)?,
        (None, Some(b64)) => {
            if req.exclude_reference {
                return Err(ApiError::bad_request("exclude_reference needs image_id"));
            }
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("image_b64: {e}")))?;
            let c = model.encoder.config();
            let tensor = decode_bytes(&bytes, c.image_height, c.image_width)?;
            let image = model.encoder.encode_image(&tensor)?;
            let query = engine.embed(&spec, Some(&image))?;
            rank_gallery(&query, &model.gallery, req.k, None)?
        }
    };
    Ok(RetrieveResponse {
        results: result
            .ranked_ids
            .into_iter()
            .zip(result.scores)
            .map(|(id, score)| RetrieveHit {
                thumbnail_url: thumbnail_url(&id),
                image_id: id,
                score,
            })
            .collect(),
    })
}

async fn post_retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<RetrieveResponse>> {
    let req: RetrieveRequest = parse_body(&body)?;
    let guard = state.model.clone().read_owned().await;
    blocking(move || retrieve(&guard, &req)).await.map(Json)
}

#[derive(Debug, Clone, Serialize)]
struct TinetInfo {
    name: String,
    config: word4per_core::tinet::TiNetConfig,
    encoder_fingerprint: Option<String>,
}

async fn get_tinets(State(state): State<Arc<AppState>>) -> Json<Value> {
    let model = state.model.read().await;
    let nets: Vec<TinetInfo> = model
        .tinets
        .iter()
        .map(|(name, t)| TinetInfo {
            name: name.clone(),
            config: *t.config(),
            encoder_fingerprint: t.encoder_fingerprint().map(hex::encode),
        })
        .collect();
    Json(json!({
        "tinets": nets,
        "encoder_fingerprint": hex::encode(model.encoder.fingerprint()),
        "gallery_size": model.gallery.len(),
    }))
}

async fn get_health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

/// Reloads encoder, features and TINets from the startup config once
/// in-flight retrievals have finished.
async fn post_reload(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let cfg = state.config.clone();
    let model = blocking(move || Model::load(&cfg).map_err(ApiError::from)).await?;
    let mut slot = state.model.write().await;
    *slot = Arc::new(model);
    Ok(Json(json!({
        "status": "reloaded",
        "encoder_fingerprint": hex::encode(slot.encoder.fingerprint()),
    })))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = {
        let model = state.model.read().await;
        model.images.get(&id).cloned()
    };
    let Some(path) = path else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not-found", format!("unknown image `{id}`")));
    };
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::from(AppError::io(&path, e)))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPair {
    pub pair_id: String,
    pub target_id: String,
    pub candidate_id: String,
    pub similarity: f64,
    pub image_urls: BTreeMap<String, String>,
    pub remaining: usize,
}

fn no_session() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not-found", "no curation session: serve.candidates is not set")
}

async fn get_next(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let guard = state.curation.lock().await;
    let curation = guard.as_ref().ok_or_else(no_session)?;
    let Some(c) = curation.next() else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let next = NextPair {
        pair_id: c.pair_id.clone(),
        target_id: c.target_id.clone(),
        candidate_id: c.candidate_id.clone(),
        similarity: c.similarity,
        image_urls: BTreeMap::from([
            ("target".to_string(), thumbnail_url(&c.target_id)),
            ("candidate".to_string(), thumbnail_url(&c.candidate_id)),
        ]),
        remaining: curation.remaining(),
    };
    Ok(Json(next).into_response())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub pair_id: String,
    pub decision: Decision,
    pub annotator: String,
    /// ISO-8601; the server clock is used when absent.
    #[serde(default)]
    pub ts: Option<String>,
}

fn now_iso8601() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

async fn post_verdict(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: VerdictRequest = parse_body(&body)?;
    if req.annotator.trim().is_empty() {
        return Err(ApiError::bad_request("annotator must not be empty"));
    }
    let mut guard = state.curation.clone().lock_owned().await;
    blocking(move || {
        let curation = guard.as_mut().ok_or_else(no_session)?;
        let Some(&i) = curation.by_pair.get(&req.pair_id) else {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not-found",
                format!("unknown pair `{}`", req.pair_id),
            ));
        };
        if curation.decided.contains(&req.pair_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "conflict",
                format!("pair `{}` already has a verdict", req.pair_id),
            ));
        }
        let c = &curation.candidates[i];
        let verdict = Verdict {
            pair_id: c.pair_id.clone(),
            target_id: c.target_id.clone(),
            candidate_id: c.candidate_id.clone(),
            decision: req.decision,
            annotator: req.annotator,
            ts: req.ts.unwrap_or_else(now_iso8601),
        };
        curation.record(verdict.clone())?;
        Ok(Json(json!({ "verdict": verdict, "remaining": curation.remaining() })))
    })
    .await
}

/// The service routes, with UI assets from `serve.static_dir` at `/`.
pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(get_health))
        .route("/retrieve", post(post_retrieve))
        .route("/tinets", get(get_tinets))
        .route("/reload", post(post_reload))
        .route("/images/{id}", get(get_image))
        .route("/curation/next", get(get_next))
        .route("/curation/verdict", post(post_verdict))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY));
    let app = Router::new().nest("/api/v1", api);
    let app = match &state.config.serve.static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    };
    app.with_state(state)
}

/// `W4P_BIND`, then `serve.bind`, then [`DEFAULT_BIND`].
pub fn bind_address(cfg: &Config) -> Result<std::net::SocketAddr> {
    let (origin, text) = match std::env::var(BIND_ENV) {
        Ok(v) if !v.trim().is_empty() => (BIND_ENV, v),
        _ => ("serve.bind", cfg.serve.bind.clone().unwrap_or_else(|| DEFAULT_BIND.into())),
    };
    text.trim()
        .parse()
        .map_err(|e| AppError::Config(vec![format!("{origin}: `{text}` is not host:port ({e})")]))
}

/// Loads the model and serves until Ctrl-C.
pub fn serve(cfg: Config) -> Result<()> {
    let addr = bind_address(&cfg)?;
    let state = AppState::load(cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::io("<tokio runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| AppError::io(addr.to_string(), e))?;
        eprintln!("word4per: serving /api/v1 on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| AppError::io(addr.to_string(), e))
    })
}
