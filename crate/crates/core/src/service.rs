//! HTTP inference service for interactive latent exploration.
//!
//! Routes (all JSON bodies carry a top-level `"v": 1`):
//!
//! * `POST /images`: multipart upload of one PNG (any field name) →
//!   `{v, id, width, height}`. 413 above 2048 pixels per side, 400 for
//!   anything that is not a decodable PNG.
//! * `POST /render`: `{v, image_id, latent}` where `latent` is exactly one of
//!   `{"explicit": [..]}`, `{"seed": n}`, `{"codebook": {"name", "center"}}`,
//!   `{"interpolate": {"z_a", "z_b", "t"}}` or
//!   `{"adjust": {"base", "deltas": [[j, delta], ..]}}`. Answers
//!   `{v, png, latent, width, height}` with a base64 8-bit PNG and the
//!   resolved latent; with `Accept: image/png` the body is the raw PNG and
//!   the latent travels in the `x-latent` header.
//! * `GET /codebooks` → `{v, codebooks: [{name, d, K, source}]}`.
//! * `GET /model` → `{v, d, flow_steps, checkpoint_sha256, ..}`.
//!
//! Everything except `/images` answers 503 until the checkpoint is loaded.

use std::collections::{BTreeMap, HashMap};
use std::future::IntoFuture;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::checkpoint::{file_sha256, load_checkpoint, Segment};
use crate::error::{Error, Result};
use crate::flow::LatentVector;
use crate::image::Image;
use crate::model::Model;
use crate::style_ops::{adjust_dimension, interpolate, sample_latents, LatentCodebook};

pub const API_VERSION: u64 = 1;
pub const MAX_IMAGE_SIDE: usize = 2048;
pub const DEFAULT_MAX_SESSIONS: usize = 64;
/// Upload size cap; a 2048² 16-bit RGBA PNG fits comfortably.
const MAX_BODY_BYTES: usize = 96 * 1024 * 1024;

/// The immutable state behind the routes once a checkpoint is loaded.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub segment: Segment,
    pub iteration: u64,
    pub codebooks: BTreeMap<String, LatentCodebook>,
}

impl LoadedModel {
    /// Loads a checkpoint and every `*.json` codebook in `codebook_dir`
    /// (named by file stem).
    pub fn load(checkpoint: &Path, codebook_dir: Option<&Path>) -> Result<Self> {
        let ck = load_checkpoint(checkpoint)?;
        let sha = file_sha256(checkpoint)?;
        let mut codebooks = BTreeMap::new();
        if let Some(dir) = codebook_dir {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                let cb = LatentCodebook::load(&p)?;
                if cb.d != ck.model.style_dim() {
                    return Err(Error::format(
                        &p,
                        format!("codebook d = {} but the model has d = {}", cb.d, ck.model.style_dim()),
                    ));
                }
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                codebooks.insert(name, cb);
            }
        }
        Ok(Self {
            segment: ck.segment(),
            iteration: ck.iteration,
            model: ck.model,
            checkpoint: checkpoint.to_path_buf(),
            checkpoint_sha256: sha,
            codebooks,
        })
    }
}

struct Session {
    image: Arc<Image>,
    #[allow(dead_code)]
    uploaded: SystemTime,
    last_used: u64,
}

/// Uploaded images, evicting the least recently used beyond `capacity`.
pub struct SessionStore {
    capacity: usize,
    prefix: u32,
    next_id: u64,
    tick: u64,
    entries: HashMap<String, Session>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            prefix: rand::random(),
            next_id: 0,
            tick: 0,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, image: Image) -> String {
        while self.entries.len() >= self.capacity {
            let oldest = self
                .entries
                .iter()
                .min_by_key(|(_, s)| s.last_used)
                .map(|(k, _)| k.clone())
                .expect("store is non-empty");
            self.entries.remove(&oldest);
        }
        self.tick += 1;
        let id = format!("{:08x}{:08x}", self.prefix, self.next_id);
        self.next_id += 1;
        self.entries.insert(
            id.clone(),
            Session {
                image: Arc::new(image),
                uploaded: SystemTime::now(),
                last_used: self.tick,
            },
        );
        id
    }

    pub fn get(&mut self, id: &str) -> Option<Arc<Image>> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(id).map(|s| {
            s.last_used = tick;
            s.image.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct AppState {
    model: OnceLock<Arc<LoadedModel>>,
    sessions: Mutex<SessionStore>,
}

impl AppState {
    /// State with no model yet; routes that need it answer 503.
    pub fn new(max_sessions: usize) -> Arc<Self> {
        Arc::new(Self {
            model: OnceLock::new(),
            sessions: Mutex::new(SessionStore::new(max_sessions)),
        })
    }

    pub fn with_model(model: LoadedModel, max_sessions: usize) -> Arc<Self> {
        let state = Self::new(max_sessions);
        state.install(model);
        state
    }

    /// Publishes the model; later calls are ignored.
    pub fn install(&self, model: LoadedModel) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }

    fn loaded(&self) -> std::result::Result<Arc<LoadedModel>, ApiError> {
        self.model
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "checkpoint is still loading"))
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
    extra: Option<(&'static str, Value)>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            extra: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"v": API_VERSION, "error": self.message});
        if let Some((k, v)) = self.extra {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) | Error::Index { .. } | Error::Input(_) | Error::Parameter(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn png_dimensions(bytes: &[u8]) -> std::result::Result<(usize, usize), String> {
    let reader = png::Decoder::new(std::io::Cursor::new(bytes))
        .read_info()
        .map_err(|e| e.to_string())?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

async fn upload_image(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> ApiResult<Json<Value>> {
    let field = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
        .ok_or_else(|| ApiError::bad_request("multipart body has no parts"))?;
    let bytes = field
        .bytes()
        .await
        .map_err(|e| ApiError::bad_request(format!("unreadable upload: {e}")))?;
    let (h, w) = png_dimensions(&bytes).map_err(|e| ApiError::bad_request(format!("not a PNG image: {e}")))?;
    if h > MAX_IMAGE_SIDE || w > MAX_IMAGE_SIDE {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: format!("image is {w}×{h}; the limit is {MAX_IMAGE_SIDE}×{MAX_IMAGE_SIDE}"),
            extra: Some(("limit", json!({"width": MAX_IMAGE_SIDE, "height": MAX_IMAGE_SIDE}))),
        });
    }
    let image = tokio::task::spawn_blocking(move || Image::decode_png(&bytes))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::bad_request(format!("not a PNG image: {e}")))?;
    let id = state.sessions.lock().expect("session lock").insert(image);
    Ok(Json(json!({"v": API_VERSION, "id": id, "width": w, "height": h})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub v: u64,
    pub image_id: String,
    pub latent: LatentSource,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum LatentSource {
    Explicit(Vec<f32>),
    Seed(u64),
    Codebook { name: String, center: usize },
    Interpolate { z_a: Vec<f32>, z_b: Vec<f32>, t: f64 },
    Adjust { base: Vec<f32>, deltas: Vec<(usize, f64)> },
}

fn check_len(what: &str, z: &[f32], d: usize) -> ApiResult<()> {
    if z.len() != d {
        return Err(ApiError::bad_request(format!("{what} has length {} but d = {d}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Turns a latent source into a concrete `d`-vector.
fn resolve_latent(source: &LatentSource, loaded: &LoadedModel) -> ApiResult<LatentVector> {
    let d = loaded.model.style_dim();
    match source {
        LatentSource::Explicit(z) => {
            check_len("explicit latent", z, d)?;
            Ok(LatentVector(z.clone()))
        }
        LatentSource::Seed(seed) => Ok(sample_latents(d, 1, *seed).remove(0)),
        LatentSource::Codebook { name, center } => {
            let cb = loaded
                .codebooks
                .get(name)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown codebook {name:?}")))?;
            Ok(cb.center(*center)?.clone())
        }
        LatentSource::Interpolate { z_a, z_b, t } => {
            check_len("z_a", z_a, d)?;
            check_len("z_b", z_b, d)?;
            Ok(interpolate(&LatentVector(z_a.clone()), &LatentVector(z_b.clone()), *t)?)
        }
        LatentSource::Adjust { base, deltas } => {
            check_len("base latent", base, d)?;
            let mut z = LatentVector(base.clone());
            for &(j, delta) in deltas {
                z = adjust_dimension(&z, j, delta)?;
            }
            Ok(z)
        }
    }
}

fn wants_raw_png(headers: &HeaderMap) -> bool {
    headers
        .get_all(header::ACCEPT)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .any(|v| v.split(',').any(|t| t.trim().starts_with("image/png")))
}

async fn render(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let loaded = state.loaded()?;
    let req: RenderRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid render request: {e}")))?;
    if req.v != API_VERSION {
        return Err(ApiError::bad_request(format!("unsupported request version {}", req.v)));
    }
    let image = state
        .sessions
        .lock()
        .expect("session lock")
        .get(&req.image_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {:?}", req.image_id)))?;
    let z = resolve_latent(&req.latent, &loaded)?;
    let z_for_render = z.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        loaded.model.render(&image, &z_for_render)?.encode_png(false)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if wants_raw_png(&headers) {
        let latent = serde_json::to_string(&z).expect("latent serializes");
        let mut resp = (StatusCode::OK, png).into_response();
        resp.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        resp.headers_mut().insert(
            "x-latent",
            HeaderValue::from_str(&latent).expect("json numbers are valid header text"),
        );
        return Ok(resp);
    }
    let (w, h) = {
        let dims = png_dimensions(&png).expect("own encoding");
        (dims.1, dims.0)
    };
    Ok(Json(json!({
        "v": API_VERSION,
        "png": base64::engine::general_purpose::STANDARD.encode(&png),
        "latent": z,
        "width": w,
        "height": h,
    }))
    .into_response())
}

async fn list_codebooks(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let loaded = state.loaded()?;
    let list: Vec<Value> = loaded
        .codebooks
        .iter()
        .map(|(name, cb)| json!({"name": name, "d": cb.d, "K": cb.k, "source": cb.source}))
        .collect();
    Ok(Json(json!({"v": API_VERSION, "codebooks": list})))
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let loaded = state.loaded()?;
    let m = &loaded.model;
    Ok(Json(json!({
        "v": API_VERSION,
        "d": m.style_dim(),
        "flow_steps": m.flow.steps.len(),
        "condition_dim": m.flow.condition_dim(),
        "checkpoint_sha256": loaded.checkpoint_sha256,
        "segment": loaded.segment,
        "iteration": loaded.iteration,
    })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", post(upload_image))
        .route("/render", post(render))
        .route("/codebooks", get(list_codebooks))
        .route("/model", get(model_info))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub checkpoint: PathBuf,
    pub codebook_dir: Option<PathBuf>,
    pub max_sessions: usize,
}

/// Binds, starts answering (503 while loading), then loads the checkpoint.
/// Returns only on a load or server error.
pub async fn serve(cfg: ServeConfig, on_ready: impl FnOnce(SocketAddr) + Send + 'static) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.addr)
        .await
        .map_err(|e| Error::Input(format!("cannot bind {}: {e}", cfg.addr)))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Input(format!("listener address: {e}")))?;
    let state = AppState::new(cfg.max_sessions);
    let server = tokio::spawn(axum::serve(listener, router(state.clone())).into_future());
    let (ck, dir) = (cfg.checkpoint.clone(), cfg.codebook_dir.clone());
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&ck, dir.as_deref()))
        .await
        .map_err(|e| Error::State(format!("loader task failed: {e}")))??;
    state.install(loaded);
    on_ready(local);
    match server.await {
        Ok(Ok(())) => Ok(()),
        Ok(Err(e)) => Err(Error::State(format!("server error: {e}"))),
        Err(e) => Err(Error::State(format!("server task failed: {e}"))),
    }
}
