// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP service for lens grids and single-vector decoding.
//!
//! Every model is owned by one worker thread fed through a bounded queue,
//! so work on a model is never interleaved. A full queue answers 503.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use entlens::evaluation::config_hash;
use entlens::lens::{compute_grid, LensOptions, TaskVectorSet, TvPolicy, GRID_SCHEMA};
use entlens::model::{MixedInput, ModelHandle, ModelRegistry};
use entlens::task_vectors::{decode_prompt, Setting, TaskVector};

use crate::commands::{Context, ServeArgs};
use crate::CliError;

pub const META_SCHEMA: &str = "entlens.meta/1";
pub const DECODE_SCHEMA: &str = "entlens.decode/1";
pub const HASH_HEADER: &str = "x-entlens-config-hash";

/// Task vectors of one model, by setting and layer.
#[derive(Debug, Clone, Default)]
pub struct TaskVectorStore {
    pub vectors: BTreeMap<(Setting, usize), TaskVector>,
}

impl TaskVectorStore {
    pub fn insert(&mut self, tv: TaskVector) {
        self.vectors.insert((tv.setting, tv.layer), tv);
    }

    /// Loads every `tv-*` checkpoint in `dir` belonging to `model_id`.
    pub fn load_dir(dir: &Path, model_id: &str) -> entlens::Result<Self> {
        let mut store = TaskVectorStore::default();
        let Ok(entries) = std::fs::read_dir(dir) else {
            return Ok(store);
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix(".json") else { continue };
            if !stem.starts_with("tv-") {
                continue;
            }
            let tv = TaskVector::load(&dir.join(stem))?;
            if tv.model_id == model_id {
                store.insert(tv);
            }
        }
        Ok(store)
    }

    fn lens_set(&self) -> TaskVectorSet {
        let mut set = TaskVectorSet::default();
        for ((setting, _), tv) in &self.vectors {
            if *setting == Setting::Uncontextual {
                set.insert(tv.clone());
            }
        }
        set
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TvInfo {
    pub id: String,
    pub layer: usize,
    pub setting: Setting,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub layers: Vec<usize>,
    pub task_vectors: Vec<TvInfo>,
}

type Job = Box<dyn FnOnce(&ModelHandle, &TaskVectorStore) + Send>;

struct Worker {
    tx: SyncSender<Job>,
    pending: Arc<AtomicUsize>,
    info: ModelInfo,
}

pub struct ServiceState {
    workers: BTreeMap<String, Worker>,
    config_hash: String,
    queue_depth: usize,
    lens_options: LensOptions,
}

impl ServiceState {
    /// Starts one worker thread per model.
    pub fn new(models: Vec<(ModelHandle, TaskVectorStore)>, queue_depth: usize) -> Self {
        let queue_depth = queue_depth.max(1);
        let lens_options = LensOptions::default();
        let mut workers = BTreeMap::new();
        let mut fingerprint = Vec::new();
        for (handle, store) in models {
            let info = ModelInfo {
                model_id: handle.model_id.clone(),
                n_layers: handle.n_layers(),
                d_model: handle.d_model(),
                layers: (0..=handle.n_layers()).collect(),
                task_vectors: store
                    .vectors
                    .values()
                    .map(|tv| TvInfo {
                        id: TaskVector::file_stem(tv.setting, tv.layer),
                        layer: tv.layer,
                        setting: tv.setting,
                    })
                    .collect(),
            };
            fingerprint.push(serde_json::json!({
                "model_id": info.model_id,
                "weights": handle.weight_hash(),
                "task_vectors": info.task_vectors.iter().map(|t| &t.id).collect::<Vec<_>>(),
            }));
            let (tx, rx) = sync_channel::<Job>(queue_depth);
            let pending = Arc::new(AtomicUsize::new(0));
            let counter = pending.clone();
            std::thread::Builder::new()
                .name(format!("model-{}", info.model_id))
                .spawn(move || {
                    for job in rx {
                        counter.fetch_sub(1, Ordering::SeqCst);
                        job(&handle, &store);
                    }
                })
                .expect("spawn model worker");
            workers.insert(info.model_id.clone(), Worker { tx, pending, info });
        }
        let config_hash = config_hash(&serde_json::json!({
            "models": fingerprint,
            "lens_options": lens_options,
        }));
        ServiceState {
            workers,
            config_hash,
            queue_depth,
            lens_options,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }
}

pub fn router(state: Arc<ServiceState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/lens", post(lens))
        .route("/decode", post(decode))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

struct ApiError {
    status: StatusCode,
    message: String,
    queue_depth: Option<usize>,
    hash: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.message, "config_hash": self.hash });
        if let Some(d) = self.queue_depth {
            body["queue_depth"] = d.into();
        }
        with_hash(
            (self.status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response(),
            &self.hash,
        )
    }
}

fn with_hash(mut resp: Response, hash: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(hash) {
        resp.headers_mut().insert(HASH_HEADER, v);
    }
    resp
}

fn json_response(state: &ServiceState, body: Vec<u8>) -> Response {
    with_hash(
        ([(header::CONTENT_TYPE, "application/json")], body).into_response(),
        &state.config_hash,
    )
}

impl ServiceState {
    fn error(&self, status: StatusCode, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            message: message.into(),
            queue_depth: None,
            hash: self.config_hash.clone(),
        }
    }

    fn worker(&self, model_id: Option<&str>) -> Result<&Worker, ApiError> {
        match model_id {
            Some(id) => self
                .workers
                .get(id)
                .ok_or_else(|| self.error(StatusCode::CONFLICT, format!("unknown model `{id}`"))),
            None if self.workers.len() == 1 => Ok(self.workers.values().next().expect("one worker")),
            None => Err(self.error(StatusCode::BAD_REQUEST, "model_id is required")),
        }
    }

    /// Queues `f` on the model's worker and waits for its result.
    async fn submit<T, F>(&self, worker: &Worker, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&ModelHandle, &TaskVectorStore) -> T + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |h, s| {
            let _ = tx.send(f(h, s));
        });
        worker.pending.fetch_add(1, Ordering::SeqCst);
        match worker.tx.try_send(job) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                worker.pending.fetch_sub(1, Ordering::SeqCst);
                return Err(ApiError {
                    status: StatusCode::SERVICE_UNAVAILABLE,
                    message: format!("model `{}` is saturated", worker.info.model_id),
                    queue_depth: Some(worker.pending.load(Ordering::SeqCst).max(self.queue_depth)),
                    hash: self.config_hash.clone(),
                });
            }
            Err(TrySendError::Disconnected(_)) => {
                worker.pending.fetch_sub(1, Ordering::SeqCst);
                return Err(self.error(StatusCode::INTERNAL_SERVER_ERROR, "model worker stopped"));
            }
        }
        rx.await
            .map_err(|_| self.error(StatusCode::INTERNAL_SERVER_ERROR, "model worker dropped the request"))
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(state: &ServiceState, body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| state.error(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    with_hash("ok".into_response(), &state.config_hash)
}

async fn meta(State(state): State<Arc<ServiceState>>) -> Response {
    let body = serde_json::json!({
        "schema": META_SCHEMA,
        "schemas": { "meta": META_SCHEMA, "lens_grid": GRID_SCHEMA, "decode": DECODE_SCHEMA },
        "models": state.workers.values().map(|w| &w.info).collect::<Vec<_>>(),
        "config_hash": state.config_hash,
    });
    json_response(&state, serde_json::to_vec(&body).expect("meta serializes"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensRequest {
    pub text: String,
    #[serde(default)]
    pub model_id: Option<String>,
    /// Defaults to every layer with an uncontextual task vector.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub tv_policy: Option<TvPolicy>,
}

async fn lens(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: LensRequest = parse_body(&state, &body)?;
    if req.text.trim().is_empty() {
        return Err(state.error(StatusCode::BAD_REQUEST, "text must not be empty"));
    }
    let worker = state.worker(req.model_id.as_deref())?;
    let n_layers = worker.info.n_layers;
    let unctx: Vec<usize> = worker
        .info
        .task_vectors
        .iter()
        .filter(|t| t.setting == Setting::Uncontextual)
        .map(|t| t.layer)
        .collect();
    let layers = match req.layers {
        Some(l) if l.is_empty() => return Err(state.error(StatusCode::BAD_REQUEST, "layers must not be empty")),
        Some(l) => l,
        None => unctx.clone(),
    };
    if layers.is_empty() {
        return Err(state.error(StatusCode::CONFLICT, "model has no uncontextual task vectors"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > n_layers) {
        return Err(state.error(StatusCode::BAD_REQUEST, format!("layer {l} out of range [0, {n_layers}]")));
    }
    let policy = req.tv_policy.unwrap_or(TvPolicy::PerLayer);
    if let TvPolicy::Shared(k) = policy {
        if !unctx.contains(&k) {
            return Err(state.error(StatusCode::CONFLICT, format!("no uncontextual task vector for layer {k}")));
        }
    }
    let options = LensOptions {
        tv_policy: policy,
        ..state.lens_options.clone()
    };
    let text = req.text;
    let result = state
        .submit(worker, move |h, store| {
            compute_grid(h, &text, &store.lens_set(), &layers, &options)
                .map(|g| serde_json::to_vec(&g).expect("grid serializes"))
        })
        .await?;
    match result {
        Ok(body) => Ok(json_response(&state, body)),
        Err(e) => Err(state.error(StatusCode::BAD_REQUEST, e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub vector: Vec<f32>,
    pub layer: usize,
    pub setting: Setting,
    #[serde(default)]
    pub model_id: Option<String>,
    /// Sentence prepended in the contextual setting.
    #[serde(default)]
    pub context: Option<String>,
}

#[derive(Debug, Serialize)]
struct DecodeResponse {
    schema: &'static str,
    model_id: String,
    mention: String,
    task_vector_id: String,
    config_hash: String,
}

async fn decode(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: DecodeRequest = parse_body(&state, &body)?;
    let worker = state.worker(req.model_id.as_deref())?;
    if req.vector.len() != worker.info.d_model {
        return Err(state.error(
            StatusCode::BAD_REQUEST,
            format!("vector has {} dims, model has {}", req.vector.len(), worker.info.d_model),
        ));
    }
    if req.vector.iter().any(|x| !x.is_finite()) {
        return Err(state.error(StatusCode::BAD_REQUEST, "vector contains non-finite values"));
    }
    match (req.setting, &req.context) {
        (Setting::Contextual, None) => {
            return Err(state.error(StatusCode::BAD_REQUEST, "contextual decoding needs `context`"))
        }
        (Setting::Uncontextual, Some(_)) => {
            return Err(state.error(StatusCode::BAD_REQUEST, "uncontextual decoding takes no `context`"))
        }
        _ => {}
    }
    let tv_id = TaskVector::file_stem(req.setting, req.layer);
    if !worker.info.task_vectors.iter().any(|t| t.id == tv_id) {
        return Err(state.error(StatusCode::CONFLICT, format!("unknown task vector `{tv_id}`")));
    }
    let key = (req.setting, req.layer);
    let decoding = state.lens_options.decoding.clone();
    let result = state
        .submit(worker, move |h, store| -> entlens::Result<String> {
            let tv = store.vectors.get(&key).expect("task vector checked");
            let mut input = match &req.context {
                Some(text) => MixedInput::from_tokens(&h.tokenize(text)?.ids),
                None => MixedInput::default(),
            };
            input.push_vector(req.vector);
            input.push_vector(tv.theta.clone());
            decode_prompt(h, &input, &decoding)
        })
        .await?;
    match result {
        Ok(mention) => {
            let body = DecodeResponse {
                schema: DECODE_SCHEMA,
                model_id: worker.info.model_id.clone(),
                mention,
                task_vector_id: tv_id,
                config_hash: state.config_hash.clone(),
            };
            Ok(json_response(&state, serde_json::to_vec(&body).expect("decode serializes")))
        }
        Err(e) => Err(state.error(StatusCode::BAD_REQUEST, e.to_string())),
    }
}

/// Loads the configured models and their task vectors, then serves until
/// interrupted.
pub fn cmd_serve(ctx: &Context, args: &ServeArgs) -> Result<(), CliError> {
    let tv_dir = ctx.tv_dir(&args.tv_dir);
    let mut models = Vec::new();
    if ctx.has_model() {
        let h = ctx.load_model()?;
        let store = TaskVectorStore::load_dir(&tv_dir, &h.model_id)?;
        models.push((h, store));
    } else if let Some(reg) = &ctx.cfg.registry {
        let registry = ModelRegistry::from_file(reg)?;
        for id in registry.ids().map(str::to_string).collect::<Vec<_>>() {
            let h = registry.load(&id)?;
            let sub = tv_dir.join(id.replace('/', "__"));
            let dir = if sub.is_dir() { sub } else { tv_dir.clone() };
            let store = TaskVectorStore::load_dir(&dir, &id)?;
            models.push((h, store));
        }
    }
    if models.is_empty() {
        return Err(CliError::validation("serve needs --model-dir or --registry"));
    }
    let state = Arc::new(ServiceState::new(models, args.queue_depth));
    let app = router(state.clone(), args.ui_dir.clone());
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::runtime(format!("bind {addr}: {e}")))?;
        log::info!("listening on {addr} (config {})", state.config_hash());
        eprintln!("listening on http://{addr}");
        axum::serve(listener, app)
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}
