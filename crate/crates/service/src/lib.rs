//! HTTP front end of the governance cascade.
//!
//! The router serves submissions, decision lookups, the review queue with
//! claim locking, verdicts, metrics and review transcripts. Until the policy
//! registry, dataset store and backends are built, every endpoint but
//! `/healthz` answers 503 and `/healthz` reports `not_ready`.

pub mod config;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use argus_core::clock::{Clock, SystemClock};
use argus_core::dataset::{AdSample, DatasetStore, Partition};
use argus_core::debate::DebateEngine;
use argus_core::governance::{GovernanceError, GovernanceService, ReviewVerdict, ScreeningRules};
use argus_core::pipeline::builtin_registry;
use argus_core::policy::PolicyRegistry;
use argus_core::retrieval::EvidenceIndex;
use argus_core::PolicyKey;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

pub use config::{BackendBlocks, ConfigError, ServiceConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared handler state. The governance service is set once startup completes.
pub struct AppState {
    service: OnceLock<Arc<GovernanceService>>,
    token: Option<String>,
}

impl AppState {
    pub fn new(token: Option<String>) -> Self {
        AppState {
            service: OnceLock::new(),
            token,
        }
    }

    pub fn ready(service: Arc<GovernanceService>, token: Option<String>) -> Self {
        let s = AppState::new(token);
        s.set_service(service);
        s
    }

    pub fn set_service(&self, service: Arc<GovernanceService>) {
        if self.service.set(service).is_err() {
            log::warn!("governance service already initialised");
        }
    }

    pub fn service(&self) -> Option<&Arc<GovernanceService>> {
        self.service.get()
    }

    pub fn is_ready(&self) -> bool {
        self.service.get().is_some()
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotReady,
    Unauthorized,
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl From<GovernanceError> for ApiError {
    fn from(e: GovernanceError) -> Self {
        let msg = e.to_string();
        if e.is_conflict() {
            return ApiError::Conflict(msg);
        }
        match e {
            GovernanceError::UnknownDecision(_) | GovernanceError::UnknownTask(_) => ApiError::NotFound(msg),
            GovernanceError::InvalidKeys(_) | GovernanceError::InvalidSubmission(_) => ApiError::BadRequest(msg),
            _ => ApiError::Internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, "service not ready".to_string()),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "missing or wrong bearer token".to_string()),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

type Shared = Arc<AppState>;

fn service(st: &AppState) -> Result<Arc<GovernanceService>, ApiError> {
    st.service().cloned().ok_or(ApiError::NotReady)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, GovernanceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
pub struct SubmitRequest {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
pub struct ClaimRequest {
    pub reviewer_id: String,
}

#[derive(Debug, Deserialize)]
pub struct BackcheckRequest {
    pub submission_id: String,
    pub labels: BTreeMap<PolicyKey, u8>,
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    #[serde(default)]
    pub window: Option<String>,
}

/// `"all"` or empty means no window; otherwise seconds, optionally suffixed
/// with `s`, `m`, `h` or `d`.
pub fn parse_window(raw: Option<&str>) -> Result<Option<Duration>, String> {
    let raw = match raw.map(str::trim) {
        None | Some("") | Some("all") => return Ok(None),
        Some(r) => r,
    };
    let (digits, unit) = match raw.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => (&raw[..i], c),
        _ => (raw, 's'),
    };
    let n: u64 = digits.parse().map_err(|_| format!("bad window {raw:?}"))?;
    let secs = match unit {
        's' => n,
        'm' => n * 60,
        'h' => n * 3600,
        'd' => n * 86_400,
        _ => return Err(format!("bad window unit in {raw:?}")),
    };
    Ok(Some(Duration::from_secs(secs)))
}

async fn healthz(State(st): State<Shared>) -> Response {
    if st.is_ready() {
        (StatusCode::OK, Json(json!({ "status": "ready" }))).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "not_ready" }))).into_response()
    }
}

async fn submit_ad(State(st): State<Shared>, Json(req): Json<SubmitRequest>) -> Result<Response, ApiError> {
    let svc = service(&st)?;
    let sample = AdSample {
        id: req.id,
        text: req.text,
        image_ref: req.image_ref,
        caption: req.caption,
        partition: Partition::Live,
        metadata: req.metadata,
    };
    let decision = blocking(move || svc.submit(sample)).await?;
    Ok((StatusCode::CREATED, Json(decision)).into_response())
}

async fn get_decision(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let d = service(&st)?
        .decision(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown decision {id}")))?;
    Ok(Json(d).into_response())
}

async fn review_queue(State(st): State<Shared>) -> Result<Response, ApiError> {
    Ok(Json(service(&st)?.review_queue()).into_response())
}

async fn claim_task(
    State(st): State<Shared>,
    Path(task_id): Path<String>,
    Json(req): Json<ClaimRequest>,
) -> Result<Response, ApiError> {
    if req.reviewer_id.trim().is_empty() {
        return Err(ApiError::BadRequest("empty reviewer_id".into()));
    }
    let task = service(&st)?.claim(&task_id, &req.reviewer_id)?;
    Ok(Json(task).into_response())
}

async fn submit_verdict(
    State(st): State<Shared>,
    Path(task_id): Path<String>,
    Json(verdict): Json<ReviewVerdict>,
) -> Result<Response, ApiError> {
    if verdict.reviewer_id.trim().is_empty() {
        return Err(ApiError::BadRequest("empty reviewer_id".into()));
    }
    let svc = service(&st)?;
    let d = blocking(move || svc.submit_verdict(&task_id, verdict)).await?;
    Ok(Json(d).into_response())
}

async fn record_backcheck(State(st): State<Shared>, Json(req): Json<BackcheckRequest>) -> Result<Response, ApiError> {
    let b = service(&st)?.record_backcheck(&req.submission_id, req.labels)?;
    Ok((StatusCode::CREATED, Json(b)).into_response())
}

async fn metrics(State(st): State<Shared>, Query(q): Query<MetricsQuery>) -> Result<Response, ApiError> {
    let svc = service(&st)?;
    let window = parse_window(q.window.as_deref()).map_err(ApiError::BadRequest)?;
    let m = svc.metrics(window);
    let mut body = serde_json::to_value(m).map_err(|e| ApiError::Internal(e.to_string()))?;
    body["window_secs"] = window.map_or(serde_json::Value::Null, |w| json!(w.as_secs()));
    Ok(Json(body).into_response())
}

async fn get_transcript(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let t = service(&st)?
        .transcript(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown transcript {id}")))?;
    Ok(Json(t).into_response())
}

async fn require_token(State(st): State<Shared>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &st.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return Err(ApiError::Unauthorized);
        }
    }
    Ok(next.run(req).await)
}

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/ads", post(submit_ad))
        .route("/decisions/{id}", get(get_decision))
        .route("/review/queue", get(review_queue))
        .route("/review/{task_id}/claim", post(claim_task))
        .route("/review/{task_id}/verdict", post(submit_verdict))
        .route("/backchecks", post(record_backcheck))
        .route("/metrics", get(metrics))
        .route("/transcripts/{id}", get(get_transcript))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

/// Builds the registry, store, screening rules, backends and optional debate
/// engine. Blocking: backends may open HTTP clients and the store replays its log.
pub fn build_service(config: &ServiceConfig) -> Result<GovernanceService, ServiceError> {
    config.validate()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let startup = |e: &dyn std::fmt::Display| ServiceError::Startup(e.to_string());
    let registry: Arc<PolicyRegistry> = match &config.catalog_path {
        Some(p) => {
            let r = Arc::new(PolicyRegistry::new());
            r.import_catalog(p, clock.as_ref()).map_err(|e| startup(&e))?;
            r
        }
        None => builtin_registry().map_err(|e| startup(&e))?,
    };
    let store = Arc::new(match &config.store_path {
        Some(p) => DatasetStore::open(p, registry.clone(), clock.clone()).map_err(|e| startup(&e))?,
        None => DatasetStore::in_memory(registry.clone(), clock.clone()),
    });
    let rules = match &config.screening_rules_path {
        Some(p) => ScreeningRules::load(p).map_err(|e| startup(&e))?,
        None => ScreeningRules::default(),
    };
    let backends = config.backends.resolve()?.build().map_err(|e| startup(&e))?;
    let mut svc = GovernanceService::new(
        registry.clone(),
        store,
        rules,
        backends.policy.clone(),
        clock,
        config.governance.clone(),
    )
    .map_err(|e| startup(&e))?;
    if config.review_transcripts {
        let index = match &config.index_path {
            Some(p) => EvidenceIndex::load(p),
            None => EvidenceIndex::build(&registry.clauses(), &[]),
        }
        .map_err(|e| startup(&e))?;
        let engine = DebateEngine::new(registry, backends, Arc::new(index), config.debate.clone())
            .map_err(|e| startup(&e))?;
        svc = svc.with_debate(Arc::new(engine));
    }
    Ok(svc)
}

fn bearer_token(config: &ServiceConfig) -> Result<Option<String>, ServiceError> {
    match &config.bearer_token_env {
        None => Ok(None),
        Some(var) => match std::env::var(var) {
            Ok(t) if !t.is_empty() => Ok(Some(t)),
            _ => Err(ServiceError::Startup(format!("bearer token variable {var} is unset"))),
        },
    }
}

/// Binds `config.bind` and serves until `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.bind.to_string(),
            source,
        })?;
    serve_on(listener, config, shutdown).await
}

/// Serves on an already bound listener. The listener accepts at once and
/// answers `not_ready` while the service builds in the background. After
/// `shutdown` resolves, in-flight requests drain and the decision log is written.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    config.validate()?;
    let state = Arc::new(AppState::new(bearer_token(&config)?));
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<ServiceError>();
    {
        let state = state.clone();
        let config = config.clone();
        tokio::spawn(async move {
            match tokio::task::spawn_blocking(move || build_service(&config)).await {
                Ok(Ok(svc)) => {
                    state.set_service(Arc::new(svc));
                    log::info!("governance service ready");
                }
                Ok(Err(e)) => {
                    let _ = fail_tx.send(e);
                }
                Err(e) => {
                    let _ = fail_tx.send(ServiceError::Startup(e.to_string()));
                }
            }
        });
    }
    let failure: Arc<Mutex<Option<ServiceError>>> = Arc::default();
    let stop = {
        let failure = failure.clone();
        async move {
            tokio::select! {
                _ = shutdown => {}
                Ok(e) = fail_rx => *failure.lock().unwrap_or_else(|p| p.into_inner()) = Some(e),
            }
        }
    };
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(stop)
        .await?;
    if let Some(e) = failure.lock().unwrap_or_else(|p| p.into_inner()).take() {
        return Err(e);
    }
    if let (Some(path), Some(svc)) = (&config.decision_log_path, state.service()) {
        let n = svc
            .write_decision_log(path)
            .map_err(|e| ServiceError::Startup(format!("writing decision log: {e}")))?;
        log::info!("wrote {n} decision log entries to {}", path.display());
    }
    Ok(())
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for Ctrl-C: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                log::error!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutdown requested; draining");
}
