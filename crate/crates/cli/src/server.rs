//! HTTP front end over a loaded [`RouterState`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use taskroute::artifact::{from_bytes, sha256_hex, Artifact};
use taskroute::classifier::ClassifierParams;
use taskroute::config::PipelineConfig;
use taskroute::data::load_pool;
use taskroute::discovery::DiscoveryResult;
use taskroute::inference::{route_with_tolerance, RouterState};
use taskroute::router::RouterParams;
use taskroute::{Error, Result};

/// Where a trained pipeline lives on disk.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
    pub pool: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>, pool: impl Into<PathBuf>) -> Self {
        ArtifactPaths {
            dir: dir.into(),
            pool: pool.into(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.tkra")
    }

    pub fn discovery(&self) -> PathBuf {
        self.dir.join("discovery.tkra")
    }

    pub fn classifier(&self) -> PathBuf {
        self.dir.join("classifier.tkra")
    }

    pub fn router(&self) -> PathBuf {
        self.dir.join("router.tkra")
    }
}

/// Loaded artifacts plus what was loaded and when.
#[derive(Debug)]
pub struct ServiceState {
    pub routing: RouterState,
    /// SHA-256 of each artifact file, keyed by artifact name.
    pub checksums: BTreeMap<String, String>,
    pub loaded_at_unix: u64,
}

fn read_checked<T: Artifact>(path: &Path, sums: &mut BTreeMap<String, String>, name: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    sums.insert(name.to_string(), sha256_hex(&bytes));
    from_bytes(&bytes, path)
}

pub fn load_service_state(paths: &ArtifactPaths) -> Result<ServiceState> {
    let mut checksums = BTreeMap::new();
    let config: PipelineConfig = read_checked(&paths.config(), &mut checksums, "config")?;
    let discovery: DiscoveryResult = read_checked(&paths.discovery(), &mut checksums, "discovery")?;
    let classifier: ClassifierParams = read_checked(&paths.classifier(), &mut checksums, "classifier")?;
    let router: RouterParams = read_checked(&paths.router(), &mut checksums, "router")?;
    let pool = load_pool(&paths.pool)?;
    let routing = RouterState::new(config, pool, discovery, classifier, router)?;
    let loaded_at_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    Ok(ServiceState {
        routing,
        checksums,
        loaded_at_unix,
    })
}

/// Shared server state. Requests clone the inner `Arc`, so a reload never
/// changes the state a request already holds.
pub struct AppState {
    current: RwLock<Arc<ServiceState>>,
    paths: Option<ArtifactPaths>,
}

impl AppState {
    pub fn new(state: ServiceState, paths: Option<ArtifactPaths>) -> Arc<Self> {
        Arc::new(AppState {
            current: RwLock::new(Arc::new(state)),
            paths,
        })
    }

    pub fn current(&self) -> Arc<ServiceState> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn swap(&self, state: ServiceState) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(state);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub tolerance: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RouteResponse {
    pub model_id: String,
    pub model_index: usize,
    pub task_id: Option<usize>,
    pub final_scores: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub pool_size: usize,
    pub cluster_count: usize,
    pub checksums: BTreeMap<String, String>,
    pub loaded_at_unix: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

fn reject(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: code.to_string(),
        message: message.into(),
    };
    (status, Json(body)).into_response()
}

fn health_of(s: &ServiceState) -> Health {
    Health {
        status: "ok".into(),
        pool_size: s.routing.pool.len(),
        cluster_count: s.routing.discovery.clusters.len(),
        checksums: s.checksums.clone(),
        loaded_at_unix: s.loaded_at_unix,
    }
}

async fn route_handler(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RouteRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()),
    };
    if !(0.0..=1.0).contains(&req.tolerance) {
        return reject(
            StatusCode::BAD_REQUEST,
            "invalid_tolerance",
            format!("tolerance {} outside [0, 1]", req.tolerance),
        );
    }
    let state = app.current();
    let expected = state.routing.prompt_dim();
    if req.embedding.len() != expected {
        return reject(
            StatusCode::UNPROCESSABLE_ENTITY,
            "dimension_mismatch",
            format!("embedding has {} values, expected {expected}", req.embedding.len()),
        );
    }
    match route_with_tolerance(&state.routing, &req.embedding, req.tolerance) {
        Ok(d) => Json(RouteResponse {
            model_id: state.routing.pool[d.chosen_model].model_id.clone(),
            model_index: d.chosen_model,
            task_id: d.task_id,
            final_scores: d.final_scores,
            cost: d.cost,
        })
        .into_response(),
        Err(e @ Error::Dimension { .. }) => reject(StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch", e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, "routing_failed", e.to_string()),
    }
}

async fn health_handler(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(health_of(&app.current()))
}

async fn reload_handler(State(app): State<Arc<AppState>>) -> Response {
    let Some(paths) = app.paths.clone() else {
        return reject(StatusCode::CONFLICT, "no_artifact_paths", "state was not loaded from disk");
    };
    let loaded = tokio::task::spawn_blocking(move || load_service_state(&paths)).await;
    match loaded {
        Ok(Ok(state)) => {
            let health = health_of(&state);
            app.swap(state);
            log::info!("reloaded artifacts");
            Json(health).into_response()
        }
        Ok(Err(e)) => reject(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()),
    }
}

pub fn app_router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/route", post(route_handler))
        .route("/healthz", get(health_handler))
        .route("/reload", post(reload_handler))
        .with_state(app)
}

/// Serves until the listener fails or the process receives Ctrl-C.
pub async fn serve(app: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, app_router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
