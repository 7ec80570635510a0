//! HTTP generation service.
//!
//! Handlers read an immutable [`Snapshot`] through an [`ArcSwap`]; reloading a
//! checkpoint builds a new snapshot and swaps it in, so in-flight requests finish
//! on the model they started with.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use lksde::generation::{generate, GenerateRequest};
use lksde::scenario::{load_dataset, FamilyKind, Point};
use lksde::{LkSdeModel, ModelConfig, Scenario};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::commands::resolve;

pub struct Snapshot {
    pub model: LkSdeModel,
    pub scenarios: Vec<Scenario>,
    pub checkpoint: Option<PathBuf>,
}

impl Snapshot {
    pub fn load(checkpoint: &Path, data: &Path) -> lksde::Result<Self> {
        Ok(Self {
            model: LkSdeModel::load(checkpoint)?,
            scenarios: load_dataset(data)?,
            checkpoint: Some(checkpoint.to_path_buf()),
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    snapshot: Arc<ArcSwap<Snapshot>>,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Self {
        Self {
            snapshot: Arc::new(ArcSwap::from_pointee(snapshot)),
        }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    pub fn swap(&self, snapshot: Snapshot) {
        self.snapshot.store(Arc::new(snapshot));
    }

    /// Re-reads the checkpoint behind the current snapshot and swaps it in.
    pub fn reload_model(&self) -> lksde::Result<()> {
        let cur = self.current();
        let Some(path) = cur.checkpoint.clone() else {
            return Ok(());
        };
        let model = LkSdeModel::load(&path)?;
        self.swap(Snapshot {
            model,
            scenarios: cur.scenarios.clone(),
            checkpoint: Some(path),
        });
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/generate", post(generate_handler))
        .route("/scenarios", get(scenarios_handler))
        .route("/model/info", get(model_info_handler))
        .route("/healthz", get(|| async { "ok" }))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    json_response(
        status,
        &ApiError {
            error: message.into(),
        },
    )
}

async fn generate_handler(State(state): State<AppState>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let snap = state.current();
    let work = tokio::task::spawn_blocking(move || {
        req.validate()?;
        let scenario = resolve(&req, &snap.scenarios)?;
        let cfg = &snap.model.config;
        if scenario.history_len() != cfg.history_steps || scenario.horizon() != cfg.horizon {
            return Err(lksde::Error::InvalidArgument(format!(
                "scenario must have {} history and {} future steps",
                cfg.history_steps, cfg.horizon
            )));
        }
        generate(&snap.model, &scenario, &req)
    });
    match work.await {
        Ok(Ok(resp)) => json_response(StatusCode::OK, &resp),
        Ok(Err(lksde::Error::UnknownScenario(id))) => {
            error(StatusCode::NOT_FOUND, format!("unknown scenario id {id:?}"))
        }
        Ok(Err(e @ (lksde::Error::InvalidArgument(_) | lksde::Error::Record { .. }))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub id: String,
    pub family: Option<FamilyKind>,
    pub lanes: Vec<Vec<Point>>,
    pub target_history: Vec<Point>,
    pub future_truth: Vec<Point>,
}

async fn scenarios_handler(State(state): State<AppState>) -> Response {
    let snap = state.current();
    let list: Vec<ScenarioSummary> = snap
        .scenarios
        .iter()
        .map(|s| ScenarioSummary {
            id: s.id.clone(),
            family: s.family,
            lanes: s.lanes.clone(),
            target_history: s.target_history.clone(),
            future_truth: s.future_truth.clone(),
        })
        .collect();
    json_response(StatusCode::OK, &list)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub parameters: usize,
    pub scenarios: usize,
    pub checkpoint: Option<PathBuf>,
}

async fn model_info_handler(State(state): State<AppState>) -> Response {
    let snap = state.current();
    let info = ModelInfo {
        config: snap.model.config.clone(),
        parameters: snap
            .model
            .store
            .ids()
            .map(|id| snap.model.store.get(id).data().len())
            .sum(),
        scenarios: snap.scenarios.len(),
        checkpoint: snap.checkpoint.clone(),
    };
    json_response(StatusCode::OK, &info)
}

/// Serves until ctrl-c. On unix, SIGHUP reloads the checkpoint.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    #[cfg(unix)]
    {
        let reload = state.clone();
        tokio::spawn(async move {
            use tokio::signal::unix::{signal, SignalKind};
            let Ok(mut hup) = signal(SignalKind::hangup()) else {
                return;
            };
            while hup.recv().await.is_some() {
                match reload.reload_model() {
                    Ok(()) => tracing::info!("checkpoint reloaded"),
                    Err(e) => tracing::warn!("reload failed, keeping current model: {e}"),
                }
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
