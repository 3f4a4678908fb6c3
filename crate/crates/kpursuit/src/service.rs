//! HTTP service exposing the pipeline to programmatic callers.
//!
//! Endpoints:
//!
//! - `GET /health` — liveness probe
//! - `POST /enhance` — `{"prompt": ..., "overrides": {...}}` returns
//!   `{"enhanced_prompt": ..., "trace": ...}`
//! - `POST /synthesize` — `{"prompt": ...}` returns artifact references
//!   (file paths when an output directory is configured, inline hex
//!   otherwise)
//!
//! Each request runs an isolated pursuit session over the shared immutable
//! index; the blocking pipeline is dispatched on the runtime's blocking
//! pool.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::aggregate::EnhancedPrompt;
use crate::error::{Error, Result};
use crate::generate::{GenModality, GeneratedArtifact};
use crate::pipeline::Pipeline;
use crate::pursuit::{PursuitConfig, PursuitTrace};

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PursuitOverrides {
    pub max_facts: Option<usize>,
    pub relevance_threshold: Option<f64>,
    pub convergence_epsilon: Option<f64>,
    pub context_token_budget: Option<usize>,
    /// `concat` or `centroid`.
    pub policy: Option<String>,
}

impl PursuitOverrides {
    fn apply(&self, base: &PursuitConfig) -> Result<PursuitConfig> {
        let mut config = base.clone();
        if let Some(v) = self.max_facts {
            config.max_facts = v;
        }
        if self.relevance_threshold.is_some() {
            config.relevance_threshold = self.relevance_threshold;
        }
        if self.convergence_epsilon.is_some() {
            config.convergence_epsilon = self.convergence_epsilon;
        }
        if self.context_token_budget.is_some() {
            config.context_token_budget = self.context_token_budget;
        }
        if let Some(policy) = &self.policy {
            config.embedding_policy = crate::config::parse_policy(policy)?;
        }
        Ok(config)
    }
}

#[derive(Debug, Deserialize)]
pub struct EnhanceRequest {
    pub prompt: String,
    #[serde(default)]
    pub overrides: PursuitOverrides,
}

#[derive(Debug, Serialize)]
pub struct EnhanceResponse {
    pub enhanced_prompt: EnhancedPrompt,
    pub trace: PursuitTrace,
}

#[derive(Debug, Deserialize)]
pub struct SynthesizeRequest {
    pub prompt: String,
}

/// Reference to one produced artifact.
#[derive(Debug, Serialize)]
pub struct ArtifactRef {
    pub modality: GenModality,
    pub sha256: String,
    /// Path under the configured output directory, when one exists.
    pub path: Option<String>,
    /// Inline payload (hex) when no output directory is configured.
    pub payload_hex: Option<String>,
    pub provenance: crate::aggregate::Provenance,
}

#[derive(Debug, Serialize)]
pub struct SynthesizeResponse {
    pub artifacts: Vec<ArtifactRef>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    stage: Option<&'static str>,
}

struct ServiceError(Error);

/// Strip wrapper layers down to the error that actually happened.
fn root_cause(mut error: &Error) -> &Error {
    loop {
        match error {
            Error::Stage { source, .. }
            | Error::PursuitAborted { source, .. }
            | Error::BuildAborted { source, .. }
            | Error::PredictorFailed { source, .. } => error = source,
            other => return other,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match root_cause(&self.0) {
            Error::Config(_) | Error::UnknownProvider(_) | Error::EmptyText => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            stage: self.0.stage(),
        };
        (status, Json(body)).into_response()
    }
}

async fn health() -> impl IntoResponse {
    Json(serde_json::json!({"status": "ok"}))
}

async fn enhance(
    State(pipeline): State<Arc<Pipeline>>,
    Json(request): Json<EnhanceRequest>,
) -> std::result::Result<Json<EnhanceResponse>, ServiceError> {
    let config = request
        .overrides
        .apply(&pipeline.pursuit)
        .map_err(ServiceError)?;
    let (enhanced_prompt, trace) =
        tokio::task::spawn_blocking(move || pipeline.enhance_with(&request.prompt, &config))
            .await
            .map_err(|e| ServiceError(Error::Config(format!("worker panicked: {e}"))))?
            .map_err(ServiceError)?;
    Ok(Json(EnhanceResponse {
        enhanced_prompt,
        trace,
    }))
}

fn artifact_ref(pipeline: &Pipeline, ordinal: usize, artifact: &GeneratedArtifact) -> ArtifactRef {
    let sha256 = crate::aggregate::sha256_hex(&artifact.payload);
    let path = pipeline.output_dir.as_ref().map(|dir| {
        dir.join(format!("artifact-{ordinal:03}.bin"))
            .display()
            .to_string()
    });
    let payload_hex = if path.is_none() {
        Some(
            artifact
                .payload
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        )
    } else {
        None
    };
    ArtifactRef {
        modality: artifact.modality,
        sha256,
        path,
        payload_hex,
        provenance: artifact.prompt_provenance.clone(),
    }
}

async fn synthesize(
    State(pipeline): State<Arc<Pipeline>>,
    Json(request): Json<SynthesizeRequest>,
) -> std::result::Result<Json<SynthesizeResponse>, ServiceError> {
    let worker = pipeline.clone();
    let artifacts = tokio::task::spawn_blocking(move || worker.synthesize(&request.prompt))
        .await
        .map_err(|e| ServiceError(Error::Config(format!("worker panicked: {e}"))))?
        .map_err(ServiceError)?;
    let refs = artifacts
        .iter()
        .enumerate()
        .map(|(i, a)| artifact_ref(&pipeline, i, a))
        .collect();
    Ok(Json(SynthesizeResponse { artifacts: refs }))
}

/// Build the service router around a resolved pipeline.
pub fn router(pipeline: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/enhance", post(enhance))
        .route("/synthesize", post(synthesize))
        .with_state(pipeline)
}

/// Serve the pipeline on `addr` until the process exits.
pub async fn serve(pipeline: Arc<Pipeline>, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(pipeline))
        .await
        .map_err(Error::Io)?;
    Ok(())
}
