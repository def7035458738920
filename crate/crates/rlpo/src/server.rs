//! HTTP service for monitoring a run and collecting votes in hf mode.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine as _;
use rlpo_core::evalx::action_metrics;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{FeedbackMode, RunConfig};
use crate::engine::{drive, Manifest, RunOptions, SharedStatus, STEPS_LOG};
use crate::error::{RunError, RunResult};
use crate::feedback::{FeedbackHub, VoteError};
use crate::record::StepRecord;
use crate::report::{action_counts, cumulative_rewards, rank_keywords};

#[derive(Clone)]
pub struct AppState {
    pub dir: PathBuf,
    pub config: Arc<RunConfig>,
    pub keywords: Arc<Vec<String>>,
    pub status: SharedStatus,
    /// Present exactly in hf mode.
    pub hub: Option<FeedbackHub>,
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: &'static str,
    message: String,
}

fn fail(status: StatusCode, error: &'static str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error,
            message: message.into(),
        }),
    )
        .into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    fail(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

/// Records fully written so far. Only the first `completed` lines are
/// read, so a line being appended is never seen half-written.
fn completed_records(state: &AppState) -> Result<Vec<StepRecord>, Response> {
    let done = state.status.read().expect("status lock").completed_steps;
    let path = state.dir.join(STEPS_LOG);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(internal)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .take(done)
        .map(|l| serde_json::from_str(l).map_err(internal))
        .collect()
}

async fn get_run(State(state): State<AppState>) -> Response {
    let status = state.status.read().expect("status lock").clone();
    Json(json!({
        "dir": state.dir,
        "config": *state.config,
        "keywords": *state.keywords,
        "status": status,
    }))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct StepsQuery {
    from: Option<usize>,
}

async fn get_steps(State(state): State<AppState>, Query(q): Query<StepsQuery>) -> Response {
    match completed_records(&state) {
        Ok(recs) => {
            let from = q.from.unwrap_or(0);
            Json(recs.into_iter().filter(|r| r.step >= from).collect::<Vec<_>>()).into_response()
        }
        Err(r) => r,
    }
}

#[derive(Debug, Serialize)]
struct ImagePayload {
    path: String,
    group: usize,
    png_base64: String,
}

async fn get_step_images(State(state): State<AppState>, UrlPath(step): UrlPath<usize>) -> Response {
    let recs = match completed_records(&state) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let Some(rec) = recs.into_iter().find(|r| r.step == step) else {
        return fail(StatusCode::NOT_FOUND, "unknown_step", format!("step {step} has no record yet"));
    };
    let half = rec.images.len() / 2;
    let mut images = Vec::with_capacity(rec.images.len());
    for (i, path) in rec.images.iter().enumerate() {
        let bytes = match std::fs::read(state.dir.join(path)) {
            Ok(b) => b,
            Err(e) => return internal(format!("{path}: {e}")),
        };
        images.push(ImagePayload {
            path: path.clone(),
            group: if i < half { 1 } else { 2 },
            png_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        });
    }
    Json(json!({ "step": step, "images": images })).into_response()
}

fn hub_or_reject(state: &AppState) -> Result<&FeedbackHub, Response> {
    state.hub.as_ref().ok_or_else(|| {
        fail(
            StatusCode::CONFLICT,
            "mode_rejects_feedback",
            "mode does not accept feedback: this run scores steps with TCAV (xaif)",
        )
    })
}

async fn get_pending(State(state): State<AppState>) -> Response {
    match hub_or_reject(&state) {
        Ok(hub) => Json(json!({ "pending": hub.pending() })).into_response(),
        Err(r) => r,
    }
}

#[derive(Debug, Deserialize)]
struct VoteBody {
    step: usize,
    voter: String,
    preferred: u8,
}

async fn post_feedback(State(state): State<AppState>, body: Bytes) -> Response {
    let hub = match hub_or_reject(&state) {
        Ok(h) => h,
        Err(r) => return r,
    };
    let vote: VoteBody = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return fail(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()),
    };
    if vote.voter.trim().is_empty() {
        return fail(StatusCode::BAD_REQUEST, "malformed_request", "voter must be non-empty");
    }
    match hub.vote(vote.step, &vote.voter, vote.preferred) {
        Ok(item) => Json(json!({ "accepted": true, "pending": item })).into_response(),
        Err(e) => {
            let (status, code) = match e {
                VoteError::BadChoice => (StatusCode::BAD_REQUEST, "bad_choice"),
                VoteError::NothingPending => (StatusCode::CONFLICT, "nothing_pending"),
                VoteError::WrongStep { .. } => (StatusCode::CONFLICT, "wrong_step"),
                VoteError::DuplicateVoter => (StatusCode::CONFLICT, "duplicate_vote"),
            };
            fail(status, code, e.to_string())
        }
    }
}

async fn get_metrics(State(state): State<AppState>) -> Response {
    let recs = match completed_records(&state) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let counts = action_counts(&recs, state.keywords.len());
    let (metrics, metrics_error) = match action_metrics(&counts) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Json(json!({
        "steps": recs.len(),
        "action_counts": state.keywords.iter().zip(&counts).map(|(k, c)| json!({"keyword": k, "count": c})).collect::<Vec<_>>(),
        "action_metrics": metrics,
        "action_metrics_error": metrics_error,
        "cumulative_reward": cumulative_rewards(&recs),
        "keywords": rank_keywords(&recs, &state.keywords, state.config.eta),
    }))
    .into_response()
}

async fn not_found() -> Response {
    fail(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/run", get(get_run))
        .route("/api/steps", get(get_steps))
        .route("/api/steps/{t}/images", get(get_step_images))
        .route("/api/feedback/pending", get(get_pending))
        .route("/api/feedback", axum::routing::post(post_feedback))
        .route("/api/metrics", get(get_metrics))
        .fallback(not_found)
        .with_state(state)
}

/// State for serving the run in `dir`.
pub fn app_state(dir: &Path, status: SharedStatus) -> RunResult<AppState> {
    let manifest = Manifest::read(dir)?;
    let space = rlpo_core::seeds::ActionSpace::load(&manifest.config.action_space)?;
    let hub = (manifest.config.feedback_mode == FeedbackMode::Hf).then(FeedbackHub::new);
    Ok(AppState {
        dir: dir.to_path_buf(),
        keywords: Arc::new(space.keywords()),
        config: Arc::new(manifest.config),
        status,
        hub,
    })
}

/// Serve `dir` on loopback and drive the run to completion in the
/// background. Returns when the server stops (ctrl-c).
pub fn serve(dir: &Path, port: u16, mode: Option<FeedbackMode>) -> RunResult<()> {
    let manifest = Manifest::read(dir)?;
    if let Some(m) = mode {
        if m != manifest.config.feedback_mode {
            return Err(RunError::Config(format!(
                "run in {} was configured with mode {:?}, not {:?}",
                dir.display(),
                manifest.config.feedback_mode,
                m
            )));
        }
    }
    let status = crate::engine::new_status(manifest.total_steps, manifest.config.feedback_mode);
    let state = app_state(dir, status.clone())?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| RunError::Config(format!("cannot bind {addr}: {e}")))?;
        log::info!("serving {} on http://{addr}", dir.display());
        let opts = RunOptions {
            hub: state.hub.clone(),
            status: Some(status),
            ..Default::default()
        };
        let run_dir = dir.to_path_buf();
        let runner = tokio::task::spawn_blocking(move || drive(&run_dir, &opts));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        if runner.is_finished() {
            match runner.await {
                Ok(Err(e)) => return Err(e),
                Err(e) => return Err(RunError::Io(std::io::Error::other(e))),
                Ok(Ok(_)) => {}
            }
        }
        Ok(())
    })
}
