mod common;

use std::thread;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rlpo::config::HfFallback;
use rlpo::engine::{drive, init_run, new_status, run_rlpo, RunOptions, RunPhase, STEPS_LOG};
use rlpo::record::{read_log, ScoreSource};
use rlpo::server::{app_state, router, AppState};
use rlpo::{FeedbackMode, RunError};
use rlpo_core::prefopt::Decision;
use serde_json::{json, Value};
use tower::ServiceExt;

const NAME: &str = "server";

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn raw_post(state: &AppState, body: &str) -> (StatusCode, Value) {
    let req = Request::post("/api/feedback").body(Body::from(body.to_string())).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

/// A finished xaif run, served with a status that reports it complete.
fn finished_xaif(steps: usize) -> (tempfile::TempDir, AppState) {
    let cfg = common::run_config(NAME, steps);
    let dir = tempfile::tempdir().unwrap();
    let status = new_status(steps, FeedbackMode::Xaif);
    let opts = RunOptions {
        status: Some(status.clone()),
        ..Default::default()
    };
    run_rlpo(&cfg, dir.path(), &opts).unwrap();
    let state = app_state(dir.path(), status).unwrap();
    (dir, state)
}

async fn wait_pending(state: &AppState, step: usize) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (code, body) = call(state, "GET", "/api/feedback/pending", None).await;
        assert_eq!(code, StatusCode::OK);
        if body["pending"]["step"] == json!(step) {
            return body["pending"].clone();
        }
        assert!(Instant::now() < deadline, "step {step} never became pending");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn xaif_runs_are_browsable_and_refuse_votes() {
    let (_dir, state) = finished_xaif(3);
    let (code, run) = call(&state, "GET", "/api/run", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(run["status"]["phase"], "completed");
    assert_eq!(run["status"]["completed_steps"], 3);
    assert_eq!(run["keywords"].as_array().unwrap().len(), state.keywords.len());

    let (code, steps) = call(&state, "GET", "/api/steps?from=1", None).await;
    assert_eq!(code, StatusCode::OK);
    let steps = steps.as_array().unwrap();
    assert_eq!(steps.iter().map(|s| s["step"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2]);

    let (code, imgs) = call(&state, "GET", "/api/steps/2/images", None).await;
    assert_eq!(code, StatusCode::OK);
    let imgs = imgs["images"].as_array().unwrap();
    assert_eq!(imgs.len(), 10);
    assert_eq!(imgs[0]["group"], 1);
    assert_eq!(imgs[9]["group"], 2);
    use base64::Engine as _;
    let png = base64::engine::general_purpose::STANDARD.decode(imgs[0]["png_base64"].as_str().unwrap()).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let (code, err) = call(&state, "GET", "/api/steps/3/images", None).await;
    assert_eq!((code, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_step")));

    for (method, uri, body) in [
        ("GET", "/api/feedback/pending", None),
        ("POST", "/api/feedback", Some(json!({"step": 0, "voter": "a", "preferred": 1}))),
    ] {
        let (code, err) = call(&state, method, uri, body).await;
        assert_eq!(code, StatusCode::CONFLICT);
        assert_eq!(err["error"], "mode_rejects_feedback");
    }

    let (code, err) = call(&state, "GET", "/api/nope", None).await;
    assert_eq!((code, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn metrics_summarize_the_log() {
    let (dir, state) = finished_xaif(4);
    let log = read_log(&dir.path().join(STEPS_LOG)).unwrap();
    let (code, m) = call(&state, "GET", "/api/metrics", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(m["steps"], 4);
    let counts: u64 = m["action_counts"].as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
    assert_eq!(counts, 4);
    let cum: Vec<f64> = serde_json::from_value(m["cumulative_reward"].clone()).unwrap();
    let mut total = 0.0;
    for (c, r) in cum.iter().zip(&log) {
        total += r.reward;
        assert!((c - total).abs() < 1e-12);
    }
    assert_eq!(m["keywords"].as_array().unwrap().len(), state.keywords.len());
}

#[tokio::test]
async fn steps_are_hidden_until_complete() {
    let (_dir, state) = finished_xaif(3);
    state.status.write().unwrap().completed_steps = 1;
    let (_, steps) = call(&state, "GET", "/api/steps", None).await;
    assert_eq!(steps.as_array().unwrap().len(), 1);
    let (code, _) = call(&state, "GET", "/api/steps/1/images", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn votes_drive_a_human_feedback_run() {
    let mut cfg = common::run_config(NAME, 2);
    cfg.feedback_mode = FeedbackMode::Hf;
    cfg.hf.voters = 2;
    let dir = tempfile::tempdir().unwrap();
    init_run(&cfg, dir.path()).unwrap();
    let status = new_status(2, FeedbackMode::Hf);
    let state = app_state(dir.path(), status.clone()).unwrap();
    let opts = RunOptions {
        hub: state.hub.clone(),
        status: Some(status),
        ..Default::default()
    };
    let run_dir = dir.path().to_path_buf();
    let engine = thread::spawn(move || drive(&run_dir, &opts));

    let item = wait_pending(&state, 0).await;
    assert_eq!(item["votes_needed"], 2);
    assert_eq!(item["images"].as_array().unwrap().len(), 10);
    let (_, run) = call(&state, "GET", "/api/run", None).await;
    assert_eq!(run["status"]["phase"], "awaiting_feedback");

    let vote = |voter: &str, preferred: u8, step: usize| json!({"step": step, "voter": voter, "preferred": preferred});
    let (code, body) = call(&state, "POST", "/api/feedback", Some(vote("ana", 2, 0))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["pending"]["votes_received"], 1);
    let (code, body) = call(&state, "POST", "/api/feedback", Some(vote("ana", 1, 0))).await;
    assert_eq!((code, body["error"].as_str()), (StatusCode::CONFLICT, Some("duplicate_vote")));
    let (code, body) = call(&state, "POST", "/api/feedback", Some(vote("bo", 1, 5))).await;
    assert_eq!((code, body["error"].as_str()), (StatusCode::CONFLICT, Some("wrong_step")));
    let (code, body) = call(&state, "POST", "/api/feedback", Some(vote("bo", 3, 0))).await;
    assert_eq!((code, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_choice")));
    let (code, body) = raw_post(&state, "{\"step\": 0}").await;
    assert_eq!((code, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("malformed_request")));
    let (code, _) = call(&state, "POST", "/api/feedback", Some(vote(" ", 1, 0))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = call(&state, "POST", "/api/feedback", Some(vote("bo", 2, 0))).await;
    assert_eq!(code, StatusCode::OK);

    wait_pending(&state, 1).await;
    call(&state, "POST", "/api/feedback", Some(vote("ana", 1, 1))).await;
    call(&state, "POST", "/api/feedback", Some(vote("bo", 2, 1))).await;

    let summary = engine.join().unwrap().unwrap();
    assert_eq!(summary.completed_steps, 2);
    let (code, body) = call(&state, "GET", "/api/feedback/pending", None).await;
    assert_eq!((code, &body["pending"]), (StatusCode::OK, &Value::Null));
    let (code, body) = call(&state, "POST", "/api/feedback", Some(vote("cy", 1, 1))).await;
    assert_eq!((code, body["error"].as_str()), (StatusCode::CONFLICT, Some("nothing_pending")));

    let log = read_log(&dir.path().join(STEPS_LOG)).unwrap();
    assert_eq!(log[0].scores, ScoreSource::Votes { group1: 0, group2: 2 });
    assert_eq!((log[0].ts1, log[0].ts2), (0.0, 1.0));
    assert_eq!(log[0].decision, Decision::ApplyDpo { winner: 2, loser: 1 });
    assert!(log[0].dpo_applied());
    assert_eq!(log[1].scores, ScoreSource::Votes { group1: 1, group2: 1 });
    assert_eq!(log[1].decision, Decision::NoSignal);
    assert!(!log[1].dpo_applied());
    assert_eq!(state.status.read().unwrap().phase, RunPhase::Completed);
}

#[test]
fn unanswered_steps_abort_or_fall_back() {
    let mut cfg = common::run_config(NAME, 2);
    cfg.feedback_mode = FeedbackMode::Hf;
    cfg.hf.timeout_s = 0.05;
    let hub = || RunOptions {
        hub: Some(rlpo::feedback::FeedbackHub::new()),
        ..Default::default()
    };

    let dir = tempfile::tempdir().unwrap();
    let err = run_rlpo(&cfg, dir.path(), &hub()).unwrap_err();
    match &err {
        RunError::Step { step: 0, source, .. } => assert!(matches!(**source, RunError::FeedbackTimeout { step: 0, .. })),
        other => panic!("expected a timeout, got {other}"),
    }
    assert!(read_log(&dir.path().join(STEPS_LOG)).unwrap().is_empty());

    cfg.hf.fallback = HfFallback::UseTcav;
    let dir = tempfile::tempdir().unwrap();
    run_rlpo(&cfg, dir.path(), &hub()).unwrap();
    let log = read_log(&dir.path().join(STEPS_LOG)).unwrap();
    assert!(log.iter().all(|r| r.scores == ScoreSource::TcavFallback));
}
