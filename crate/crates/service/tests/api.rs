use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use lope_service::runs::{AnnotationTask, Audit, RunHandle, Status};
use lope_service::{router, AppState, ErrorBody, MapPayload, SubmitAck};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    state: Arc<AppState>,
}

impl Client {
    fn new() -> Self {
        Self {
            state: AppState::new(None),
        }
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    async fn handle(&self, id: &str) -> RunHandle {
        let (s, v) = self.get(&format!("/runs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        serde_json::from_value(v).unwrap()
    }

    async fn pending(&self, id: &str) -> Vec<AnnotationTask> {
        let (s, v) = self.get(&format!("/runs/{id}/annotations/pending")).await;
        assert_eq!(s, StatusCode::OK);
        serde_json::from_value(v).unwrap()
    }

    /// Polls until `pred` holds for the run handle.
    async fn wait_for(&self, id: &str, pred: impl Fn(&RunHandle) -> bool) -> RunHandle {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let h = self.handle(id).await;
            if pred(&h) {
                return h;
            }
            assert!(Instant::now() < deadline, "timed out waiting on run {id}: {h:?}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    async fn wait_pending(&self, id: &str) -> Vec<AnnotationTask> {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let tasks = self.pending(id).await;
            if !tasks.is_empty() {
                return tasks;
            }
            let h = self.handle(id).await;
            assert!(
                !matches!(h.status, Status::Finished | Status::Failed),
                "run ended while waiting for tasks: {h:?}"
            );
            assert!(Instant::now() < deadline, "no tasks for run {id}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

fn small_config(annotator: &str, iterations: usize) -> Value {
    json!({
        "env": {"kind": "grid", "max_steps": 40},
        "iterations": iterations,
        "episodes_per_iteration": 8,
        "pi_epochs": 2,
        "pg_epochs": 2,
        "hidden_sizes": [8],
        "eval_episodes": 1,
        "annotator": annotator,
    })
}

/// Judges every incumbent with the same outcome.
fn outcomes(task: &AnnotationTask, outcome: &str) -> Value {
    Value::Array(
        task.incumbents
            .iter()
            .map(|inc| json!({"candidate": task.candidate.id, "incumbent": inc.id, "outcome": outcome}))
            .collect(),
    )
}

fn error_code(v: &Value) -> String {
    serde_json::from_value::<ErrorBody>(v.clone()).unwrap().code
}

async fn answer_all(client: &Client, id: &str, tasks: &[AnnotationTask]) {
    for task in tasks {
        let (s, v) = client
            .post(
                &format!("/runs/{id}/annotations/{}", task.id),
                json!({"version": task.version, "outcomes": outcomes(task, "candidate-preferred")}),
            )
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn oracle_run_finishes_without_tasks() {
    let c = Client::new();
    let (s, v) = c.post("/runs", json!({"id": "o1", "config": small_config("oracle", 4)})).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let h: RunHandle = serde_json::from_value(v).unwrap();
    assert_eq!(h.id, "o1");

    loop {
        assert!(c.pending("o1").await.is_empty());
        let h = c.handle("o1").await;
        assert_ne!(h.status, Status::PausedAwaitingAnnotation);
        if h.status == Status::Finished {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    let (_, v) = c.get("/runs/o1/metrics?since=-1").await;
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let its: Vec<u64> = rows.iter().map(|r| r["iteration"].as_u64().unwrap()).collect();
    assert_eq!(its, vec![0, 1, 2, 3]);
    let (_, v) = c.get("/runs/o1/metrics?since=3").await;
    assert_eq!(v, json!([]));
    let (_, v) = c.get("/runs/o1/metrics?since=1").await;
    assert_eq!(v.as_array().unwrap().len(), 2);

    let (_, v) = c.get("/runs/o1/preferred").await;
    assert!(v["version"].as_u64().unwrap() >= 1);
    assert_eq!(v["h"], 8);
    assert!(!v["members"].as_array().unwrap().is_empty());

    let (_, v) = c.get("/runs/o1/audit").await;
    let audit: Audit = serde_json::from_value(v).unwrap();
    assert_eq!(audit, Audit::default());
}

#[tokio::test(flavor = "multi_thread")]
async fn human_run_pauses_and_resumes_on_judgments() {
    let c = Client::new();
    let (s, _) = c.post("/runs", json!({"id": "h1", "config": small_config("human", 3)})).await;
    assert_eq!(s, StatusCode::CREATED);

    let tasks = c.wait_pending("h1").await;
    // Warm-up iteration: every sampled trajectory is surfaced.
    assert_eq!(tasks.len(), 8);
    let h = c.handle("h1").await;
    assert_eq!(h.status, Status::PausedAwaitingAnnotation);
    assert_eq!(h.p_version, 0);
    // Empty P: each candidate is judged against the candidates before it.
    for (k, t) in tasks.iter().enumerate() {
        assert_eq!(t.incumbents.len(), k);
        assert_eq!(t.version, 0);
    }

    // Stale version is refused.
    let t = &tasks[1];
    let (s, v) = c
        .post(
            &format!("/runs/h1/annotations/{}", t.id),
            json!({"version": 7, "outcomes": outcomes(t, "tie")}),
        )
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "conflict");

    // Wrong outcome count is a bad request.
    let (s, v) = c
        .post(&format!("/runs/h1/annotations/{}", t.id), json!({"version": 0, "outcomes": []}))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "bad_request");

    // Unknown task.
    let (s, v) = c.post("/runs/h1/annotations/nope", json!({"version": 0, "outcomes": []})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "not_found");

    let (last, rest) = tasks.split_last().unwrap();
    answer_all(&c, "h1", rest).await;
    assert_eq!(c.pending("h1").await.len(), 1);
    assert_eq!(c.handle("h1").await.status, Status::PausedAwaitingAnnotation);

    // Duplicate submission for an answered task.
    let (s, _) = c
        .post(
            &format!("/runs/h1/annotations/{}", rest[0].id),
            json!({"version": 0, "outcomes": outcomes(&rest[0], "tie")}),
        )
        .await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = c
        .post(
            &format!("/runs/h1/annotations/{}", last.id),
            json!({"version": 0, "outcomes": outcomes(last, "candidate-preferred")}),
        )
        .await;
    assert_eq!(s, StatusCode::OK);
    let ack: SubmitAck = serde_json::from_value(v).unwrap();
    assert_eq!(ack.remaining, 0);
    assert_eq!(ack.accepted, 7);

    // The update consumed the judgments and bumped P's version.
    let h = c.wait_for("h1", |h| h.p_version >= 1).await;
    assert_ne!(h.status, Status::Failed, "{:?}", h.error);

    // The old task now refers to a stale version.
    let (s, _) = c
        .post(
            &format!("/runs/h1/annotations/{}", last.id),
            json!({"version": 0, "outcomes": outcomes(last, "tie")}),
        )
        .await;
    assert_eq!(s, StatusCode::CONFLICT);

    // Keep answering until the budget is spent.
    loop {
        let h = c.handle("h1").await;
        if h.status == Status::Finished {
            break;
        }
        assert_ne!(h.status, Status::Failed, "{:?}", h.error);
        let tasks = c.pending("h1").await;
        for t in &tasks {
            assert_eq!(t.incumbents.len(), c.get("/runs/h1/preferred").await.1["members"].as_array().unwrap().len());
        }
        answer_all(&c, "h1", &tasks).await;
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    let (_, v) = c.get("/runs/h1/audit").await;
    let audit: Audit = serde_json::from_value(v).unwrap();
    assert!(!audit.accepted.is_empty());
    assert_eq!(audit.accepted, audit.consumed);
    assert_eq!(audit.fallbacks, 0);
    assert!(audit.updates >= 1);
    let (_, v) = c.get("/runs/h1/metrics").await;
    assert_eq!(v.as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn timeout_with_oracle_policy_falls_back() {
    let c = Client::new();
    let mut cfg = small_config("human", 2);
    cfg["annotation_timeout_secs"] = json!(0.05);
    cfg["timeout_policy"] = json!("oracle");
    let (s, v) = c.post("/runs", json!({"id": "t1", "config": cfg})).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let h = c.wait_for("t1", |h| matches!(h.status, Status::Finished | Status::Failed)).await;
    assert_eq!(h.status, Status::Finished, "{:?}", h.error);
    let (_, v) = c.get("/runs/t1/audit").await;
    let audit: Audit = serde_json::from_value(v).unwrap();
    assert!(audit.fallbacks >= 1);
    assert!(c.pending("t1").await.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn stop_while_paused_ends_the_run() {
    let c = Client::new();
    c.post("/runs", json!({"id": "s1", "config": small_config("human", 50)})).await;
    c.wait_pending("s1").await;
    let (s, _) = c.post("/runs/s1/stop", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    let h = c.wait_for("s1", |h| matches!(h.status, Status::Finished | Status::Failed)).await;
    assert_eq!(h.status, Status::Finished, "{:?}", h.error);
    assert!(c.pending("s1").await.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn start_errors() {
    let c = Client::new();
    let (s, _) = c.post("/runs", json!({"id": "dup", "config": small_config("oracle", 1)})).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = c.post("/runs", json!({"id": "dup", "config": small_config("oracle", 1)})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "conflict");

    let (s, v) = c.post("/runs", json!({"config": {"policy_lr": -1.0}})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "invalid_config");
    assert!(v["message"].as_str().unwrap().contains("policy_lr"));

    let (s, v) = c.post("/runs", json!({"config": {"no_such_field": 1}})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "invalid_config");

    let (s, v) = c.post("/runs", json!({"id": ""})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "bad_request");

    let (s, _) = c.call(Method::POST, "/runs", None).await;
    assert!(s.is_client_error());

    // Generated ids skip taken names.
    let (s, v) = c.post("/runs", json!({"config": small_config("oracle", 1)})).await;
    assert_eq!(s, StatusCode::CREATED);
    let generated = v["id"].as_str().unwrap().to_string();
    assert_ne!(generated, "dup");

    let (_, v) = c.get("/runs").await;
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|h| h["id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"dup") && ids.contains(&generated.as_str()));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_run_is_not_found() {
    let c = Client::new();
    for path in [
        "/runs/ghost",
        "/runs/ghost/annotations/pending",
        "/runs/ghost/metrics",
        "/runs/ghost/preferred",
        "/runs/ghost/map",
        "/runs/ghost/audit",
    ] {
        let (s, v) = c.get(path).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{path}");
        assert_eq!(error_code(&v), "not_found");
    }
    let (s, _) = c.post("/runs/ghost/stop", json!({})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = c.post("/runs/ghost/annotations/0-1", json!({"version": 0, "outcomes": []})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn map_payloads() {
    let c = Client::new();
    c.post("/runs", json!({"id": "g", "config": small_config("oracle", 1)})).await;
    let (s, v) = c.get("/runs/g/map").await;
    assert_eq!(s, StatusCode::OK);
    match serde_json::from_value::<MapPayload>(v).unwrap() {
        MapPayload::Grid { width, height, rows, .. } => {
            assert_eq!((width, height), (36, 26));
            assert_eq!(rows.len(), 26);
            assert!(rows.iter().all(|r| r.chars().count() == 36));
        }
        other => panic!("expected grid map, got {other:?}"),
    }

    let line = json!({"env": {"kind": "line"}, "iterations": 1, "episodes_per_iteration": 1, "pi_epochs": 1,
        "pg_epochs": 1, "hidden_sizes": [4], "eval_episodes": 1});
    let (s, v) = c.post("/runs", json!({"id": "l", "config": line})).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (_, v) = c.get("/runs/l/map").await;
    match serde_json::from_value::<MapPayload>(v).unwrap() {
        MapPayload::Line { length, thresholds } => {
            assert_eq!(thresholds.len(), 3);
            assert!((thresholds[1] - length / 2.0).abs() < 1e-12);
        }
        other => panic!("expected line map, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn persisted_runs_write_their_directory() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(Some(dir.path().to_path_buf()));
    let c = Client { state };
    c.post("/runs", json!({"id": "p", "config": small_config("oracle", 2)})).await;
    c.wait_for("p", |h| h.status == Status::Finished).await;
    let run = dir.path().join("p");
    for f in ["config.json", "metrics.csv", "preferred_set.json", "run.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
}
