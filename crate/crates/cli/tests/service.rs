//! The labeling API against a live run handle.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use gflowhf::env::{Action, EnvConfig, Trajectory};
use gflowhf::harness::{HumanLabeler, Labeler, RunHandle};
use gflowhf_cli::service::router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(handle: &Arc<RunHandle>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(handle.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    assert_eq!(resp.headers()["content-type"], "application/json");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn straight(env: &EnvConfig) -> Trajectory {
    let a = Action::new(0.5, 0.25);
    let mut tr = Trajectory::start(env.reset());
    for _ in 0..env.horizon {
        let next = env.step(tr.final_state(), a).unwrap();
        tr.push(a, next);
    }
    tr
}

/// Starts a trainer-side thread that submits `n` episodes through a human
/// labeler with batch size `n` and waits until it blocks.
fn blocked_trainer(handle: &Arc<RunHandle>, n: u64) -> thread::JoinHandle<()> {
    let env = EnvConfig::default();
    let tr = straight(&env);
    let worker = {
        let handle = handle.clone();
        thread::spawn(move || {
            let mut labeler = HumanLabeler::new(handle, n as usize);
            for id in 0..n {
                labeler.submit(id, &tr, 12 * (id + 1)).unwrap();
            }
        })
    };
    while !handle.status().waiting_for_labels {
        thread::sleep(Duration::from_millis(1));
    }
    worker
}

#[tokio::test]
async fn empty_run_serves_empty_lists() {
    let handle = RunHandle::new();
    assert_eq!(call(&handle, "GET", "/api/pending", None).await, (StatusCode::OK, json!([])));
    assert_eq!(call(&handle, "GET", "/api/answers", None).await, (StatusCode::OK, json!([])));
    assert_eq!(call(&handle, "GET", "/api/metrics", None).await, (StatusCode::OK, json!([])));
    let (code, status) = call(&handle, "GET", "/api/status", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(status["timestep"], 0);
    assert_eq!(status["waiting_for_labels"], false);
    assert_eq!(status["n_labels"], 0);
}

#[tokio::test]
async fn a_full_batch_of_labels_resumes_the_trainer() {
    let handle = RunHandle::new();
    let worker = blocked_trainer(&handle, 10);
    let (_, status) = call(&handle, "GET", "/api/status", None).await;
    assert_eq!(status["waiting_for_labels"], true);
    let (code, pending) = call(&handle, "GET", "/api/pending", None).await;
    assert_eq!(code, StatusCode::OK);
    let pending = pending.as_array().unwrap();
    assert_eq!(pending.len(), 10);
    assert_eq!(pending[3]["episode_id"], 3);
    assert_eq!(pending[3]["trajectory"]["states"].as_array().unwrap().len(), 13);

    let labels: Vec<Value> = (0..10).map(|id| json!({"episode_id": id, "grade": 1 + id % 5})).collect();
    let (code, body) = call(&handle, "POST", "/api/labels", Some(Value::Array(labels))).await;
    assert_eq!((code, body), (StatusCode::OK, json!({"accepted": 10})));
    worker.join().unwrap();
    assert_eq!(call(&handle, "GET", "/api/pending", None).await.1, json!([]));
    let (_, status) = call(&handle, "GET", "/api/status", None).await;
    assert_eq!(status["n_labels"], 10);
    assert_eq!(status["waiting_for_labels"], false);
}

#[tokio::test]
async fn invalid_submissions_are_rejected_without_effect() {
    let handle = RunHandle::new();
    let worker = blocked_trainer(&handle, 2);
    for (body, code) in [
        (json!([{"episode_id": 0, "grade": 6}]), StatusCode::UNPROCESSABLE_ENTITY),
        (json!([{"episode_id": 0, "grade": 0}]), StatusCode::UNPROCESSABLE_ENTITY),
        (json!([{"episode_id": 0, "grade": -3}]), StatusCode::UNPROCESSABLE_ENTITY),
        (json!([{"episode_id": 1, "grade": 4}, {"episode_id": 0, "grade": 300}]), StatusCode::UNPROCESSABLE_ENTITY),
        (json!([{"episode_id": 42, "grade": 3}]), StatusCode::NOT_FOUND),
        (json!([{"episode_id": 0, "grade": 3}, {"episode_id": 0, "grade": 3}]), StatusCode::CONFLICT),
    ] {
        let (got, reply) = call(&handle, "POST", "/api/labels", Some(body.clone())).await;
        assert_eq!(got, code, "{body}");
        assert!(reply["error"].as_str().is_some_and(|r| !r.is_empty()));
        assert_eq!(handle.store().len(), 0);
        assert_eq!(handle.pending().len(), 2);
    }
    let (got, reply) = call(&handle, "POST", "/api/labels", Some(json!([{"episode_id": 0, "grade": 6}]))).await;
    assert_eq!(got, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(reply["error"].as_str().unwrap().contains("grade 6"));

    let ok = json!([{"episode_id": 0, "grade": 3}]);
    assert_eq!(call(&handle, "POST", "/api/labels", Some(ok.clone())).await.0, StatusCode::OK);
    // Re-posting the same label is a conflict and changes nothing.
    let (got, _) = call(&handle, "POST", "/api/labels", Some(ok)).await;
    assert_eq!(got, StatusCode::CONFLICT);
    assert_eq!(handle.store().len(), 1);
    assert_eq!(handle.store().snapshot()[0].grade, 3);
    worker.join().unwrap();
}

#[tokio::test]
async fn malformed_bodies_get_json_errors() {
    let handle = RunHandle::new();
    let (code, reply) = call(&handle, "POST", "/api/labels", Some(json!({"episode_id": 1}))).await;
    assert!(code.is_client_error());
    assert!(reply["error"].is_string());
}
