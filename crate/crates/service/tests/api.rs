use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use gram_sld::config::{AnnotationMode, RunConfig};
use gram_sld::orchestrator::{drive, prepare};
use gram_sld::scenario::{generate, ScenarioConfig};
use gram_sld::session::{Session, Shared};
use gram_sld::store::read_label_file;
use gram_sld_service::{router, AppState};

struct Fixture {
    _dir: tempfile::TempDir,
    scenario: std::path::PathBuf,
    config: RunConfig,
}

fn fixture(mode: AnnotationMode, review: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario");
    let s = generate(
        &scenario,
        &ScenarioConfig {
            n_train: 40,
            n_test: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let mut config = RunConfig::load(&s.config_path).unwrap();
    config.annotation = mode;
    config.review_mode = review;
    config.clustering.force_k = Some(5);
    config.selection.ratio = 0.01;
    config.gate_timeout_secs = 120;
    Fixture {
        _dir: dir,
        scenario,
        config,
    }
}

fn state(config: &RunConfig) -> AppState {
    let shared = Arc::new(Shared::new(Session::open(config.clone()).unwrap()));
    prepare(&shared).unwrap();
    shared
}

async fn call(state: &AppState, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

fn truth(f: &Fixture, id: &str) -> Value {
    let l = read_label_file(&f.scenario.join("gt").join(format!("{id}.json"))).unwrap().unwrap();
    serde_json::to_value(&l.boxes).unwrap()
}

fn key_ids(v: &Value) -> Vec<String> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|i| i["sample_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn label_round_trip_and_conflicts() {
    let f = fixture(AnnotationMode::Service, false);
    let st = state(&f.config);

    let (code, q) = call(&st, Method::GET, "/api/queue?kind=key_annotation", None).await;
    assert_eq!(code, StatusCode::OK);
    let ids = key_ids(&q);
    assert_eq!(ids.len(), 5);
    let clusters: Vec<u64> = q.as_array().unwrap().iter().map(|i| i["cluster_id"].as_u64().unwrap()).collect();
    assert!(clusters.windows(2).all(|w| w[0] <= w[1]));

    let id = &ids[0];
    let boxes = truth(&f, id);
    let (code, r) = call(
        &st,
        Method::PUT,
        &format!("/api/labels/{id}"),
        Some(json!({"revision": 0, "annotator": "ann", "boxes": boxes})),
    )
    .await;
    assert_eq!(code, StatusCode::OK, "{r}");
    assert_eq!(r["revision"], 1);

    let (code, got) = call(&st, Method::GET, &format!("/api/labels/{id}"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(got["revision"], 1);
    let stripped: Vec<Value> = got["boxes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| json!({"class": b["class"], "bbox": b["bbox"]}))
        .collect();
    let sent: Vec<Value> = boxes
        .as_array()
        .unwrap()
        .iter()
        .map(|b| json!({"class": b["class"], "bbox": b["bbox"]}))
        .collect();
    assert_eq!(stripped, sent);

    let path = f.config.work_dir.join("labels").join(format!("{id}.json"));
    let before = std::fs::read(&path).unwrap();
    let (code, r) = call(
        &st,
        Method::PUT,
        &format!("/api/labels/{id}"),
        Some(json!({"revision": 0, "boxes": []})),
    )
    .await;
    assert_eq!(code, StatusCode::CONFLICT, "{r}");
    assert_eq!(std::fs::read(&path).unwrap(), before);

    let (code, r) = call(
        &st,
        Method::PUT,
        &format!("/api/labels/{}", ids[1]),
        Some(json!({"revision": 0, "boxes": [
            {"class": "class_0", "bbox": [1, 1, 5, 5]},
            {"class": "class_0", "bbox": [0, 0, 500, 5]}
        ]})),
    )
    .await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r["error"].as_str().unwrap().contains("box 1"), "{r}");

    let (code, _) = call(&st, Method::PUT, "/api/labels/nope", Some(json!({"revision": 0, "boxes": []}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let (code, r) = call(&st, Method::GET, "/api/queue?kind=bogus", None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(r["error"].as_str().unwrap().contains("bogus"));

    let (_, q) = call(&st, Method::GET, "/api/queue", None).await;
    assert_eq!(key_ids(&q).len(), 4);

    let journal = std::fs::read_to_string(f.config.work_dir.join("journal.jsonl")).unwrap();
    assert_eq!(journal.matches("\"annotated\"").count(), 1);
}

#[tokio::test]
async fn review_is_refused_when_disabled() {
    let f = fixture(AnnotationMode::Service, false);
    let st = state(&f.config);
    let (code, _) = call(&st, Method::POST, "/api/review/train_0000", Some(json!({"action": "approve"}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&st, Method::POST, "/api/review/missing", Some(json!({"action": "approve"}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn image_bytes_and_type() {
    let f = fixture(AnnotationMode::Service, false);
    let st = state(&f.config);
    let req = Request::builder().uri("/api/image/train_0003").body(Body::empty()).unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(bytes.as_ref(), std::fs::read(f.scenario.join("images/train_0003.png")).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gate_opens_on_the_last_key() {
    let f = fixture(AnnotationMode::Service, false);
    let st = state(&f.config);
    let runner = {
        let st = st.clone();
        let config = f.config.clone();
        std::thread::spawn(move || {
            let mut det = config.build_detector().unwrap();
            drive(&st, det.as_mut())
        })
    };

    let (_, q) = call(&st, Method::GET, "/api/queue?kind=key_annotation", None).await;
    let ids = key_ids(&q);
    assert_eq!(ids.len(), 5);
    for id in &ids[..4] {
        let (code, _) = call(
            &st,
            Method::PUT,
            &format!("/api/labels/{id}"),
            Some(json!({"revision": 0, "boxes": truth(&f, id)})),
        )
        .await;
        assert_eq!(code, StatusCode::OK);
    }
    tokio::time::sleep(Duration::from_millis(400)).await;
    let (_, s) = call(&st, Method::GET, "/api/status", None).await;
    assert_eq!(s["phase"], "annotation");
    assert_eq!(s["pending_keys"], 1);
    assert!(s["metrics"].as_array().unwrap().is_empty());
    assert!(!runner.is_finished());

    let id = &ids[4];
    let (code, _) = call(
        &st,
        Method::PUT,
        &format!("/api/labels/{id}"),
        Some(json!({"revision": 0, "boxes": truth(&f, id)})),
    )
    .await;
    assert_eq!(code, StatusCode::OK);

    let start = Instant::now();
    loop {
        let (_, s) = call(&st, Method::GET, "/api/status?since=0&wait=5", None).await;
        if !s["metrics"].as_array().unwrap().is_empty() {
            assert_eq!(s["pending_keys"], 0);
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "run never left the gate");
    }
    let outcome = tokio::task::spawn_blocking(move || runner.join().unwrap()).await.unwrap().unwrap();
    let (_, s) = call(&st, Method::GET, "/api/status", None).await;
    assert_eq!(s["phase"], "terminated");
    assert_eq!(s["iteration"], outcome.iterations);
    assert_eq!(s["pools"]["labeled_human"], 5);
}

#[tokio::test]
async fn review_actions_move_samples() {
    let f = fixture(AnnotationMode::Oracle, true);
    let config = f.config.clone();
    let st: AppState = tokio::task::spawn_blocking(move || {
        let shared = Arc::new(Shared::new(Session::open(config.clone()).unwrap()));
        let mut det = config.build_detector().unwrap();
        drive(&shared, det.as_mut()).unwrap();
        shared
    })
    .await
    .unwrap();

    let (_, q) = call(&st, Method::GET, "/api/queue?kind=pseudo_review", None).await;
    let items = q.as_array().unwrap().clone();
    assert!(items.len() >= 3, "need self-labeled samples, got {}", items.len());
    let (_, before) = call(&st, Method::GET, "/api/status", None).await;

    let a = items[0]["sample_id"].as_str().unwrap();
    let (code, r) = call(&st, Method::POST, &format!("/api/review/{a}"), Some(json!({"action": "approve"}))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(r["status"], "labeled_self");

    let b = items[1]["sample_id"].as_str().unwrap();
    let (code, r) = call(&st, Method::POST, &format!("/api/review/{b}"), Some(json!({"action": "reject"}))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(r["status"], "unlabeled");
    let (_, after) = call(&st, Method::GET, "/api/status", None).await;
    assert_eq!(after["pools"]["unlabeled"], before["pools"]["unlabeled"].as_u64().unwrap() + 1);
    assert_eq!(after["pools"]["labeled_self"], before["pools"]["labeled_self"].as_u64().unwrap() - 1);

    let c = items[2]["sample_id"].as_str().unwrap();
    let fixed = json!([{"class": "class_1", "bbox": [2.0, 3.0, 20.0, 30.0], "confidence": 1.0}]);
    let (code, r) = call(
        &st,
        Method::POST,
        &format!("/api/review/{c}"),
        Some(json!({"action": "edit", "boxes": fixed})),
    )
    .await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(r["status"], "labeled_human");
    let (_, got) = call(&st, Method::GET, &format!("/api/labels/{c}"), None).await;
    assert_eq!(got["boxes"][0]["bbox"], fixed[0]["bbox"]);
    assert_eq!(got["boxes"].as_array().unwrap().len(), 1);

    let journal = std::fs::read_to_string(f.config.work_dir.join("journal.jsonl")).unwrap();
    assert_eq!(journal.matches("\"reviewed\"").count(), 3);
}
