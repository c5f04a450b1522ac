use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;
use trace_auth::eval::{EvalReport, Orientation};
use trace_auth::harness::{RunSummary, TrainRunConfig};
use trace_auth::models::{ModelKind, Network, TrainedModel};
use trace_auth::raster::RasterConfig;
use trace_auth::synth::{write_cohort, CohortConfig};
use trace_auth_service::sequence::Sequences;
use trace_auth_service::{router, start, AppState, ServiceConfig};

struct Harness {
    _dir: tempfile::TempDir,
    state: AppState,
    app: Router,
}

fn setup(tweak: impl FnOnce(&mut ServiceConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path());
    cfg.prompt_seed = Some(1);
    tweak(&mut cfg);
    let state = start(cfg).unwrap();
    Harness { app: router(state.clone()), state, _dir: dir }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |b| Body::from(b.to_string()));
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn drawing(participant: &str, digit: u32) -> Value {
    json!({
        "participant": participant,
        "digit": digit,
        "device": "test",
        "strokes": [[{"x": 60.0, "y": 40.0}, {"x": 128.0, "y": 128.0}, {"x": 190.0, "y": 210.0}]]
    })
}

fn summary(participant: &str, kind: ModelKind) -> RunSummary {
    let report = EvalReport::from_scores(&[0.9, 0.2], &[true, false], 0.5, 0.5, Orientation::Score, None).unwrap();
    RunSummary {
        participant_id: participant.into(),
        model: kind,
        history: vec![],
        best_epoch: 1,
        val_acc: 1.0,
        report,
        duration_secs: 0.0,
    }
}

/// Publishes an untrained model with a fixed threshold.
fn publish(state: &AppState, participant: &str, kind: ModelKind, size: usize, threshold: f64) -> String {
    let network = Network::init(kind.build(size).unwrap(), 5).unwrap();
    let raster = RasterConfig::new(size, 6).unwrap();
    let model = TrainedModel { network, raster, threshold, calibration: None };
    state.registry.publish(participant, model, summary(participant, kind)).unwrap().model_id.clone()
}

#[tokio::test]
async fn drawing_submission() {
    let h = setup(|_| {});
    let (s, a) = call(&h.app, "POST", "/v1/drawings", Some(drawing("alice", 3))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, b) = call(&h.app, "POST", "/v1/drawings", Some(drawing("alice", 3))).await;
    assert_ne!(a["drawing_id"], b["drawing_id"]);
    let stored = h.state.config.drawings_dir().join("alice/3").join(format!("{}.json", a["drawing_id"].as_str().unwrap()));
    assert!(stored.exists());

    let mut no_strokes = drawing("alice", 3);
    no_strokes["strokes"] = json!([]);
    assert_eq!(call(&h.app, "POST", "/v1/drawings", Some(no_strokes)).await.0, StatusCode::BAD_REQUEST);
    let mut empty = drawing("alice", 3);
    empty["strokes"] = json!([[]]);
    let (s, body) = call(&h.app, "POST", "/v1/drawings", Some(empty)).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("empty_drawing")));
    let mut nan = drawing("alice", 3);
    nan["strokes"][0][1]["x"] = json!("NaN");
    let (s, body) = call(&h.app, "POST", "/v1/drawings", Some(nan)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["field"].as_str().unwrap().contains("strokes"));
    let (s, body) = call(&h.app, "POST", "/v1/drawings", Some(drawing("alice", 12))).await;
    assert_eq!((s, body["field"].as_str()), (StatusCode::BAD_REQUEST, Some("digit")));
    assert_eq!(call(&h.app, "POST", "/v1/drawings", Some(drawing("../etc", 1))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn prompts_are_uniform_and_seedable() {
    let h = setup(|_| {});
    let mut counts = [0usize; 10];
    let mut first = Vec::new();
    for i in 0..10_000 {
        let (s, body) = call(&h.app, "GET", "/v1/prompt", None).await;
        assert_eq!(s, StatusCode::OK);
        let d = body["digit"].as_u64().unwrap() as usize;
        counts[d] += 1;
        if i < 20 {
            first.push(d);
        }
    }
    assert!(counts.iter().all(|&c| (800..=1200).contains(&c)), "{counts:?}");
    let again = setup(|_| {});
    let mut replay = Vec::new();
    for _ in 0..20 {
        replay.push(call(&again.app, "GET", "/v1/prompt", None).await.1["digit"].as_u64().unwrap() as usize);
    }
    assert_eq!(first, replay);
}

#[tokio::test]
async fn enrollment_preconditions() {
    let h = setup(|_| {});
    assert_eq!(call(&h.app, "POST", "/v1/participants/ghost/enroll", None).await.0, StatusCode::NOT_FOUND);
    for _ in 0..10 {
        call(&h.app, "POST", "/v1/drawings", Some(drawing("bob", 1))).await;
    }
    let (s, body) = call(&h.app, "POST", "/v1/participants/bob/enroll", None).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("insufficient_data")));
    let (s, _) = call(&h.app, "POST", "/v1/participants/bob/enroll", Some(json!({"patience": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(call(&h.app, "GET", "/v1/jobs/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&h.app, "GET", "/v1/participants/bob/metrics", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&h.app, "POST", "/v1/participants/bob/authenticate", Some(drawing("bob", 1))).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn enroll_train_publish_authenticate() {
    let h = setup(|c| c.run = TrainRunConfig { max_epochs: 1, ..Default::default() });
    write_cohort(&h.state.config.drawings_dir(), &CohortConfig { participants: 4, drawings_per_digit: 10, ..Default::default() }).unwrap();

    let (s, body) = call(&h.app, "POST", "/v1/participants/p01/enroll", Some(json!({"seed": 3}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job_id = body["job_id"].as_str().unwrap().to_string();
    let (s, body) = call(&h.app, "POST", "/v1/participants/p01/enroll", None).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::CONFLICT, Some("job_active")));

    let deadline = Instant::now() + Duration::from_secs(300);
    let job = loop {
        let (_, job) = call(&h.app, "GET", &format!("/v1/jobs/{job_id}"), None).await;
        if job["state"] == "done" || job["state"] == "failed" {
            break job;
        }
        assert!(Instant::now() < deadline, "job did not finish");
        tokio::time::sleep(Duration::from_millis(200)).await;
    };
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["epoch"], 1);
    assert_eq!(job["config"]["seed"], 3);
    let model_id = job["model_id"].as_str().unwrap().to_string();

    let (s, report) = call(&h.app, "GET", "/v1/participants/p01/metrics", None).await;
    assert_eq!(s, StatusCode::OK);
    for key in ["far", "frr", "eer", "acc", "auc"] {
        assert!(report[key].is_number(), "{key}");
    }
    let stored: Value = serde_json::from_slice(&std::fs::read(h.state.config.data_root.join("models/p01/v1.json")).unwrap()).unwrap();
    assert_eq!(stored["report"], report);

    let (s, d) = call(&h.app, "POST", "/v1/participants/p01/authenticate", Some(drawing("p01", 4))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["model_id"], model_id.as_str());
    assert_eq!(d["accepted"].as_bool().unwrap(), d["value"].as_f64().unwrap() >= d["threshold"].as_f64().unwrap());

    // Published models survive a restart.
    let reopened = start(h.state.config.clone()).unwrap();
    assert_eq!(reopened.registry.get("p01").unwrap().model_id, model_id);
    let log = std::fs::read_to_string(h.state.config.data_root.join("decisions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn sequence_tokens() {
    let h = setup(|c| c.token_ttl = Duration::from_millis(300));
    publish(&h.state, "carol", ModelKind::ShallowCnn, 32, 0.0);
    let start = json!({"drawing": drawing("carol", 1), "sequence_length": 3});
    let (s, d1) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(start)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d1["sequence"]["position"], 1);
    assert!(d1["sequence"]["overall_accepted"].is_null());
    let t1 = d1["sequence"]["next_token"].as_str().unwrap().to_string();

    let step = |t: &str| json!({"drawing": drawing("carol", 2), "sequence_token": t});
    let (_, d2) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(step(&t1))).await;
    let t2 = d2["sequence"]["next_token"].as_str().unwrap().to_string();
    assert_ne!(t1, t2);
    let (s, _) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(step(&t1))).await;
    assert_eq!(s, StatusCode::GONE);
    let (_, d3) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(step(&t2))).await;
    assert_eq!(d3["sequence"]["overall_accepted"], true);
    assert_eq!(d3["sequence"]["accepted_so_far"], 3);

    let (_, d) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(json!({"drawing": drawing("carol", 1), "sequence_length": 2}))).await;
    let t = d["sequence"]["next_token"].as_str().unwrap().to_string();
    tokio::time::sleep(Duration::from_millis(400)).await;
    let (s, body) = call(&h.app, "POST", "/v1/participants/carol/authenticate", Some(step(&t))).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::GONE, Some("sequence_expired")));
}

#[tokio::test]
async fn autoencoder_decisions_use_error_rule() {
    let h = setup(|_| {});
    publish(&h.state, "dave", ModelKind::ConvAutoencoder, 32, 1e-9);
    let (s, d) = call(&h.app, "POST", "/v1/participants/dave/authenticate", Some(drawing("dave", 5))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["model_kind"], "conv_autoencoder");
    assert!(d["value"].as_f64().unwrap() > 1e-9);
    assert_eq!(d["accepted"], false);
}

#[tokio::test]
async fn authentication_latency_at_64px() {
    let h = setup(|_| {});
    publish(&h.state, "erin", ModelKind::ShallowCnn, 64, 0.5);
    let body = drawing("erin", 7);
    call(&h.app, "POST", "/v1/participants/erin/authenticate", Some(body.clone())).await;
    let mut times = Vec::new();
    for _ in 0..15 {
        let t = Instant::now();
        let (s, _) = call(&h.app, "POST", "/v1/participants/erin/authenticate", Some(body.clone())).await;
        assert_eq!(s, StatusCode::OK);
        times.push(t.elapsed());
    }
    times.sort();
    let median = times[times.len() / 2];
    assert!(median < Duration::from_millis(50), "median {median:?}");
}

#[test]
fn compound_acceptance_matches_far_cubed() {
    for far in [0.156, 0.3] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut seqs = Sequences::new(Duration::from_secs(60));
        let now = Instant::now();
        let trials = 100_000;
        let tau = 1.0 - far;
        let mut successes = 0;
        for _ in 0..trials {
            let mut status = seqs.start("x", 3, rng.gen::<f64>() >= tau, now).unwrap();
            while let Some(token) = status.next_token.clone() {
                status = seqs.advance("x", &token, rng.gen::<f64>() >= tau, now).unwrap();
            }
            successes += (status.overall_accepted == Some(true)) as usize;
        }
        let rate = successes as f64 / trials as f64;
        let want = trace_auth::eval::compound_far(far, 3);
        assert!((rate - want).abs() <= 0.1 * want, "far {far}: {rate} vs {want}");
    }
}

#[tokio::test]
async fn health_and_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>demo</h1>").unwrap();
    let static_dir = dir.path().to_path_buf();
    let h = setup(|c| c.static_dir = Some(static_dir));
    let (s, body) = call(&h.app, "GET", "/v1/health", None).await;
    assert_eq!((s, body["status"].as_str()), (StatusCode::OK, Some("ok")));
    let resp = h.app.clone().oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let text = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&text[..], b"<h1>demo</h1>");
}
