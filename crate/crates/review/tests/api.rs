use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use medaug_core::review::{read_verdicts, ReviewState};
use medaug_core::{QARecord, Source};
use medaug_review::{router, Clock, ReviewService};
use serde_json::{json, Value};
use tower::ServiceExt;

fn sample() -> Vec<QARecord> {
    vec![
        QARecord::new(
            "عندي صداع منذ يومين ما السبب",
            "قد يكون بسبب قلة النوم أو الإجهاد",
            Source::Chatgpt4o,
        ),
        QARecord::new(
            "ابني عنده حرارة مرتفعة ماذا أفعل",
            "أعطه خافض حرارة وراجع الطبيب إذا استمرت",
            Source::Gemini25pro,
        ),
    ]
}

fn clock() -> Clock {
    Arc::new(|| Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap())
}

fn app(dir: &std::path::Path, sample: Option<Vec<QARecord>>, per_record: usize) -> (Router, Arc<ReviewService>) {
    let svc = Arc::new(ReviewService::open(sample, &dir.join("verdicts.jsonl"), per_record, clock()).unwrap());
    (router(svc.clone(), &[]), svc)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn verdict(id: &str, reviewer: &str, verdict: &str, rating: u8) -> Value {
    json!({"record_id": id, "reviewer": reviewer, "fluency": rating, "relevance": rating,
           "plausibility": rating, "verdict": verdict, "notes": "ملاحظة"})
}

#[tokio::test]
async fn walks_the_sample_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    let (app, _) = app(dir.path(), Some(s.clone()), 1);

    let (st, first) = call(&app, "GET", "/batch/next?reviewer=amal", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(first["record_id"], s[0].id);
    assert!(first.get("source").is_none(), "review must be blind");
    let (_, again) = call(&app, "GET", "/batch/next?reviewer=amal", None).await;
    assert_eq!(again["record_id"], s[0].id, "assignment is stable");

    let (st, body) = call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "amal", "accept", 5))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(body["source"], "chatgpt4o");

    let (_, second) = call(&app, "GET", "/batch/next?reviewer=amal", None).await;
    assert_eq!(second["record_id"], s[1].id);
    call(&app, "POST", "/verdicts", Some(verdict(&s[1].id, "amal", "flag", 3))).await;
    let (st, _) = call(&app, "GET", "/batch/next?reviewer=amal", None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn concurrent_reviewers_get_different_records() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    let (app, _) = app(dir.path(), Some(s.clone()), 1);
    let (_, a) = call(&app, "GET", "/batch/next?reviewer=a", None).await;
    let (_, b) = call(&app, "GET", "/batch/next?reviewer=b", None).await;
    assert_ne!(a["record_id"], b["record_id"]);
    let (st, _) = call(&app, "GET", "/batch/next?reviewer=c", None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn rejects_bad_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    let (app, _) = app(dir.path(), Some(s.clone()), 1);
    let (st, _) = call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "r", "accept", 6))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let mut no_notes = verdict(&s[0].id, "r", "reject", 2);
    no_notes["notes"] = json!("  ");
    let (st, _) = call(&app, "POST", "/verdicts", Some(no_notes)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/verdicts", Some(verdict("nope", "r", "accept", 3))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "r", "accept", 3))).await;
    assert_eq!(st, StatusCode::CREATED);
    let (st, _) = call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "r", "flag", 3))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&app, "GET", "/batch/next", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn no_sample_means_404() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), None, 1);
    let (st, _) = call(&app, "GET", "/batch/next?reviewer=a", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, stats) = call(&app, "GET", "/stats", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(stats["total"], 0);
}

#[tokio::test]
async fn stats_survive_restart_and_match_replay() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    let (app1, _) = app(dir.path(), Some(s.clone()), 1);
    let (_, empty) = call(&app1, "GET", "/stats", None).await;
    assert_eq!(empty["reviewed"], 0);
    assert_eq!(empty["verdicts"], json!({"accept": 0, "reject": 0, "flag": 0}));

    call(&app1, "POST", "/verdicts", Some(verdict(&s[0].id, "r", "accept", 5))).await;
    call(&app1, "POST", "/verdicts", Some(verdict(&s[1].id, "r", "reject", 2))).await;
    let (_, live) = call(&app1, "GET", "/stats", None).await;
    assert_eq!(live["mean_ratings"]["chatgpt4o"]["fluency"], 5.0);
    assert_eq!(live["reviewed"].as_u64().unwrap() + live["remaining"].as_u64().unwrap(), 2);

    let (app2, _) = app(dir.path(), Some(s.clone()), 1);
    let (_, restarted) = call(&app2, "GET", "/stats", None).await;
    assert_eq!(live, restarted);

    let log = read_verdicts(&dir.path().join("verdicts.jsonl")).unwrap();
    let folded = ReviewState::fold(s, 1, log).unwrap().stats();
    assert_eq!(serde_json::to_value(folded).unwrap(), live);
}

#[tokio::test]
async fn dual_review_needs_two_reviewers() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    let (app, _) = app(dir.path(), Some(s[..1].to_vec()), 2);
    let (_, a) = call(&app, "GET", "/batch/next?reviewer=a", None).await;
    let (_, b) = call(&app, "GET", "/batch/next?reviewer=b", None).await;
    assert_eq!(a["record_id"], b["record_id"]);
    call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "a", "accept", 4))).await;
    let (_, st) = call(&app, "GET", "/stats", None).await;
    assert_eq!(st["reviewed"], 0);
    call(&app, "POST", "/verdicts", Some(verdict(&s[0].id, "b", "accept", 4))).await;
    let (_, st) = call(&app, "GET", "/stats", None).await;
    assert_eq!(st["reviewed"], 1);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), Some(sample()), 1);
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/verdicts")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
