use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use medaug_core::embed::EmbeddingProvider;
use medaug_core::promptgen::{GenerationPlan, GenerationRequest};
use medaug_core::Source;
use medaug_gen::execute::SourceLimits;
use medaug_gen::{execute, load_checkpoint, ExecuteOptions, HttpChatProvider, HttpEmbedder, Provider, ProviderError};
use serde_json::{json, Value};

fn plan(n: usize, source: Source) -> GenerationPlan {
    let requests = (0..n)
        .map(|i| GenerationRequest {
            request_id: format!("p-{i:06}"),
            source,
            template_id: "t".into(),
            slot_values: BTreeMap::new(),
            exemplar_ids: vec![],
            rendered_prompt: format!("prompt {i}"),
        })
        .collect();
    GenerationPlan {
        plan_id: "p".into(),
        master_seed: 1,
        n,
        per_source: BTreeMap::from([(source, n)]),
        exemplars_per_prompt: 0,
        config_digest: String::new(),
        requests,
    }
}

fn fast_limits(source: Source, max_attempts: u32) -> ExecuteOptions {
    ExecuteOptions {
        limits: BTreeMap::from([(
            source,
            SourceLimits {
                requests_per_second: 1000.0,
                concurrency: 4,
                max_attempts,
                backoff_base: Duration::from_millis(1),
                timeout: Duration::from_secs(5),
            },
        )]),
    }
}

async fn serve(app: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

#[derive(Clone, Default)]
struct ChatState {
    calls: Arc<AtomicUsize>,
    auth: Arc<Mutex<Vec<String>>>,
}

async fn flaky_chat(State(s): State<ChatState>, headers: axum::http::HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    if let Some(v) = headers.get("authorization") {
        s.auth.lock().unwrap().push(v.to_str().unwrap().to_string());
    }
    if n < 2 {
        return (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})));
    }
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    let content = format!("```json\n{{\"question\": \"{prompt}\", \"answer\": \"ok\"}}\n```");
    (
        StatusCode::OK,
        Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]})),
    )
}

#[tokio::test]
async fn http_provider_retries_rate_limits() {
    let state = ChatState::default();
    let addr = serve(Router::new().route("/chat", post(flaky_chat)).with_state(state.clone())).await;
    let provider = HttpChatProvider::new(
        Source::Chatgpt4o,
        format!("http://{addr}/chat"),
        "m",
        Some("secret".into()),
        0.7,
        256,
        Duration::from_secs(5),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let providers: HashMap<Source, Arc<dyn Provider>> = HashMap::from([(Source::Chatgpt4o, Arc::new(provider) as Arc<dyn Provider>)]);
    let p = plan(1, Source::Chatgpt4o);
    let opts = ExecuteOptions {
        limits: BTreeMap::from([(
            Source::Chatgpt4o,
            SourceLimits {
                concurrency: 1,
                ..fast_limits(Source::Chatgpt4o, 5).limits[&Source::Chatgpt4o].clone()
            },
        )]),
    };
    let ckpt = dir.path().join("completions.jsonl");
    let summary = execute(&p, &providers, &opts, &ckpt, &dir.path().join("failures.jsonl"))
        .await
        .unwrap();
    assert_eq!(summary.completed, 1);
    let done = load_checkpoint(&ckpt).unwrap();
    assert_eq!(done[0].attempt_count, 3);
    assert!(done[0].raw_text.contains("prompt 0"));
    assert_eq!(state.auth.lock().unwrap()[0], "Bearer secret");
}

async fn unauthorized() -> (StatusCode, &'static str) {
    (StatusCode::UNAUTHORIZED, "bad key")
}

#[tokio::test]
async fn permanent_errors_are_not_retried() {
    let addr = serve(Router::new().route("/chat", post(unauthorized))).await;
    let provider = HttpChatProvider::new(
        Source::Gemini25pro,
        format!("http://{addr}/chat"),
        "m",
        None,
        0.7,
        64,
        Duration::from_secs(5),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let providers: HashMap<Source, Arc<dyn Provider>> = HashMap::from([(Source::Gemini25pro, Arc::new(provider) as Arc<dyn Provider>)]);
    let failures = dir.path().join("failures.jsonl");
    let summary = execute(
        &plan(2, Source::Gemini25pro),
        &providers,
        &fast_limits(Source::Gemini25pro, 5),
        &dir.path().join("c.jsonl"),
        &failures,
    )
    .await
    .unwrap();
    assert_eq!((summary.completed, summary.failed), (0, 2));
    let text = std::fs::read_to_string(failures).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["attempts"], 1);
    assert_eq!(rows[0]["transient"], false);
}

/// Fails every request whose index is in `broken` until `healed` is set.
struct Flaky {
    broken: HashSet<String>,
    healed: bool,
    calls: AtomicUsize,
}

#[async_trait]
impl Provider for Flaky {
    fn source(&self) -> Source {
        Source::Mock
    }

    async fn complete(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.healed && self.broken.contains(&request.request_id) {
            return Err(ProviderError::Transient("connection reset".into()));
        }
        Ok(format!("{{\"question\": \"{}\", \"answer\": \"a\"}}", request.request_id))
    }
}

#[tokio::test]
async fn resume_skips_completed_requests() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("completions.jsonl");
    let failures = dir.path().join("failures.jsonl");
    let p = plan(20, Source::Mock);
    let broken: HashSet<String> = ["p-000003", "p-000011", "p-000017"].map(String::from).into();

    let first = Arc::new(Flaky {
        broken: broken.clone(),
        healed: false,
        calls: AtomicUsize::new(0),
    });
    let providers: HashMap<Source, Arc<dyn Provider>> = HashMap::from([(Source::Mock, first.clone() as Arc<dyn Provider>)]);
    let s1 = execute(&p, &providers, &fast_limits(Source::Mock, 2), &ckpt, &failures)
        .await
        .unwrap();
    assert_eq!((s1.completed, s1.failed), (17, 3));

    // Simulate a crash that tore the last line.
    let mut text = std::fs::read_to_string(&ckpt).unwrap();
    text.push_str("{\"request_id\": \"p-0000");
    std::fs::write(&ckpt, text).unwrap();

    let second = Arc::new(Flaky {
        broken,
        healed: true,
        calls: AtomicUsize::new(0),
    });
    let providers: HashMap<Source, Arc<dyn Provider>> = HashMap::from([(Source::Mock, second.clone() as Arc<dyn Provider>)]);
    let s2 = execute(&p, &providers, &fast_limits(Source::Mock, 2), &ckpt, &failures)
        .await
        .unwrap();
    assert_eq!((s2.resumed, s2.completed, s2.failed), (17, 3, 0));
    assert_eq!(second.calls.load(Ordering::SeqCst), 3);

    let done = load_checkpoint(&ckpt).unwrap();
    let ids: Vec<&str> = done.iter().map(|c| c.request_id.as_str()).collect();
    let expected: Vec<String> = (0..20).map(|i| format!("p-{i:06}")).collect();
    assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read_to_string(&failures).unwrap(), "");
}

#[tokio::test]
async fn missing_provider_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let providers: HashMap<Source, Arc<dyn Provider>> = HashMap::new();
    let err = execute(
        &plan(1, Source::Mock),
        &providers,
        &ExecuteOptions::default(),
        &dir.path().join("c"),
        &dir.path().join("f"),
    )
    .await
    .unwrap_err();
    assert!(err.to_string().contains("mock"));
}

async fn embed(Json(body): Json<Value>) -> Json<Value> {
    let texts = body["texts"].as_array().unwrap();
    let vectors: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| vec![t.as_str().unwrap().chars().count() as f64, 1.0])
        .collect();
    Json(json!({"vectors": vectors, "dim": 2}))
}

async fn embed_tokens(Json(body): Json<Value>) -> Json<Value> {
    let tokens: Vec<&str> = body["text"].as_str().unwrap().split(' ').collect();
    let vectors: Vec<Vec<f64>> = tokens.iter().map(|_| vec![3.0, 4.0]).collect();
    Json(json!({"tokens": tokens, "vectors": vectors}))
}

#[test]
fn http_embedder_normalizes_service_vectors() {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let addr = serve(
                Router::new()
                    .route("/embed", post(embed))
                    .route("/embed_tokens", post(embed_tokens)),
            )
            .await;
            tx.send(addr).unwrap();
            std::future::pending::<()>().await;
        });
    });
    let addr = rx.recv().unwrap();
    let e = HttpEmbedder::new(format!("http://{addr}/"), None, Duration::from_secs(5)).unwrap();
    let v = e.embed_texts(&["abc".into(), "".into()]).unwrap();
    assert_eq!(v.len(), 2);
    let a = v[0].values();
    assert!((a[0] - 3.0 / 10f64.sqrt()).abs() < 1e-12);
    let (tokens, vectors) = e.embed_tokens("x y", 0).unwrap();
    assert_eq!(tokens, ["x", "y"]);
    assert_eq!(vectors[1].values(), &[0.6, 0.8]);
}

#[tokio::test]
async fn mock_plan_of_fifty_completes_without_failures() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = Arc::new(HashMap::new());
    let mock: Arc<dyn Provider> = Arc::new(medaug_gen::MockProvider::new(Source::Mock, seeds, 3, 0.05));
    let providers = HashMap::from([(Source::Mock, mock)]);
    let checkpoint = dir.path().join("c.jsonl");
    let summary = execute(
        &plan(50, Source::Mock),
        &providers,
        &fast_limits(Source::Mock, 1),
        &checkpoint,
        &dir.path().join("f.jsonl"),
    )
    .await
    .unwrap();
    assert_eq!((summary.completed, summary.failed), (50, 0));
    assert_eq!(load_checkpoint(&checkpoint).unwrap().len(), 50);
}
