//! The chat-completions client against a local fake endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use argus_core::dataset::{AdSample, Partition};
use argus_core::debate::{DebateConfig, DebateEngine};
use argus_core::fixtures::{self, P_NEW};
use argus_core::gateway::scripted::{CueModel, ScriptedBackend};
use argus_core::gateway::{invoke_agent, BackendConfig, GatewayError, ModelBackend, Role, RoleBackends};
use argus_core::pipeline::builtin_registry;
use argus_core::retrieval::EvidenceIndex;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use serde_json::{json, Value};

#[derive(Clone, Copy)]
enum Mode {
    /// Answer with the scripted backend's reply.
    Echo,
    /// Fail with 503 for the first `n` requests.
    FailFirst(usize),
    /// Reply without a verdict line for the first `n` requests.
    MalformedFirst(usize),
    Slow(Duration),
}

struct Fake {
    mode: Mode,
    requests: AtomicUsize,
    last_auth: Mutex<Option<String>>,
    last_body: Mutex<Option<Value>>,
    scripted: ScriptedBackend,
}

async fn chat(State(fake): State<Arc<Fake>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let n = fake.requests.fetch_add(1, Ordering::SeqCst);
    *fake.last_auth.lock() = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    *fake.last_body.lock() = Some(body.clone());
    let prompt = body["messages"][1]["content"].as_str().unwrap_or_default().to_string();
    let content = match fake.mode {
        Mode::FailFirst(k) if n < k => return (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response(),
        Mode::MalformedFirst(k) if n < k => "I think it is fine.".to_string(),
        Mode::Slow(d) => {
            tokio::time::sleep(d).await;
            fake.scripted.complete(&prompt).unwrap()
        }
        _ => fake.scripted.complete(&prompt).unwrap(),
    };
    Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]})).into_response()
}

/// Serves the fake on its own runtime thread; returns the base URL.
fn serve(mode: Mode) -> (String, Arc<Fake>) {
    let fake = Arc::new(Fake {
        mode,
        requests: AtomicUsize::new(0),
        last_auth: Mutex::new(None),
        last_body: Mutex::new(None),
        scripted: ScriptedBackend::new(9, Arc::new(CueModel::fixture())),
    });
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(fake.clone());
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{addr}/v1"), fake)
}

fn config(url: &str, env: &str) -> BackendConfig {
    BackendConfig {
        auth_env_var: env.to_string(),
        max_retries: 2,
        ..BackendConfig::remote(url, "test-model")
    }
}

fn k12_prompt() -> (String, Vec<String>) {
    let registry = builtin_registry().unwrap();
    let keys = vec!["P33".to_string()];
    let clauses = vec![registry.clause("P33").unwrap()];
    let sample = argus_core::synth::case_k12();
    let ctx = argus_core::gateway::PromptContext {
        sample: &sample,
        policies: &clauses,
        evidence: &[],
        arguments: &[],
        labels_only: false,
    };
    (argus_core::gateway::build_prompt(Role::Prosecutor, &ctx).unwrap(), keys)
}

#[test]
fn sends_bearer_token_and_parses_reply() {
    let (url, fake) = serve(Mode::Echo);
    std::env::set_var("ARGUS_TEST_KEY_A", "secret-a");
    let backend = config(&url, "ARGUS_TEST_KEY_A").build().unwrap();
    let (prompt, keys) = k12_prompt();
    let reply = invoke_agent(Role::Prosecutor, &prompt, &keys, backend.as_ref(), false).unwrap();
    assert_eq!(reply.verdicts["P33"].label(), 1);
    assert!(reply.cot.contains("guaranteed admission"));
    assert_eq!(fake.last_auth.lock().as_deref(), Some("Bearer secret-a"));
    let body = fake.last_body.lock().clone().unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(fake.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn retries_server_errors_within_budget() {
    let (url, fake) = serve(Mode::FailFirst(2));
    std::env::set_var("ARGUS_TEST_KEY_B", "k");
    let backend = config(&url, "ARGUS_TEST_KEY_B").build().unwrap();
    let (prompt, keys) = k12_prompt();
    invoke_agent(Role::Prosecutor, &prompt, &keys, backend.as_ref(), false).unwrap();
    assert_eq!(fake.requests.load(Ordering::SeqCst), 3);

    let (url, _) = serve(Mode::FailFirst(10));
    let backend = config(&url, "ARGUS_TEST_KEY_B").build().unwrap();
    let err = invoke_agent(Role::Prosecutor, &prompt, &keys, backend.as_ref(), false).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 503, .. }), "{err}");
}

#[test]
fn malformed_reply_is_reinstructed() {
    let (url, fake) = serve(Mode::MalformedFirst(1));
    std::env::set_var("ARGUS_TEST_KEY_C", "k");
    let backend = config(&url, "ARGUS_TEST_KEY_C").build().unwrap();
    let (prompt, keys) = k12_prompt();
    let reply = invoke_agent(Role::Prosecutor, &prompt, &keys, backend.as_ref(), false).unwrap();
    assert_eq!(reply.verdicts["P33"].label(), 1);
    assert_eq!(fake.requests.load(Ordering::SeqCst), 2);
    let body = fake.last_body.lock().clone().unwrap();
    assert_ne!(body["messages"][1]["content"].as_str().unwrap(), prompt);
}

#[test]
fn missing_key_fails_before_any_request() {
    let (url, fake) = serve(Mode::Echo);
    let backend = config(&url, "ARGUS_TEST_KEY_UNSET").build().unwrap();
    let err = backend.complete("hello").unwrap_err();
    assert!(matches!(err, GatewayError::MissingAuth(_)));
    assert_eq!(fake.requests.load(Ordering::SeqCst), 0);
}

#[test]
fn slow_endpoint_times_out() {
    let (url, _) = serve(Mode::Slow(Duration::from_secs(3)));
    std::env::set_var("ARGUS_TEST_KEY_D", "k");
    let cfg = BackendConfig {
        timeout_secs: 1,
        max_retries: 0,
        ..config(&url, "ARGUS_TEST_KEY_D")
    };
    let err = cfg.build().unwrap().complete("x").unwrap_err();
    assert!(matches!(err, GatewayError::Timeout(_)), "{err}");
}

#[test]
fn remote_debate_matches_scripted_debate() {
    let (url, _) = serve(Mode::Echo);
    std::env::set_var("ARGUS_TEST_KEY_E", "k");
    let registry = builtin_registry().unwrap();
    let index = Arc::new(EvidenceIndex::build(&registry.clauses(), &[]).unwrap());
    let remote: Arc<dyn ModelBackend> = config(&url, "ARGUS_TEST_KEY_E").build().unwrap();
    let scripted: Arc<dyn ModelBackend> = Arc::new(ScriptedBackend::new(9, Arc::new(CueModel::fixture())));
    let sample = AdSample::new("r1", "Join our circle for insider info and unclosed trends.", Partition::Historical);
    let keys = fixtures::emerging_keys();
    let adjudicate = |backends: RoleBackends| {
        let engine = DebateEngine::new(registry.clone(), backends, index.clone(), DebateConfig::default()).unwrap();
        let t = engine.bilateral_debate(&sample, P_NEW, &keys).unwrap();
        engine.adjudicate(&sample, &t).unwrap()
    };
    let a = adjudicate(RoleBackends::uniform(remote));
    let b = adjudicate(RoleBackends::uniform(scripted));
    assert_eq!(a.rectified_labels, b.rectified_labels);
    assert_eq!(a.rationale, b.rationale);
    assert_eq!(a.rectified_labels["P35"], 1);
}
