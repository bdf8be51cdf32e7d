mod common;

use std::sync::Arc;

use common::{golden, stub};
use serde_json::Value;
use ted_core::gateway::wire::{canonical_string, parse_response_body, request_body};
use ted_core::gateway::{
    BackendError, ChatMessage, ChatRequest, Gateway, GatewayError, HttpBackend, RetryPolicy, SamplingParams,
};
use ted_core::{ModelRole, TokenLedger};

#[test]
fn golden_request_bodies() {
    let failures: Vec<String> = golden::requests()
        .iter()
        .filter_map(|(name, req)| golden::check(name, req).err())
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn golden_files_use_openai_shapes() {
    for (name, _) in golden::requests() {
        let text = std::fs::read_to_string(golden::fixture_path(name)).unwrap();
        let body: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(body["n"], 1, "{name}");
        assert_eq!(body["temperature"], 0.7, "{name}");
        let messages = body["messages"].as_array().unwrap();
        assert!(!messages.is_empty(), "{name}");
        let last = messages.last().unwrap();
        assert_eq!(last["role"], "user", "{name}");
        if name == "student_solve_image" {
            let parts = last["content"].as_array().unwrap();
            assert_eq!(parts[0]["type"], "text");
            assert_eq!(parts[1]["type"], "image_url");
            assert_eq!(parts[1]["image_url"]["url"], "https://example.com/tank.png");
        } else {
            assert!(last["content"].is_string(), "{name}");
        }
    }
}

#[test]
fn golden_student_prompt_lists_experiences_in_store_order() {
    let text = std::fs::read_to_string(golden::fixture_path("student_solve")).unwrap();
    let a = text.find("[E1] When rates act together").unwrap();
    let b = text.find("[E2] Eliminate options").unwrap();
    let c = text.find("[E3] Re-read the question").unwrap();
    assert!(a < b && b < c);
}

#[test]
fn golden_critique_marks_negative_teacher() {
    let ok = std::fs::read_to_string(golden::fixture_path("teacher_critique")).unwrap();
    let neg = std::fs::read_to_string(golden::fixture_path("teacher_critique_negative_teacher")).unwrap();
    assert!(ok.contains("reaches the ground-truth answer"));
    assert!(neg.contains("NEGATIVE CASE"));
    assert!(!ok.contains("NEGATIVE CASE"));
}

fn request() -> ChatRequest {
    ChatRequest::new(
        "student-model",
        vec![ChatMessage::system("sys"), ChatMessage::user("What is 2 + 3?")],
        &SamplingParams::default(),
    )
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_backoff_ms: 5,
    }
}

#[test]
fn response_fixture_parses() {
    let body = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/wire/response.json"
    ))
    .unwrap();
    let resp = parse_response_body(&body, &request(), "t").unwrap();
    assert_eq!(resp.completions, vec!["Answer: 5\nUsed: [E2]".to_string()]);
    assert_eq!((resp.usage.prompt_tokens, resp.usage.completion_tokens), (31, 9));
    assert!(!resp.usage_estimated);
}

#[tokio::test]
async fn retries_429_twice_then_books_one_response() {
    let server = stub::start(vec![
        (429, r#"{"error":"rate limited"}"#.into()),
        (429, r#"{"error":"rate limited"}"#.into()),
        (200, stub::ok_body("Answer: 5", 40, 12)),
    ])
    .await;
    let gateway =
        Gateway::new(Arc::new(HttpBackend::new("stub", &server.endpoint, Some("k".into())))).with_retry(fast_retry());
    let req = request();
    let resp = gateway.complete(&req).await.unwrap();
    assert_eq!(resp.attempts, 3);
    assert_eq!(server.hits(), 3);

    let ledger = TokenLedger::default().accumulate(&resp, ModelRole::Student);
    let student = ledger.get(ModelRole::Student);
    assert_eq!((student.prompt_tokens, student.completion_tokens), (40, 12));
    assert_eq!(ledger.get(ModelRole::Teacher).total(), 0);

    // each attempt carried the same body as the golden encoder produces
    let expected = canonical_string(&request_body(&req));
    for body in server.bodies() {
        assert_eq!(canonical_string(&serde_json::from_str(&body).unwrap()), expected);
    }
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let server = stub::start(vec![(400, r#"{"error":"bad request"}"#.into())]).await;
    let gateway = Gateway::new(Arc::new(HttpBackend::new("stub", &server.endpoint, None))).with_retry(fast_retry());
    let err = gateway.complete(&request()).await.unwrap_err();
    assert_eq!(server.hits(), 1);
    assert!(matches!(
        err,
        GatewayError::Backend {
            attempts: 1,
            source: BackendError::Status { status: 400, .. }
        }
    ));
}

#[tokio::test]
async fn server_errors_exhaust_the_retry_budget() {
    let server = stub::start(vec![(503, "unavailable".into())]).await;
    let gateway = Gateway::new(Arc::new(HttpBackend::new("stub", &server.endpoint, None))).with_retry(fast_retry());
    let err = gateway.complete(&request()).await.unwrap_err();
    assert_eq!(server.hits(), 3);
    assert!(matches!(err, GatewayError::Backend { attempts: 3, .. }));
}

#[tokio::test]
async fn malformed_body_keeps_raw_text() {
    let server = stub::start(vec![(200, "{\"choices\": oops".into())]).await;
    let gateway = Gateway::new(Arc::new(HttpBackend::new("stub", &server.endpoint, None))).with_retry(fast_retry());
    let err = gateway.complete(&request()).await.unwrap_err();
    assert_eq!(server.hits(), 1);
    match err {
        GatewayError::Backend {
            source: BackendError::Protocol { body, .. },
            ..
        } => assert_eq!(body, "{\"choices\": oops"),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn missing_usage_is_estimated() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":"Answer: 5"}}]}"#;
    let server = stub::start(vec![(200, body.into())]).await;
    let gateway = Gateway::new(Arc::new(HttpBackend::new("stub", &server.endpoint, None)));
    let resp = gateway.complete(&request()).await.unwrap();
    assert!(resp.usage_estimated);
    // "Answer: 5" is 9 chars
    assert_eq!(resp.usage.completion_tokens, 3);
}
