use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use event_retriever::concurrency::InFlightLimiter;
use event_retriever::embedding::remote::{EmbedImageRequest, EmbedResponse, EmbedTextRequest};
use event_retriever::embedding::{
    ImageEmbedder, ProviderError, ProviderKind, ProviderSpec, RetryPolicy, TextEmbedder,
};
use event_retriever::rerank::providers::{RerankWireRequest, RerankWireResponse};
use event_retriever::rerank::{ArticleReranker, DEFAULT_INSTRUCT};
use event_retriever::ImageRecord;

#[derive(Default)]
struct Stub {
    hits: AtomicUsize,
    batches: Mutex<Vec<usize>>,
    reranks: Mutex<Vec<RerankWireRequest>>,
}

type Shared = State<Arc<Stub>>;

fn vectors(n: usize, dim: usize) -> Json<EmbedResponse> {
    Json(EmbedResponse {
        vectors: (0..n).map(|i| vec![1.0 + i as f32; dim]).collect(),
    })
}

async fn ok_text(State(s): Shared, Json(r): Json<EmbedTextRequest>) -> Json<EmbedResponse> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    s.batches.lock().unwrap().push(r.texts.len());
    vectors(r.texts.len(), 64)
}

async fn dim63_text(State(s): Shared, Json(r): Json<EmbedTextRequest>) -> Json<EmbedResponse> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    vectors(r.texts.len(), 63)
}

async fn slow_text(State(s): Shared, Json(r): Json<EmbedTextRequest>) -> Json<EmbedResponse> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(600)).await;
    vectors(r.texts.len(), 64)
}

async fn flaky_text(State(s): Shared, Json(r): Json<EmbedTextRequest>) -> Response {
    if s.hits.fetch_add(1, Ordering::SeqCst) < 2 {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    vectors(r.texts.len(), 64).into_response()
}

async fn reject_text(State(s): Shared) -> Response {
    s.hits.fetch_add(1, Ordering::SeqCst);
    (StatusCode::BAD_REQUEST, "no").into_response()
}

async fn ok_image(State(s): Shared, Json(r): Json<EmbedImageRequest>) -> Json<EmbedResponse> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    assert!(r.uris.iter().all(|u| u.starts_with("file://")));
    vectors(r.uris.len(), 64)
}

async fn ok_rerank(State(s): Shared, Json(r): Json<RerankWireRequest>) -> Json<RerankWireResponse> {
    let scores = r
        .documents
        .iter()
        .map(|d| if d.contains(&r.query) { 0.9 } else { 0.1 })
        .collect();
    s.reranks.lock().unwrap().push(r);
    Json(RerankWireResponse { scores })
}

async fn bad_rerank(Json(r): Json<RerankWireRequest>) -> Json<RerankWireResponse> {
    Json(RerankWireResponse {
        scores: vec![1.5; r.documents.len()],
    })
}

/// Serves the stub on a background runtime; returns the base URL.
fn start(stub: Arc<Stub>) -> String {
    let app = Router::new()
        .route("/ok/embed_text", post(ok_text))
        .route("/ok/embed_image", post(ok_image))
        .route("/ok/rerank", post(ok_rerank))
        .route("/ok/health", get(|| async { "ok" }))
        .route("/dim63/embed_text", post(dim63_text))
        .route("/slow/embed_text", post(slow_text))
        .route("/flaky/embed_text", post(flaky_text))
        .route("/reject/embed_text", post(reject_text))
        .route("/bad/rerank", post(bad_rerank))
        .with_state(stub);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn spec(kind: ProviderKind, endpoint: String, max_batch: usize) -> ProviderSpec {
    ProviderSpec {
        endpoint,
        max_batch,
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 10,
            max_delay_ms: 50,
            timeout_ms: 150,
        },
        ..ProviderSpec::local(kind, 64)
    }
}

fn text(endpoint: String, max_batch: usize) -> TextEmbedder {
    TextEmbedder::from_spec(
        spec(ProviderKind::TextEmbed, endpoint, max_batch),
        0,
        Arc::default(),
    )
    .unwrap()
}

#[test]
fn batches_are_split_and_vectors_normalized() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let texts: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
    let out = text(format!("{base}/ok"), 3).embed_texts(&texts).unwrap();
    assert_eq!(out.len(), 7);
    assert_eq!(*stub.batches.lock().unwrap(), [3, 3, 1]);
    for v in &out {
        assert_eq!(v.dim(), 64);
        assert!((v.norm() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn wrong_dimension_is_a_configuration_error() {
    let base = start(Arc::default());
    let err = text(format!("{base}/dim63"), 8).embed_one("x").unwrap_err();
    assert!(matches!(
        err,
        ProviderError::DimensionMismatch {
            expected: 64,
            got: 63
        }
    ));
    assert!(!err.is_retryable());
}

#[test]
fn timeouts_exhaust_the_retry_budget() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let err = text(format!("{base}/slow"), 8).embed_one("x").unwrap_err();
    assert!(err.is_retryable());
    match err {
        ProviderError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn transient_errors_are_retried() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let v = text(format!("{base}/flaky"), 8).embed_one("x").unwrap();
    assert_eq!(v.dim(), 64);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let err = text(format!("{base}/reject"), 8)
        .embed_one("x")
        .unwrap_err();
    assert!(matches!(err, ProviderError::Rejected { status: 400, .. }));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn image_embedding_sends_uris() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let images: Vec<ImageRecord> = (0..5)
        .map(|i| ImageRecord {
            image_id: format!("i{i}"),
            owner_article_id: "a".into(),
            uri: format!("file://i{i}.jpg"),
        })
        .collect();
    let e = ImageEmbedder::from_spec(
        spec(ProviderKind::ImageEmbed, format!("{base}/ok"), 2),
        0,
        Arc::default(),
    )
    .unwrap();
    assert_eq!(e.embed_images(&images).unwrap().len(), 5);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn rerank_endpoint_round_trip() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone());
    let r = ArticleReranker::from_spec(
        spec(ProviderKind::Rerank, format!("{base}/ok"), 2),
        0,
        Arc::new(InFlightLimiter::new(1)),
    )
    .unwrap();
    let docs: Vec<String> = ["about flood here", "sports", "flood again"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let scores = r.score_documents("flood", &docs).unwrap();
    let values: Vec<f64> = scores.iter().map(|s| s.value()).collect();
    assert_eq!(values, [0.9, 0.1, 0.9]);
    let seen = stub.reranks.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].instruct, DEFAULT_INSTRUCT);
    assert_eq!(seen[0].query, "flood");
    assert_eq!(seen[0].documents.len(), 2);
}

#[test]
fn out_of_range_rerank_scores_are_protocol_errors() {
    let base = start(Arc::default());
    let r = ArticleReranker::from_spec(
        spec(ProviderKind::Rerank, format!("{base}/bad"), 8),
        0,
        Arc::default(),
    )
    .unwrap();
    assert!(matches!(
        r.score_documents("q", &["d".to_string()]),
        Err(ProviderError::Protocol(_))
    ));
}

#[test]
fn health_probe() {
    use event_retriever::embedding::remote::HttpClient;
    let base = start(Arc::default());
    assert!(HttpClient::new(&format!("{base}/ok"), RetryPolicy::default()).is_healthy());
    assert!(!HttpClient::new(&format!("{base}/nothing"), RetryPolicy::default()).is_healthy());
}
