use std::time::{Duration, Instant};

use axum::extract::Json;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};

use defectloop_core::backend::{
    BackendError, BackendKind, ExternalBackend, ExternalConfig, InMemoryData, ModelBackend, ModelHandle, TrainingHyperparams,
};
use defectloop_core::raster::Plane;
use defectloop_core::synthetic::{SyntheticConfig, SyntheticCorpus};

const RES: u32 = 8;

async fn predict(Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let png = base64::engine::general_purpose::STANDARD
        .decode(body["image"].as_str().unwrap_or_default())
        .unwrap_or_default();
    if Plane::decode_png(&png).is_err() {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "image is not a png"})));
    }
    let map = |v: f64| json!({"width": RES, "height": RES, "values": vec![v; (RES * RES) as usize]});
    match body["model_id"].as_str() {
        Some("zeros") => (StatusCode::OK, Json(json!({"probability_maps": {"PolycrystallineDefect": map(0.0)}, "boxes": []}))),
        Some("overflow") => (StatusCode::OK, Json(json!({"probability_maps": {"PolycrystallineDefect": map(1.3)}}))),
        Some("garbage") => (StatusCode::OK, Json(json!({"probability_maps": 7}))),
        Some("slow") => {
            tokio::time::sleep(Duration::from_secs(3)).await;
            (StatusCode::OK, Json(json!({})))
        }
        _ => (StatusCode::NOT_FOUND, Json(json!({"error": "unknown model"}))),
    }
}

async fn train(Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    match body["dataset_uri"].as_str() {
        Some(uri) if uri.starts_with("file://") => (StatusCode::OK, Json(json!({"model_id": "zeros"}))),
        _ => (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"error": "dataset_uri must be a file uri"}))),
    }
}

/// Starts the stub trainer on an ephemeral port and returns its base url.
fn stub() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
                .route("/train", post(train))
                .route("/predict", post(predict));
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}/")
}

fn backend(url: &str, timeout_ms: u64) -> ExternalBackend {
    let mut cfg = ExternalConfig::new(url);
    cfg.timeout_ms = timeout_ms;
    cfg.retries = 0;
    ExternalBackend::new(cfg)
}

fn handle(model_id: &str) -> ModelHandle {
    ModelHandle {
        model_id: model_id.into(),
        backend_kind: BackendKind::External { endpoint: "stub".into() },
        version: 1,
        training_manifest_id: "d".into(),
        resolution: RES,
    }
}

#[test]
fn health_and_trailing_slash() {
    let be = backend(&stub(), 5_000);
    assert_eq!(be.health().unwrap().status, "ok");
}

#[test]
fn all_zero_maps_are_valid() {
    let be = backend(&stub(), 5_000);
    let pred = be.predict(&handle("zeros"), "img", &Plane::new(RES, RES, 0.3)).unwrap();
    assert_eq!(pred.image_id, "img");
    let map = pred.probability_maps.values().next().unwrap();
    assert!(map.values.iter().all(|&p| p == 0.0));
    assert!(pred.boxes.is_empty());
}

#[test]
fn out_of_range_probability_is_malformed() {
    let be = backend(&stub(), 5_000);
    let err = be.predict(&handle("overflow"), "img", &Plane::new(RES, RES, 0.3)).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)), "{err:?}");
    let err = be.predict(&handle("garbage"), "img", &Plane::new(RES, RES, 0.3)).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn unknown_model_is_remote_error() {
    let be = backend(&stub(), 5_000);
    match be.predict(&handle("nope"), "img", &Plane::new(RES, RES, 0.3)) {
        Err(BackendError::RemoteError(msg)) => assert_eq!(msg, "unknown model"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_resolution_never_reaches_the_wire() {
    // the url points nowhere, so only a local check can answer
    let be = backend("http://127.0.0.1:9", 500);
    let err = be.predict(&handle("zeros"), "img", &Plane::new(RES + 1, RES, 0.3)).unwrap_err();
    assert!(matches!(err, BackendError::ResolutionMismatch { .. }), "{err:?}");
}

#[test]
fn slow_server_times_out() {
    let be = backend(&stub(), 300);
    let start = Instant::now();
    let err = be.predict(&handle("slow"), "img", &Plane::new(RES, RES, 0.3)).unwrap_err();
    assert!(matches!(err, BackendError::Timeout), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(2));
}

#[test]
fn unreachable_server_is_unavailable() {
    let be = backend("http://127.0.0.1:9", 500);
    let err = be.health().unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable(_) | BackendError::Timeout), "{err:?}");
}

#[test]
fn train_sends_dataset_uri_and_versions_models() {
    let be = backend(&stub(), 5_000);
    let corpus = SyntheticCorpus::generate(&SyntheticConfig {
        images: 2,
        ..SyntheticConfig::default()
    });
    let mut data: InMemoryData = corpus.labeled("remote", &corpus.ids(), RES).unwrap();
    let hp = TrainingHyperparams::default();
    assert!(matches!(be.train(&data, &hp), Err(BackendError::Data(_))));
    data.uri = Some("s3://bucket/remote".into());
    assert!(matches!(be.train(&data, &hp), Err(BackendError::RemoteError(_))));
    data.uri = Some("file:///data/remote".into());
    let a = be.train(&data, &hp).unwrap();
    let b = be.train(&data, &hp).unwrap();
    assert_eq!(a.model_id, "zeros");
    assert_eq!((a.version, b.version), (1, 2));
    assert_eq!(a.training_manifest_id, "remote");
    // exported params are the handle itself
    let bytes = be.export_params(&b).unwrap();
    be.import_params(&b, &bytes).unwrap();
    assert!(matches!(be.import_params(&handle("other"), &bytes), Err(BackendError::BadParams(_))));
}
