//! Build a context and query the API in process, without binding a port.

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

use ev_resilience::pipeline::{Context, PipelineConfig};
use ev_resilience_service::{router, AppState, DEFAULT_SWEEP_CAP};

#[tokio::main]
async fn main() {
    let ctx = Context::build(&PipelineConfig::default()).expect("context");
    let app = router(AppState::with_context(ctx, DEFAULT_SWEEP_CAP));
    let body = r#"{"multiplier": 1.8, "policy": {"kind": "hybrid"}}"#;
    let req = Request::post("/api/scenario").header("content-type", "application/json").body(Body::from(body)).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    println!("status {}", resp.status());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    println!("report {}", v["report"]);
    println!("no policy {}", v["no_policy_report"]);
    println!("grid dH {}", v["grid"]["delta_h"]);
}
