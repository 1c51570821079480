use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ev_resilience::pipeline::{Context, PipelineConfig};
use ev_resilience_service::{router, AppState, CONTEXT_VERSION_HEADER, DEFAULT_SWEEP_CAP};

fn loaded() -> AppState {
    let ctx = Context::build(&PipelineConfig::default()).unwrap();
    AppState::with_context(ctx, DEFAULT_SWEEP_CAP)
}

async fn call(state: &AppState, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

#[tokio::test]
async fn health_and_loading_state() {
    let state = AppState::empty(DEFAULT_SWEEP_CAP);
    let (s, v) = call(&state, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["context_loaded"], false);
    let (s, _) = call(&state, Request::get("/api/context").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(&state, post("/api/scenario", json!({}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn context_summary() {
    let state = loaded();
    let (s, v) = call(&state, Request::get("/api/context").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["zone_ids"].as_array().unwrap().len(), v["n_zones"].as_u64().unwrap() as usize);
    assert_eq!(v["defaults"]["policies"].as_array().unwrap().len(), 4);
    assert!(v["version"].as_str().unwrap().len() == 16);
}

#[tokio::test]
async fn scenario_defaults_and_policy_gain() {
    let state = loaded();
    let (s, v) = call(&state, post("/api/scenario", json!({"policy": {"kind": "hybrid"}}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let auc = v["report"]["delta_auc"].as_f64().unwrap();
    let none = v["no_policy_report"]["delta_auc"].as_f64().unwrap();
    assert!(auc < none);
    let backlog = &v["trajectory"]["backlog"]["values"];
    assert_eq!(backlog.as_array().unwrap().len(), 793);
    let g = &v["grid"];
    assert_eq!(
        g["delta_h"].as_i64().unwrap(),
        g["h_stress_no_policy"].as_i64().unwrap() - g["h_stress"].as_i64().unwrap()
    );
}

#[tokio::test]
async fn unshocked_scenario_has_no_excess() {
    let state = loaded();
    let (s, v) = call(&state, post("/api/scenario", json!({"multiplier": 1.0}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["report"]["delta_auc"].as_f64().unwrap(), 0.0);
    assert_eq!(v["report"]["delta_rt"].as_f64().unwrap(), 0.0);
}

#[tokio::test]
async fn bad_requests_name_the_field() {
    let state = loaded();
    let (s, v) = call(&state, post("/api/scenario", json!({"multiplier": "big"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "multiplier");
    let (s, v) = call(&state, post("/api/scenario", json!({"policy": {"elasticity": "abc"}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["field"].as_str().unwrap().contains("elasticity"), "{v}");
    let (s, v) = call(&state, post("/api/scenario", json!({"multiplier": -1.0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "multiplier");
    let (s, v) = call(&state, post("/api/scenario", json!({"bogus": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("bogus"));
}

#[tokio::test]
async fn stale_version_conflicts() {
    let state = loaded();
    let req = Request::post("/api/scenario")
        .header("content-type", "application/json")
        .header(CONTEXT_VERSION_HEADER, "deadbeef")
        .body(Body::from("{}"))
        .unwrap();
    let (s, v) = call(&state, req).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("reload"));
}

#[tokio::test]
async fn sweep_cap_and_boundary() {
    let state = loaded();
    let many: Vec<f64> = (0..9).map(|i| 1.0 + i as f64 * 0.1).collect();
    let (s, _) = call(&state, post("/api/sweep", json!({"multipliers": many, "elasticities": many.iter().map(|_| -0.2).collect::<Vec<_>>(), "policy": "price"}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, v) = call(
        &state,
        post("/api/sweep", json!({"multipliers": [1.2, 1.5, 2.0], "elasticities": [-0.1, -0.3], "policy": "price"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["cells"].as_array().unwrap().len(), 6);
    assert!(v["boundary"].is_object());
}

#[tokio::test]
async fn single_cell_sweep_refuses_fit() {
    let state = loaded();
    let (s, v) =
        call(&state, post("/api/sweep", json!({"multipliers": [1.5], "elasticities": [-0.2], "policy": "price"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["cells"].as_array().unwrap().len(), 1);
    assert!(v["boundary"]["line"].is_null());
    assert!(v["boundary"]["warning"].is_string());
}

#[tokio::test]
async fn default_grid_sweep_is_fitted_and_repeatable() {
    let state = loaded();
    let body = json!({
        "multipliers": [1.2, 1.5, 1.8, 2.0],
        "elasticities": [-0.1, -0.2, -0.3, -0.4, -0.5],
        "policy": "price"
    });
    let raw = |b: Value| async {
        let resp = router(state.clone()).oneshot(post("/api/sweep", b)).await.unwrap();
        resp.into_body().collect().await.unwrap().to_bytes()
    };
    let first = raw(body.clone()).await;
    let second = raw(body).await;
    assert_eq!(first, second);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 20);
    assert_eq!(v["boundary"]["line"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn context_defaults_list_sweep_multipliers() {
    let state = loaded();
    let (_, v) = call(&state, Request::get("/api/context").body(Body::empty()).unwrap()).await;
    assert_eq!(v["defaults"]["multipliers"], json!([1.2, 1.5, 1.8, 2.0]));
    let (_, s) = call(&state, post("/api/scenario", json!({}))).await;
    assert_eq!(s["version"], v["version"]);
}
