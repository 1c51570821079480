//! HTTP JSON API over a loaded simulation context.
//!
//! Endpoints: `GET /healthz`, `GET /api/context`, `POST /api/scenario`,
//! `POST /api/sweep`. The context is loaded once and shared read-only.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ev_resilience::deliverability::LutProvenance;
use ev_resilience::grid::{ev_load, stress_hours, LoadSeries};
use ev_resilience::panel::SplitIndex;
use ev_resilience::pipeline::{Context, ForecastSource};
use ev_resilience::resilience::{
    fit_boundary, resilience_metrics, simulate, sweep, BacklogTrajectory, BoundaryFit, PolicyKind, ResilienceReport,
    ScenarioSpec, SweepCell, SWEEP_ELASTICITIES, SWEEP_MULTIPLIERS,
};

pub const CONTEXT_VERSION_HEADER: &str = "x-context-version";
pub const DEFAULT_SWEEP_CAP: usize = 64;
pub const MAX_SERIES_POINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), field } }
    }
}

impl From<ev_resilience::Error> for ApiError {
    fn from(e: ev_resilience::Error) -> Self {
        match e {
            ev_resilience::Error::Invalid { field, message } => {
                ApiError::new(StatusCode::BAD_REQUEST, format!("{field}: {message}"), Some(field))
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string(), None),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// A sampled series: `values[i]` is the value at hour `hours[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub hours: Vec<usize>,
    pub values: Vec<f64>,
}

/// Stride sampling down to at most `max_points`, always keeping the first,
/// last and (first) maximum points.
pub fn downsample(values: &[f64], max_points: usize) -> Series {
    let n = values.len();
    if n <= max_points.max(3) {
        return Series { hours: (0..n).collect(), values: values.to_vec() };
    }
    let argmax = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best });
    let stride = (n - 1).div_ceil(max_points - 3);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    idx.push(n - 1);
    idx.push(argmax);
    idx.sort_unstable();
    idx.dedup();
    Series { values: idx.iter().map(|i| values[*i]).collect(), hours: idx }
}

/// Zone totals of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub backlog: Series,
    pub baseline_backlog: Series,
    pub arrivals: Series,
    pub served: Series,
    pub lost: Series,
}

impl TrajectoryView {
    fn new(traj: &BacklogTrajectory, base: &BacklogTrajectory) -> Self {
        let d = |v: &[f64]| downsample(&traj.aggregate(v), MAX_SERIES_POINTS);
        Self {
            backlog: d(&traj.backlog),
            baseline_backlog: downsample(&base.aggregate(&base.backlog), MAX_SERIES_POINTS),
            arrivals: d(&traj.arrivals),
            served: d(&traj.served),
            lost: d(&traj.lost),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridView {
    pub transformer_capacity_kw: f64,
    pub h_stress: usize,
    pub h_stress_no_policy: usize,
    /// Positive means fewer stress hours than the no-policy run.
    pub delta_h: i64,
    pub p_base_kw: Series,
    pub p_ev_kw: Series,
    pub p_total_kw: Series,
    pub lambda: Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub version: String,
    pub scenario: ScenarioSpec,
    pub report: ResilienceReport,
    /// Same shock without any policy, for comparison.
    pub no_policy_report: ResilienceReport,
    pub trajectory: TrajectoryView,
    pub grid: GridView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub multipliers: Vec<f64>,
    pub elasticities: Vec<f64>,
    pub policy: PolicyKind,
    /// Base scenario for every cell; defaults apply when omitted.
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub version: String,
    pub cells: Vec<SweepCell>,
    pub boundary: BoundaryFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub scenario: ScenarioSpec,
    pub multipliers: Vec<f64>,
    pub elasticities: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub multiplier_range: (f64, f64),
    pub sweep_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub version: String,
    pub n_zones: usize,
    pub n_hours: usize,
    pub zone_ids: Vec<String>,
    pub split: SplitIndex,
    pub forecast_source: ForecastSource,
    pub lut_provenance: LutProvenance,
    /// Zones the capacity boost would target, highest risk first.
    pub boost_zones: Vec<String>,
    pub defaults: Defaults,
}

pub struct SessionContext {
    pub context: Context,
    pub summary: ContextSummary,
}

impl SessionContext {
    pub fn new(context: Context, sweep_cap: usize) -> Self {
        let p = &context.panel;
        let scenario = context.config.scenario;
        let boost = ev_resilience::resilience::boost_set(&context.risk.scores, scenario.policy.top_k);
        let summary = ContextSummary {
            version: context.version.clone(),
            n_zones: p.n_zones(),
            n_hours: p.n_hours(),
            zone_ids: p.zone_ids().to_vec(),
            split: context.split,
            forecast_source: context.config.forecast,
            lut_provenance: context.lut_provenance.clone(),
            boost_zones: boost.iter().map(|z| p.zone_ids()[*z].clone()).collect(),
            defaults: Defaults {
                scenario,
                multipliers: SWEEP_MULTIPLIERS.to_vec(),
                elasticities: SWEEP_ELASTICITIES.to_vec(),
                policies: PolicyKind::ALL.to_vec(),
                multiplier_range: (1.0, 2.0),
                sweep_cap,
            },
        };
        Self { context, summary }
    }
}

struct Shared {
    context: OnceLock<Arc<SessionContext>>,
    sweep_cap: usize,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// State with no context yet; data endpoints answer 503 until one is set.
    pub fn empty(sweep_cap: usize) -> Self {
        Self { shared: Arc::new(Shared { context: OnceLock::new(), sweep_cap }) }
    }

    pub fn with_context(context: Context, sweep_cap: usize) -> Self {
        let s = Self::empty(sweep_cap);
        s.load(context);
        s
    }

    /// Installs the context. A second call is ignored.
    pub fn load(&self, context: Context) -> bool {
        self.shared
            .context
            .set(Arc::new(SessionContext::new(context, self.shared.sweep_cap)))
            .is_ok()
    }

    pub fn is_loaded(&self) -> bool {
        self.shared.context.get().is_some()
    }

    fn session(&self, headers: &HeaderMap) -> Result<Arc<SessionContext>, ApiError> {
        let s = self
            .shared
            .context
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "context is still loading", None))?;
        if let Some(v) = headers.get(CONTEXT_VERSION_HEADER) {
            let v = v.to_str().unwrap_or("");
            if v != s.context.version {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("context version {v} is stale, current is {}; reload /api/context", s.context.version),
                    None,
                ));
            }
        }
        Ok(s)
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError::new(StatusCode::BAD_REQUEST, e.inner().to_string(), field)
    })
}

pub fn run_scenario(context: &Context, spec: &ScenarioSpec) -> Result<ScenarioResponse, ApiError> {
    spec.validate()?;
    let inputs = &context.inputs;
    let base = simulate(&spec.baseline(), inputs)?;
    let traj = simulate(spec, inputs)?;
    let report = resilience_metrics(&traj, &base, spec)?;
    let none_spec = spec.with_policy(PolicyKind::None);
    let none_traj = if spec.policy.kind == PolicyKind::None { traj.clone() } else { simulate(&none_spec, inputs)? };
    let no_policy_report = resilience_metrics(&none_traj, &base, &none_spec)?;

    let gcfg = &context.config.grid;
    let reference = ev_load(&none_traj, gcfg.ev_mode);
    let (profile, c_tr) = gcfg.calibrate(&reference);
    let load = LoadSeries::new(ev_load(&traj, gcfg.ev_mode), &profile, c_tr);
    let h = stress_hours(&load.lambda, gcfg.stress_threshold);
    let h_none = stress_hours(&LoadSeries::new(reference, &profile, c_tr).lambda, gcfg.stress_threshold);
    let d = |v: &[f64]| downsample(v, MAX_SERIES_POINTS);
    Ok(ScenarioResponse {
        version: context.version.clone(),
        scenario: *spec,
        report,
        no_policy_report,
        trajectory: TrajectoryView::new(&traj, &base),
        grid: GridView {
            transformer_capacity_kw: c_tr,
            h_stress: h,
            h_stress_no_policy: h_none,
            delta_h: h_none as i64 - h as i64,
            p_base_kw: d(&load.p_base),
            p_ev_kw: d(&load.p_ev),
            p_total_kw: d(&load.p_total),
            lambda: d(&load.lambda),
        },
    })
}

pub fn run_sweep(context: &Context, req: &SweepRequest, cap: usize) -> Result<SweepResponse, ApiError> {
    let n = req.multipliers.len() * req.elasticities.len();
    if n > cap {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("sweep has {n} cells, the limit is {cap}"),
            None,
        ));
    }
    if n == 0 {
        let field = if req.multipliers.is_empty() { "multipliers" } else { "elasticities" };
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("{field} must not be empty"), Some(field.into())));
    }
    let base = req.scenario.unwrap_or(context.config.scenario);
    for m in &req.multipliers {
        ScenarioSpec { multiplier: *m, ..base }.validate()?;
    }
    for e in &req.elasticities {
        let mut s = base;
        s.policy.elasticity = *e;
        s.validate()?;
    }
    let cells = sweep(&base, &context.inputs, &req.multipliers, &req.elasticities, req.policy)?;
    Ok(SweepResponse { version: context.version.clone(), boundary: fit_boundary(&cells), cells })
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "context_loaded": state.is_loaded() }))
}

async fn get_context(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<ContextSummary>, ApiError> {
    Ok(Json(state.session(&headers)?.summary.clone()))
}

async fn post_scenario(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<ScenarioResponse>, ApiError> {
    let session = state.session(&headers)?;
    let spec: ScenarioSpec = parse_body(&body)?;
    let out = tokio::task::spawn_blocking(move || run_scenario(&session.context, &spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))??;
    Ok(Json(out))
}

async fn post_sweep(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<SweepResponse>, ApiError> {
    let session = state.session(&headers)?;
    let req: SweepRequest = parse_body(&body)?;
    let cap = state.shared.sweep_cap;
    let out = tokio::task::spawn_blocking(move || run_sweep(&session.context, &req, cap))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))??;
    Ok(Json(out))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/context", get(get_context))
        .route("/api/scenario", post(post_scenario))
        .route("/api/sweep", post(post_sweep))
        .with_state(state)
}

/// Serves `state` on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_series_pass_through() {
        let s = downsample(&[1.0, 5.0, 2.0], 2000);
        assert_eq!(s.hours, vec![0, 1, 2]);
    }

    #[test]
    fn long_series_keep_first_last_and_peak() {
        let mut v: Vec<f64> = (0..10_000).map(|i| (i % 7) as f64).collect();
        v[4321] = 99.0;
        let s = downsample(&v, 2000);
        assert!(s.hours.len() <= 2000);
        assert_eq!(s.hours[0], 0);
        assert_eq!(*s.hours.last().unwrap(), 9999);
        assert!(s.hours.contains(&4321));
        assert!(s.hours.windows(2).all(|w| w[0] < w[1]));
        assert!(s.hours.iter().zip(&s.values).all(|(h, x)| v[*h] == *x));
    }
}
