//! Backlog simulation under demand shocks and policy interventions.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastSeries;
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    None,
    Price,
    Capboost,
    Hybrid,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::None, PolicyKind::Price, PolicyKind::Capboost, PolicyKind::Hybrid];

    pub fn has_price(self) -> bool {
        matches!(self, PolicyKind::Price | PolicyKind::Hybrid)
    }

    pub fn has_capboost(self) -> bool {
        matches!(self, PolicyKind::Capboost | PolicyKind::Hybrid)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Price => "price",
            PolicyKind::Capboost => "capboost",
            PolicyKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("policy.kind", format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Relative price change applied during the shock.
    pub delta_p: f64,
    pub elasticity: f64,
    /// Capacity boost fraction for the top-risk zones.
    pub boost_frac: f64,
    pub top_k: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { kind: PolicyKind::None, delta_p: 0.5, elasticity: -0.2, boost_frac: 0.3, top_k: 30 }
    }
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        if !self.delta_p.is_finite() {
            return Err(Error::invalid("policy.delta_p", "must be finite"));
        }
        if !(self.elasticity.is_finite() && self.elasticity <= 0.0) {
            return Err(Error::invalid("policy.elasticity", format!("must be <= 0, got {}", self.elasticity)));
        }
        if !(self.boost_frac.is_finite() && self.boost_frac >= 0.0) {
            return Err(Error::invalid("policy.boost_frac", format!("must be >= 0, got {}", self.boost_frac)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub multiplier: f64,
    /// `[start, end)` hour indices.
    pub shock_window: (usize, usize),
    pub horizon: usize,
    pub policy: PolicySpec,
    /// kWh
    pub balk_threshold: f64,
    pub balk_rate: f64,
    pub recovery_theta_frac: f64,
    /// Hours the aggregated excess must stay below threshold.
    pub recovery_hold: usize,
    /// Apply balking before price shaping.
    pub balk_before_price: bool,
    /// Apply price shaping at every hour, not only inside the shock.
    pub price_always_on: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            multiplier: 1.5,
            shock_window: (168, 216),
            horizon: 792,
            policy: PolicySpec::default(),
            balk_threshold: 200.0,
            balk_rate: 0.05,
            recovery_theta_frac: 0.01,
            recovery_hold: 24,
            balk_before_price: false,
            price_always_on: false,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.multiplier.is_finite() && self.multiplier >= 1.0) {
            return Err(Error::invalid("multiplier", format!("must be >= 1, got {}", self.multiplier)));
        }
        let (s, e) = self.shock_window;
        if !(s < e && e <= self.horizon) {
            return Err(Error::invalid(
                "shock_window",
                format!("need start < end <= horizon ({}), got [{s}, {e})", self.horizon),
            ));
        }
        if !(self.balk_threshold.is_finite() && self.balk_threshold >= 0.0) {
            return Err(Error::invalid("balk_threshold", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.balk_rate) {
            return Err(Error::invalid("balk_rate", format!("must lie in [0, 1), got {}", self.balk_rate)));
        }
        if !(self.recovery_theta_frac > 0.0 && self.recovery_theta_frac < 1.0) {
            return Err(Error::invalid("recovery_theta_frac", "must lie in (0, 1)"));
        }
        self.policy.validate()
    }

    pub fn in_shock(&self, t: usize) -> bool {
        (self.shock_window.0..self.shock_window.1).contains(&t)
    }

    /// Same forecasts, no shock, no policy.
    pub fn baseline(&self) -> Self {
        Self { multiplier: 1.0, policy: PolicySpec { kind: PolicyKind::None, ..self.policy }, ..*self }
    }

    pub fn with_policy(&self, kind: PolicyKind) -> Self {
        Self { policy: PolicySpec { kind, ..self.policy }, ..*self }
    }
}

/// Price-shaped arrivals; unchanged outside the active window.
pub fn apply_price(a: f64, policy: &PolicySpec, active: bool) -> f64 {
    if active && policy.kind.has_price() {
        (a * (1.0 + policy.elasticity * policy.delta_p)).max(0.0)
    } else {
        a
    }
}

/// Zones chosen for the capacity boost: top `top_k` by score, ties by index.
pub fn boost_set(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx.truncate(top_k.min(scores.len()));
    idx
}

pub fn apply_capboost(capacity: &[f64], scores: &[f64], policy: &PolicySpec) -> Vec<f64> {
    let mut out = capacity.to_vec();
    for z in boost_set(scores, policy.top_k) {
        out[z] *= 1.0 + policy.boost_frac;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// kWh per zone
    pub backlog: Vec<f64>,
    pub hour: usize,
}

impl SimState {
    pub fn empty(n_zones: usize) -> Self {
        Self { backlog: vec![0.0; n_zones], hour: 0 }
    }
}

/// One hour of flows for every zone, kWh/h.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepFlows {
    pub arrivals: Vec<f64>,
    pub supply: Vec<f64>,
    pub served: Vec<f64>,
    pub lost: Vec<f64>,
}

/// Energy grid for arrivals and supply, kWh. On this grid every sum and
/// difference the simulator forms is exact, so backlog accounting has no
/// rounding drift.
pub const ENERGY_QUANTUM_KWH: f64 = 1.0 / 1_048_576.0;

pub fn quantize_energy(x: f64) -> f64 {
    (x / ENERGY_QUANTUM_KWH).round() * ENERGY_QUANTUM_KWH
}

/// Advance one hour. `capacity` already carries any policy boost.
pub fn step(
    state: &SimState,
    v_hat: &[f64],
    slr_hat: &[f64],
    capacity: &[f64],
    scenario: &ScenarioSpec,
) -> Result<(SimState, StepFlows)> {
    let nz = state.backlog.len();
    if v_hat.len() != nz || slr_hat.len() != nz || capacity.len() != nz {
        return Err(Error::invalid("step", "per-zone inputs must match the backlog length"));
    }
    if v_hat.iter().chain(slr_hat).chain(capacity).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite(format!("step inputs at hour {}", state.hour)));
    }
    let t = state.hour;
    let shock = scenario.in_shock(t);
    let m = if shock { scenario.multiplier } else { 1.0 };
    let price_on = shock || scenario.price_always_on;
    let mut next = SimState { backlog: Vec::with_capacity(nz), hour: t + 1 };
    let mut flows = StepFlows {
        arrivals: Vec::with_capacity(nz),
        supply: Vec::with_capacity(nz),
        served: Vec::with_capacity(nz),
        lost: Vec::with_capacity(nz),
    };
    for z in 0..nz {
        let b = state.backlog[z];
        let balk = |a: f64| if b > scenario.balk_threshold { a * (1.0 - scenario.balk_rate) } else { a };
        let a = v_hat[z] * m;
        let a_eff = quantize_energy(if scenario.balk_before_price {
            apply_price(balk(a), &scenario.policy, price_on)
        } else {
            balk(apply_price(a, &scenario.policy, price_on))
        });
        let s = quantize_energy(capacity[z] * (1.0 - slr_hat[z]));
        let avail = b + a_eff;
        let served = s.min(avail);
        next.backlog.push(avail - served);
        flows.arrivals.push(a_eff);
        flows.supply.push(s);
        flows.served.push(served);
        flows.lost.push((a_eff - s).max(0.0));
    }
    Ok((next, flows))
}

/// Hour-major trajectory. `backlog` has `horizon + 1` rows, flows have `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacklogTrajectory {
    pub n_zones: usize,
    pub horizon: usize,
    pub backlog: Vec<f64>,
    pub arrivals: Vec<f64>,
    pub supply: Vec<f64>,
    pub served: Vec<f64>,
    pub lost: Vec<f64>,
}

impl BacklogTrajectory {
    pub fn backlog_at(&self, t: usize) -> &[f64] {
        &self.backlog[t * self.n_zones..(t + 1) * self.n_zones]
    }

    /// Zone-summed series of an hour-major array.
    pub fn aggregate(&self, values: &[f64]) -> Vec<f64> {
        values.chunks(self.n_zones).map(|r| r.iter().sum()).collect()
    }
}

/// Forecasts and capacities shared by every scenario on one panel.
#[derive(Debug, Clone)]
pub struct SimInputs {
    /// Must cover hours `0..horizon`.
    pub forecast: ForecastSeries,
    /// kWh/h per zone
    pub capacity: Vec<f64>,
    pub risk_scores: Vec<f64>,
}

impl SimInputs {
    pub fn new(forecast: ForecastSeries, capacity: Vec<f64>, risk_scores: Vec<f64>) -> Result<Self> {
        let nz = forecast.n_zones;
        if capacity.len() != nz || risk_scores.len() != nz {
            return Err(Error::invalid("capacity", "capacity and risk scores need one entry per zone"));
        }
        if capacity.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::invalid("capacity", "must be positive"));
        }
        Ok(Self { forecast, capacity, risk_scores })
    }

    pub fn n_zones(&self) -> usize {
        self.forecast.n_zones
    }
}

pub fn simulate(scenario: &ScenarioSpec, inputs: &SimInputs) -> Result<BacklogTrajectory> {
    scenario.validate()?;
    let f = &inputs.forecast;
    let nz = f.n_zones;
    if f.start_hour != 0 || f.n_hours() < scenario.horizon {
        return Err(Error::invalid(
            "horizon",
            format!(
                "forecast covers hours {:?}, scenario needs 0..{}",
                f.hours(),
                scenario.horizon
            ),
        ));
    }
    let boosted = if scenario.policy.kind.has_capboost() {
        apply_capboost(&inputs.capacity, &inputs.risk_scores, &scenario.policy)
    } else {
        inputs.capacity.clone()
    };
    let h = scenario.horizon;
    let mut traj = BacklogTrajectory {
        n_zones: nz,
        horizon: h,
        backlog: Vec::with_capacity((h + 1) * nz),
        arrivals: Vec::with_capacity(h * nz),
        supply: Vec::with_capacity(h * nz),
        served: Vec::with_capacity(h * nz),
        lost: Vec::with_capacity(h * nz),
    };
    let mut state = SimState::empty(nz);
    traj.backlog.extend_from_slice(&state.backlog);
    for t in 0..h {
        let row = t * nz..(t + 1) * nz;
        let cap = if t >= scenario.shock_window.0 { &boosted } else { &inputs.capacity };
        let (next, flows) = step(&state, &f.volume[row.clone()], &f.slr[row], cap, scenario)?;
        traj.backlog.extend_from_slice(&next.backlog);
        traj.arrivals.extend(flows.arrivals);
        traj.supply.extend(flows.supply);
        traj.served.extend(flows.served);
        traj.lost.extend(flows.lost);
        state = next;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResilienceReport {
    /// kWh·h
    pub delta_auc: f64,
    /// Hours after shock end until the excess backlog stays below threshold.
    pub delta_rt: f64,
    /// True when recovery was not observed before the horizon.
    pub censored: bool,
    /// kWh
    pub peak: f64,
    /// kWh
    pub ens: f64,
    /// kWh, recovery threshold on the zone-summed excess
    pub theta: f64,
}

/// Metrics from hour-major excess backlog `delta` with `n_zones` columns,
/// covering hours `0..=horizon`.
pub fn metrics_from_excess(delta: &[f64], n_zones: usize, shock_end: usize, hold: usize, theta_frac: f64, ens: f64) -> ResilienceReport {
    let delta_auc: f64 = delta.iter().sum();
    let peak = delta.iter().copied().fold(0.0, f64::max);
    let agg: Vec<f64> = delta.chunks(n_zones).map(|r| r.iter().sum()).collect();
    let last = agg.len() - 1;
    let max_agg = agg.iter().copied().fold(0.0, f64::max);
    let theta = theta_frac * max_agg;
    let (delta_rt, censored) = if max_agg == 0.0 {
        (0.0, false)
    } else {
        let found = (shock_end + 1..)
            .take_while(|t| t + hold <= last)
            .find(|t| agg[*t..=t + hold].iter().all(|d| *d <= theta));
        match found {
            Some(t) => ((t - shock_end) as f64, false),
            None => (last.saturating_sub(shock_end) as f64, true),
        }
    };
    ResilienceReport { delta_auc, delta_rt, censored, peak, ens, theta }
}

pub fn resilience_metrics(scen: &BacklogTrajectory, base: &BacklogTrajectory, scenario: &ScenarioSpec) -> Result<ResilienceReport> {
    if scen.n_zones != base.n_zones || scen.backlog.len() != base.backlog.len() {
        return Err(Error::invalid("trajectory", "scenario and baseline shapes differ"));
    }
    let delta: Vec<f64> = scen.backlog.iter().zip(&base.backlog).map(|(s, b)| (s - b).max(0.0)).collect();
    let ens = scen.lost.iter().sum();
    Ok(metrics_from_excess(
        &delta,
        scen.n_zones,
        scenario.shock_window.1,
        scenario.recovery_hold,
        scenario.recovery_theta_frac,
        ens,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: PolicyKind,
    pub report: ResilienceReport,
    /// Percent reduction of ΔAUC relative to no policy.
    pub auc_reduction_pct: f64,
    pub peak_reduction_pct: f64,
    pub ens_reduction_pct: f64,
    #[serde(skip)]
    pub trajectory: Option<BacklogTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySuite {
    pub scenario: ScenarioSpec,
    pub boosted_zones: Vec<usize>,
    pub outcomes: Vec<PolicyOutcome>,
    #[serde(skip)]
    pub baseline: Option<BacklogTrajectory>,
}

impl PolicySuite {
    pub fn get(&self, kind: PolicyKind) -> &PolicyOutcome {
        self.outcomes.iter().find(|o| o.policy == kind).expect("suite has every policy")
    }
}

fn reduction_pct(reference: f64, value: f64) -> f64 {
    if reference > 0.0 {
        100.0 * (reference - value) / reference
    } else {
        0.0
    }
}

/// All four policies against one shared baseline.
pub fn run_policy_suite(scenario: &ScenarioSpec, inputs: &SimInputs) -> Result<PolicySuite> {
    scenario.validate()?;
    let base = simulate(&scenario.baseline(), inputs)?;
    let runs = PolicyKind::ALL
        .par_iter()
        .map(|k| {
            let spec = scenario.with_policy(*k);
            let traj = simulate(&spec, inputs)?;
            let report = resilience_metrics(&traj, &base, &spec)?;
            Ok((*k, report, traj))
        })
        .collect::<Result<Vec<_>>>()?;
    let none = runs[0].1;
    let outcomes = runs
        .into_iter()
        .map(|(policy, report, traj)| PolicyOutcome {
            policy,
            report,
            auc_reduction_pct: reduction_pct(none.delta_auc, report.delta_auc),
            peak_reduction_pct: reduction_pct(none.peak, report.peak),
            ens_reduction_pct: reduction_pct(none.ens, report.ens),
            trajectory: Some(traj),
        })
        .collect();
    Ok(PolicySuite {
        scenario: *scenario,
        boosted_zones: boost_set(&inputs.risk_scores, scenario.policy.top_k),
        outcomes,
        baseline: Some(base),
    })
}

pub const SWEEP_MULTIPLIERS: [f64; 4] = [1.2, 1.5, 1.8, 2.0];
pub const SWEEP_ELASTICITIES: [f64; 5] = [-0.1, -0.2, -0.3, -0.4, -0.5];
pub const SWEEP_COLUMNS: [&str; 8] = ["m", "epsilon", "policy", "delta_auc", "delta_rt", "censored", "peak", "ens"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub m: f64,
    pub epsilon: f64,
    pub policy: PolicyKind,
    pub report: ResilienceReport,
}

/// One report per `(m, ε)` cell, multiplier-major, all against one baseline.
pub fn sweep(
    scenario: &ScenarioSpec,
    inputs: &SimInputs,
    multipliers: &[f64],
    elasticities: &[f64],
    kind: PolicyKind,
) -> Result<Vec<SweepCell>> {
    let base = simulate(&scenario.baseline(), inputs)?;
    let cells: Vec<(f64, f64)> = multipliers
        .iter()
        .flat_map(|m| elasticities.iter().map(move |e| (*m, *e)))
        .collect();
    cells
        .par_iter()
        .map(|(m, e)| {
            let mut spec = scenario.with_policy(kind);
            spec.multiplier = *m;
            spec.policy.elasticity = *e;
            let traj = simulate(&spec, inputs)?;
            Ok(SweepCell { m: *m, epsilon: *e, policy: kind, report: resilience_metrics(&traj, &base, &spec)? })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut text = SWEEP_COLUMNS.join(",");
    text.push('\n');
    for c in cells {
        let r = &c.report;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            c.m,
            c.epsilon,
            c.policy.name(),
            r.delta_auc,
            r.delta_rt,
            r.censored,
            r.peak,
            r.ens
        );
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    /// `(ε, m_crit)` per column with at least one recoverable cell.
    pub points: Vec<(f64, f64)>,
    /// Columns with no recoverable cell.
    pub excluded: Vec<f64>,
    /// Intercept and slope of `m_crit ≈ a + b·ε`.
    pub line: Option<(f64, f64)>,
    pub warning: Option<String>,
}

/// Least-squares line through `(ε, m)` points.
pub fn fit_boundary_points(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(Error::invalid("boundary", "need at least two distinct elasticities"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    Ok((my - b * mx, b))
}

pub fn fit_boundary(cells: &[SweepCell]) -> BoundaryFit {
    let mut eps: Vec<f64> = cells.iter().map(|c| c.epsilon).collect();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    let mut all_recoverable = true;
    for e in &eps {
        let col: Vec<&SweepCell> = cells.iter().filter(|c| c.epsilon == *e).collect();
        all_recoverable &= col.iter().all(|c| !c.report.censored);
        match col.iter().filter(|c| !c.report.censored).map(|c| c.m).reduce(f64::max) {
            Some(m) => points.push((*e, m)),
            None => excluded.push(*e),
        }
    }
    let mut warning = None;
    let mut line = None;
    if points.len() < 2 {
        warning = Some(format!("boundary fit refused: {} recoverable column(s)", points.len()));
    } else if all_recoverable {
        warning = Some("every cell recovered; boundary lies above the tested multipliers".into());
    } else {
        line = fit_boundary_points(&points).ok();
    }
    if let Some(w) = &warning {
        warn!("{w}");
    }
    BoundaryFit { points, excluded, line, warning }
}
