//! Transformer loading from base load plus EV charging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::resilience::{BacklogTrajectory, PolicyKind, PolicySuite};
use crate::stats;
use crate::synth::daily_bump;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvLoadMode {
    /// Energy actually served each hour.
    #[default]
    Delivered,
    /// Deliverable capacity each hour, idle or not.
    CapacityRate,
}

/// Two-peak daily base load, kW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseProfile {
    pub floor_kw: f64,
    pub morning_amp_kw: f64,
    pub evening_amp_kw: f64,
    pub morning_peak_h: f64,
    pub evening_peak_h: f64,
    pub width_h: f64,
}

impl Default for BaseProfile {
    fn default() -> Self {
        Self {
            floor_kw: 3.0,
            morning_amp_kw: 1.8,
            evening_amp_kw: 2.4,
            morning_peak_h: 9.0,
            evening_peak_h: 19.5,
            width_h: 2.5,
        }
    }
}

impl BaseProfile {
    pub fn at(&self, t: usize) -> f64 {
        let h = (t % 24) as f64;
        self.floor_kw
            + self.morning_amp_kw * daily_bump(h, self.morning_peak_h, self.width_h)
            + self.evening_amp_kw * daily_bump(h, self.evening_peak_h, self.width_h)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            floor_kw: self.floor_kw * k,
            morning_amp_kw: self.morning_amp_kw * k,
            evening_amp_kw: self.evening_amp_kw * k,
            ..*self
        }
    }

    /// Daily maximum on a fine grid (peaks need not fall on whole hours).
    pub fn daily_max(&self) -> f64 {
        (0..24 * 60)
            .map(|m| {
                let h = m as f64 / 60.0;
                self.floor_kw
                    + self.morning_amp_kw * daily_bump(h, self.morning_peak_h, self.width_h)
                    + self.evening_amp_kw * daily_bump(h, self.evening_peak_h, self.width_h)
            })
            .fold(f64::MIN, f64::max)
    }
}

pub fn base_profile(t: usize, profile: &BaseProfile) -> f64 {
    profile.at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// kW; `None` calibrates from the base profile.
    pub transformer_capacity_kw: Option<f64>,
    pub stress_threshold: f64,
    /// Base-profile shape. When `absolute_base` is false its kW values are
    /// multiples of the mean no-policy EV load.
    pub base: BaseProfile,
    pub absolute_base: bool,
    /// Loading ratio at which the calibrated base profile peaks.
    pub base_peak_lambda: f64,
    pub ev_mode: EvLoadMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            transformer_capacity_kw: None,
            stress_threshold: 0.8,
            base: BaseProfile::default(),
            absolute_base: false,
            base_peak_lambda: 0.7,
            ev_mode: EvLoadMode::Delivered,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stress_threshold > 0.0 && self.stress_threshold < 1.0) {
            return Err(Error::invalid("stress_threshold", "must lie in (0, 1)"));
        }
        if let Some(c) = self.transformer_capacity_kw {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid("transformer_capacity_kw", "must be positive"));
            }
        }
        if !(self.base_peak_lambda > 0.0) {
            return Err(Error::invalid("base_peak_lambda", "must be positive"));
        }
        if self.base.width_h <= 0.0 {
            return Err(Error::invalid("base.width_h", "must be positive"));
        }
        Ok(())
    }

    /// Absolute base profile and transformer capacity, given the reference EV load.
    pub fn calibrate(&self, reference_ev: &[f64]) -> (BaseProfile, f64) {
        let base = if self.absolute_base { self.base } else { self.base.scaled(stats::mean(reference_ev)) };
        let c_tr = self.transformer_capacity_kw.unwrap_or(base.daily_max() / self.base_peak_lambda);
        (base, c_tr)
    }
}

/// kW per hour, summed over zones.
pub fn ev_load(traj: &BacklogTrajectory, mode: EvLoadMode) -> Vec<f64> {
    match mode {
        EvLoadMode::Delivered => traj.aggregate(&traj.served),
        EvLoadMode::CapacityRate => traj.aggregate(&traj.supply),
    }
}

/// Hours with loading strictly above the threshold.
pub fn stress_hours(lambda: &[f64], threshold: f64) -> usize {
    lambda.iter().filter(|l| **l > threshold).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSeries {
    pub p_base: Vec<f64>,
    pub p_ev: Vec<f64>,
    pub p_total: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub const LOAD_COLUMNS: [&str; 5] = ["hour", "p_base_kw", "p_ev_kw", "p_total_kw", "lambda"];

impl LoadSeries {
    pub fn new(p_ev: Vec<f64>, base: &BaseProfile, c_tr: f64) -> Self {
        let p_base: Vec<f64> = (0..p_ev.len()).map(|t| base.at(t)).collect();
        let p_total: Vec<f64> = p_base.iter().zip(&p_ev).map(|(b, e)| b + e).collect();
        let lambda = p_total.iter().map(|p| p / c_tr).collect();
        Self { p_base, p_ev, p_total, lambda }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = LOAD_COLUMNS.join(",");
        text.push('\n');
        for t in 0..self.p_ev.len() {
            let _ = writeln!(text, "{t},{},{},{},{}", self.p_base[t], self.p_ev[t], self.p_total[t], self.lambda[t]);
        }
        write_atomic(path, text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub h_stress: usize,
    /// Stress hours relieved relative to no policy; negative adds burden.
    pub delta_h: i64,
    pub peak_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub transformer_capacity_kw: f64,
    pub base: BaseProfile,
    pub ev_mode: EvLoadMode,
    pub policies: BTreeMap<String, GridEntry>,
    #[serde(skip)]
    pub loads: BTreeMap<String, LoadSeries>,
}

pub fn grid_report(suite: &PolicySuite, cfg: &GridConfig) -> Result<GridReport> {
    cfg.validate()?;
    let traj = |k: PolicyKind| {
        suite
            .get(k)
            .trajectory
            .as_ref()
            .ok_or_else(|| Error::invalid("suite", "policy suite has no trajectories"))
    };
    let reference = ev_load(traj(PolicyKind::None)?, cfg.ev_mode);
    let (base, c_tr) = cfg.calibrate(&reference);
    let mut loads = BTreeMap::new();
    for k in PolicyKind::ALL {
        loads.insert(k.name().to_string(), LoadSeries::new(ev_load(traj(k)?, cfg.ev_mode), &base, c_tr));
    }
    let h_none = stress_hours(&loads["none"].lambda, cfg.stress_threshold) as i64;
    let policies = loads
        .iter()
        .map(|(name, l)| {
            let h = stress_hours(&l.lambda, cfg.stress_threshold);
            let peak_lambda = l.lambda.iter().copied().fold(0.0, f64::max);
            (name.clone(), GridEntry { h_stress: h, delta_h: h_none - h as i64, peak_lambda })
        })
        .collect();
    Ok(GridReport { transformer_capacity_kw: c_tr, base, ev_mode: cfg.ev_mode, policies, loads })
}
