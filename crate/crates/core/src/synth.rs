//! Seeded synthetic stand-ins for the micro telemetry and the city panel.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deliverability::BinGrid;
use crate::error::{Error, Result};
use crate::panel::{StationConfig, TelemetryRecord, ZoneHourPanel, ZoneMeta};
use crate::seed::stage_rng;

/// One temperature row of a piecewise-linear law: `eta` at each `s_knot`,
/// held flat beyond the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawRow {
    pub s_knots: Vec<f64>,
    pub eta: Vec<f64>,
}

impl LawRow {
    fn eval(&self, s: f64) -> f64 {
        let k = &self.s_knots;
        if s <= k[0] {
            return self.eta[0];
        }
        if s >= k[k.len() - 1] {
            return self.eta[k.len() - 1];
        }
        let i = k.partition_point(|x| *x <= s) - 1;
        let w = (s - k[i]) / (k[i + 1] - k[i]);
        self.eta[i] + w * (self.eta[i + 1] - self.eta[i])
    }
}

/// Ground-truth deliverability law used to generate telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeliverabilityLaw {
    Constant { eta: f64 },
    /// `min(1, 1/s)`.
    InversePressure,
    /// One row per temperature bin, or a single row shared by all bins.
    PiecewiseLinear { rows: Vec<LawRow> },
}

impl DeliverabilityLaw {
    /// Flat until s = 0.5, then derating with pressure; colder and hotter
    /// bins derate harder.
    pub fn thermal_default() -> Self {
        let derate = [0.12, 0.08, 0.05, 0.03, 0.02, 0.03, 0.06];
        let rows = derate
            .iter()
            .map(|d| LawRow {
                s_knots: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
                eta: vec![1.0, 1.0, 0.85 - d, 0.7 - d, 0.55 - d, 0.35 - d],
            })
            .collect();
        DeliverabilityLaw::PiecewiseLinear { rows }
    }

    pub fn validate(&self, grid: &BinGrid) -> Result<()> {
        match self {
            DeliverabilityLaw::Constant { eta } if !(0.0..=1.0).contains(eta) => {
                Err(Error::invalid("law.eta", format!("{eta} outside [0, 1]")))
            }
            DeliverabilityLaw::PiecewiseLinear { rows } => {
                if rows.len() != 1 && rows.len() != grid.n_temp() {
                    return Err(Error::invalid(
                        "law.rows",
                        format!("need 1 or {} rows, got {}", grid.n_temp(), rows.len()),
                    ));
                }
                for (i, r) in rows.iter().enumerate() {
                    if r.s_knots.is_empty() || r.s_knots.len() != r.eta.len() {
                        return Err(Error::invalid("law.rows", format!("row {i}: knots and eta differ in length")));
                    }
                    if r.s_knots.windows(2).any(|w| !(w[0] < w[1])) {
                        return Err(Error::invalid("law.rows", format!("row {i}: knots not increasing")));
                    }
                    if r.eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
                        return Err(Error::invalid("law.rows", format!("row {i}: eta outside [0, 1]")));
                    }
                    if r.eta.windows(2).any(|w| w[1] > w[0]) {
                        return Err(Error::invalid(
                            "law.rows",
                            format!("row {i}: deliverability increases with pressure"),
                        ));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `eta*(T_bin, s)`.
    pub fn eval(&self, t_bin: usize, s: f64) -> f64 {
        match self {
            DeliverabilityLaw::Constant { eta } => *eta,
            DeliverabilityLaw::InversePressure => {
                if s <= 1.0 {
                    1.0
                } else {
                    1.0 / s
                }
            }
            DeliverabilityLaw::PiecewiseLinear { rows } => {
                let row = if rows.len() == 1 { &rows[0] } else { &rows[t_bin] };
                row.eval(s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePlacement {
    /// Every sample sits at its cell's center.
    #[default]
    CellCenter,
    /// Uniform within the cell.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTelemetrySpec {
    pub law: DeliverabilityLaw,
    pub grid: BinGrid,
    pub samples_per_cell: usize,
    /// Multiplicative noise half-width on the realized ratio.
    pub noise: f64,
    pub p_cap_kw: f64,
    pub n_stations: usize,
    pub start_minute: i64,
    pub placement: SamplePlacement,
}

impl Default for SynthTelemetrySpec {
    fn default() -> Self {
        Self {
            law: DeliverabilityLaw::thermal_default(),
            grid: BinGrid::standard(),
            samples_per_cell: 30,
            noise: 0.02,
            p_cap_kw: StationConfig::PER_PLUG_KW,
            n_stations: 4,
            start_minute: 27_744_480, // 2022-10-01T00:00Z
            placement: SamplePlacement::CellCenter,
        }
    }
}

/// Telemetry whose realized ratio follows `law` up to multiplicative noise
/// drawn uniformly from `[1 - noise, 1 + noise]` and clipped to `[0, 1]`.
/// Setpoints sit at `min(1, eta * (1 + noise))` of the request, so realized
/// power never exceeds the setpoint.
pub fn generate_synthetic_telemetry(spec: &SynthTelemetrySpec, seed: u64) -> Result<Vec<TelemetryRecord>> {
    spec.law.validate(&spec.grid)?;
    if !(0.0..1.0).contains(&spec.noise) {
        return Err(Error::invalid("noise", "must be in [0, 1)"));
    }
    if !(spec.p_cap_kw > 0.0) {
        return Err(Error::invalid("p_cap_kw", "must be > 0"));
    }
    let n_stations = spec.n_stations.max(1);
    let mut rng = stage_rng(seed, "telemetry");
    let grid = &spec.grid;
    let mut out = Vec::with_capacity(grid.n_temp() * grid.n_pressure() * spec.samples_per_cell);
    for tb in 0..grid.n_temp() {
        for sb in 0..grid.n_pressure() {
            for _ in 0..spec.samples_per_cell {
                let (temp_c, s) = match spec.placement {
                    SamplePlacement::CellCenter => (grid.temp_center(tb), grid.pressure_center(sb)),
                    SamplePlacement::Uniform => (
                        rng.gen_range(grid.temp_edges[tb]..grid.temp_edges[tb + 1]),
                        rng.gen_range(grid.pressure_edges[sb]..grid.pressure_edges[sb + 1]),
                    ),
                };
                let eta = spec.law.eval(tb, s);
                let u = if spec.noise > 0.0 {
                    rng.gen_range(1.0 - spec.noise..=1.0 + spec.noise)
                } else {
                    1.0
                };
                let p_req = s * spec.p_cap_kw;
                let i = out.len();
                out.push(TelemetryRecord {
                    timestamp: spec.start_minute + i as i64,
                    station_id: format!("ST{:02}", i % n_stations),
                    p_req_kw: p_req,
                    p_set_kw: p_req * (eta * (1.0 + spec.noise)).min(1.0),
                    p_real_kw: p_req * (eta * u).clamp(0.0, 1.0),
                    temp_c,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPanelSpec {
    pub n_zones: usize,
    pub n_hours: usize,
    /// Zones are scattered uniformly over a square of this side.
    pub area_km: f64,
    pub capacity_range: (f64, f64),
    /// Per-zone multiplier on the utilization profile.
    pub zone_scale_range: (f64, f64),
    /// Off-peak utilization (fraction of capacity).
    pub base_utilization: f64,
    pub morning_peak_hour: f64,
    pub evening_peak_hour: f64,
    pub morning_amplitude: f64,
    pub evening_amplitude: f64,
    pub peak_width_h: f64,
    pub weekend_factor: f64,
    /// Multiplicative demand noise half-width.
    pub demand_noise: f64,
    /// Fraction of zones that run close to capacity around the clock.
    pub saturated_zone_fraction: f64,
    /// Utilization of those zones.
    pub saturated_utilization: f64,
    pub temp_mean_c: f64,
    pub temp_daily_amplitude: f64,
    /// Amplitude of a slow drift over the whole panel.
    pub temp_drift_amplitude: f64,
    pub temp_zone_spread: f64,
    pub temp_noise: f64,
}

impl Default for SynthPanelSpec {
    fn default() -> Self {
        Self {
            n_zones: 20,
            n_hours: 720,
            area_km: 16.0,
            capacity_range: (80.0, 240.0),
            zone_scale_range: (0.75, 1.0),
            base_utilization: 0.22,
            morning_peak_hour: 10.0,
            evening_peak_hour: 20.0,
            morning_amplitude: 0.35,
            evening_amplitude: 0.5,
            peak_width_h: 2.0,
            weekend_factor: 0.9,
            demand_noise: 0.05,
            saturated_zone_fraction: 0.2,
            saturated_utilization: 0.84,
            temp_mean_c: 18.0,
            temp_daily_amplitude: 4.0,
            temp_drift_amplitude: 5.0,
            temp_zone_spread: 1.0,
            temp_noise: 0.5,
        }
    }
}

/// Periodic Gaussian bump on the 24 h clock.
pub(crate) fn daily_bump(hour_of_day: f64, center: f64, width: f64) -> f64 {
    let d = (hour_of_day - center).rem_euclid(24.0);
    let d = d.min(24.0 - d);
    (-d * d / (2.0 * width * width)).exp()
}

pub fn generate_synthetic_panel(spec: &SynthPanelSpec, seed: u64) -> Result<ZoneHourPanel> {
    if spec.n_zones == 0 || spec.n_hours == 0 {
        return Err(Error::invalid("panel size", "n_zones and n_hours must be > 0"));
    }
    let (c_lo, c_hi) = spec.capacity_range;
    if !(c_lo > 0.0 && c_hi >= c_lo) {
        return Err(Error::invalid("capacity_range", "need 0 < low <= high"));
    }
    let mut rng = stage_rng(seed, "panel");
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };

    let n_saturated = (spec.saturated_zone_fraction * spec.n_zones as f64).round() as usize;
    let mut zones = Vec::with_capacity(spec.n_zones);
    let mut scale = Vec::with_capacity(spec.n_zones);
    let mut temp_offset = Vec::with_capacity(spec.n_zones);
    for z in 0..spec.n_zones {
        zones.push(ZoneMeta {
            zone_id: format!("Z{z:03}"),
            capacity_kwh_per_h: uniform(&mut rng, c_lo, c_hi),
            x_km: uniform(&mut rng, 0.0, spec.area_km),
            y_km: uniform(&mut rng, 0.0, spec.area_km),
        });
        scale.push(uniform(&mut rng, spec.zone_scale_range.0, spec.zone_scale_range.1));
        temp_offset.push(uniform(&mut rng, -spec.temp_zone_spread, spec.temp_zone_spread));
    }
    // Saturated zones are spread evenly across the index range.
    let saturated: Vec<bool> = (0..spec.n_zones)
        .map(|z| n_saturated > 0 && (z * n_saturated) % spec.n_zones < n_saturated)
        .collect();

    let cells = spec.n_zones * spec.n_hours;
    let mut demand = Vec::with_capacity(cells);
    let mut temp = Vec::with_capacity(cells);
    for t in 0..spec.n_hours {
        let hod = (t % 24) as f64;
        let day = t / 24;
        let weekday = if day % 7 >= 5 { spec.weekend_factor } else { 1.0 };
        let shape = spec.base_utilization
            + spec.morning_amplitude * daily_bump(hod, spec.morning_peak_hour, spec.peak_width_h)
            + spec.evening_amplitude * daily_bump(hod, spec.evening_peak_hour, spec.peak_width_h);
        let drift = spec.temp_drift_amplitude * (2.0 * PI * t as f64 / spec.n_hours as f64).cos();
        let diurnal = spec.temp_daily_amplitude * (2.0 * PI * (hod - 15.0) / 24.0).cos();
        for z in 0..spec.n_zones {
            let noise = uniform(&mut rng, 1.0 - spec.demand_noise, 1.0 + spec.demand_noise);
            let util = if saturated[z] {
                spec.saturated_utilization * noise
            } else {
                scale[z] * shape * weekday * noise
            };
            demand.push(zones[z].capacity_kwh_per_h * util);
            let tn = uniform(&mut rng, -spec.temp_noise, spec.temp_noise);
            temp.push(spec.temp_mean_c + drift + diurnal + temp_offset[z] + tn);
        }
    }
    ZoneHourPanel::new(zones, spec.n_hours, demand, temp)
}
