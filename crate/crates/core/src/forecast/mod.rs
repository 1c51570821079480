//! Spatio-temporal forecaster and its diagnostics.

pub mod features;
pub mod graph;
pub mod model;
pub mod train;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::Injector;
use crate::io::{check_header, open_csv, parse_field, write_atomic};
use crate::panel::ZoneHourPanel;
use crate::stats;

pub use features::{featurize, FeatureWindow, NormStats, DEFAULT_LOOKBACK, N_FEATURES};
pub use graph::{build_graph, ZoneGraph, DEFAULT_RADIUS_KM};
pub use model::{forward, loss, tail_weight, ModelDims, ModelParams, TailLossConfig, Targets};
pub use train::{train, EpochLog, TrainConfig, TrainedModel};

/// Hours in the weekly period used to extend a forecast past its end.
pub const TILE_PERIOD_HOURS: usize = 168;

pub const FORECAST_COLUMNS: [&str; 4] = ["hour", "zone", "vol_hat", "slr_hat"];

/// Per-zone predicted volume and SLR, hour-major, covering
/// `start_hour..start_hour + n_hours()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub n_zones: usize,
    pub start_hour: usize,
    pub volume: Vec<f64>,
    pub slr: Vec<f64>,
}

impl ForecastSeries {
    pub fn new(n_zones: usize, start_hour: usize, volume: Vec<f64>, slr: Vec<f64>) -> Result<Self> {
        if n_zones == 0 || volume.is_empty() {
            return Err(Error::Empty("forecast series".into()));
        }
        if volume.len() != slr.len() || !volume.len().is_multiple_of(n_zones) {
            return Err(Error::invalid("forecast", "volume and slr must be hour x zone arrays of equal size"));
        }
        if volume.iter().chain(&slr).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast".into()));
        }
        if slr.iter().any(|v| !(0.0..=1.0).contains(v)) || volume.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("forecast", "slr must lie in [0, 1] and volume must be non-negative"));
        }
        Ok(Self { n_zones, start_hour, volume, slr })
    }

    /// Ground truth of an injected panel, viewed as a perfect forecast.
    pub fn from_panel(panel: &ZoneHourPanel) -> Result<Self> {
        let slr = panel.slr().ok_or_else(|| Error::invalid("panel", "panel is not injected"))?;
        Self::new(panel.n_zones(), 0, panel.demand().to_vec(), slr.to_vec())
    }

    pub fn n_hours(&self) -> usize {
        self.volume.len() / self.n_zones
    }

    pub fn hours(&self) -> Range<usize> {
        self.start_hour..self.start_hour + self.n_hours()
    }

    pub fn zone_series(&self, values: &[f64], z: usize) -> Vec<f64> {
        values.iter().skip(z).step_by(self.n_zones).copied().collect()
    }

    /// Series over hours `0..horizon`. Hours outside the covered range take
    /// the covered value a whole number of weeks away.
    pub fn tile_to(&self, horizon: usize) -> Result<Self> {
        let n = self.n_hours();
        if n < TILE_PERIOD_HOURS && !(self.start_hour == 0 && n >= horizon) {
            return Err(Error::invalid(
                "forecast",
                format!("need at least {TILE_PERIOD_HOURS} covered hours to tile, got {n}"),
            ));
        }
        let covered = self.hours();
        let mut volume = Vec::with_capacity(horizon * self.n_zones);
        let mut slr = Vec::with_capacity(horizon * self.n_zones);
        for t in 0..horizon {
            let src = if covered.contains(&t) {
                t
            } else {
                let off = (t as i64 - self.start_hour as i64).rem_euclid(TILE_PERIOD_HOURS as i64) as usize;
                self.start_hour + off
            };
            let row = (src - self.start_hour) * self.n_zones;
            volume.extend_from_slice(&self.volume[row..row + self.n_zones]);
            slr.extend_from_slice(&self.slr[row..row + self.n_zones]);
        }
        Self::new(self.n_zones, 0, volume, slr)
    }

    pub fn write_csv(&self, path: &Path, zone_ids: &[String]) -> Result<()> {
        if zone_ids.len() != self.n_zones {
            return Err(Error::invalid("zone_ids", "length does not match forecast zones"));
        }
        let mut text = FORECAST_COLUMNS.join(",");
        text.push('\n');
        for (k, (v, s)) in self.volume.iter().zip(&self.slr).enumerate() {
            let t = self.start_hour + k / self.n_zones;
            let _ = writeln!(text, "{t},{},{v},{s}", zone_ids[k % self.n_zones]);
        }
        write_atomic(path, text.as_bytes())
    }

    /// Reads a forecast written by [`ForecastSeries::write_csv`]; zone order
    /// follows `zone_ids`.
    pub fn load_csv(path: &Path, zone_ids: &[String]) -> Result<Self> {
        let mut rdr = open_csv(path)?;
        check_header(path, &mut rdr, &FORECAST_COLUMNS)?;
        let nz = zone_ids.len();
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse { path: path.to_path_buf(), line: line as u64 + 2, message: e.to_string() })?;
            let hour: usize = parse_field(path, &rec, 0, "hour")?;
            let zone = rec.get(1).unwrap_or("");
            let z = zone_ids.iter().position(|id| id == zone).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: line as u64 + 2,
                message: format!("unknown zone {zone:?}"),
            })?;
            let v: f64 = parse_field(path, &rec, 2, "vol_hat")?;
            let s: f64 = parse_field(path, &rec, 3, "slr_hat")?;
            rows.push((hour, z, v, s));
        }
        let start = rows.iter().map(|r| r.0).min().ok_or_else(|| Error::Empty(path.display().to_string()))?;
        let end = rows.iter().map(|r| r.0).max().unwrap_or(start) + 1;
        let n = (end - start) * nz;
        let mut volume = vec![f64::NAN; n];
        let mut slr = vec![f64::NAN; n];
        for (h, z, v, s) in rows {
            let i = (h - start) * nz + z;
            if !volume[i].is_nan() {
                return Err(Error::Schema { path: path.to_path_buf(), message: format!("duplicate row for hour {h}") });
            }
            volume[i] = v;
            slr[i] = s;
        }
        if volume.iter().any(|v| v.is_nan()) {
            return Err(Error::Schema { path: path.to_path_buf(), message: "missing zone-hours".into() });
        }
        Self::new(nz, start, volume, slr)
    }
}

/// Previous-day same-hour volume (previous hour when `t < 24`), with SLR
/// recomputed from the forecast pressure through `injector`.
pub fn persistence_baseline(panel: &ZoneHourPanel, t: usize, injector: &Injector) -> Result<(Vec<f64>, Vec<f64>)> {
    if t < 1 || t >= panel.n_hours() {
        return Err(Error::invalid("t", format!("persistence needs 1 <= t < {}, got {t}", panel.n_hours())));
    }
    let src = if t >= 24 { t - 24 } else { t - 1 };
    let mut vol = Vec::with_capacity(panel.n_zones());
    let mut slr = Vec::with_capacity(panel.n_zones());
    for z in 0..panel.n_zones() {
        let v = panel.demand()[panel.idx(src, z)];
        let s_raw = v / panel.capacity()[z];
        let (_, l) = injector.point(s_raw, panel.temp_c()[panel.idx(t, z)]);
        vol.push(v);
        slr.push(l);
    }
    Ok((vol, slr))
}

/// Persistence forecast for every hour in `hours`.
pub fn persistence_series(panel: &ZoneHourPanel, hours: Range<usize>, injector: &Injector) -> Result<ForecastSeries> {
    let start = hours.start;
    let mut volume = Vec::new();
    let mut slr = Vec::new();
    for t in hours {
        let (v, s) = persistence_baseline(panel, t, injector)?;
        volume.extend(v);
        slr.extend(s);
    }
    ForecastSeries::new(panel.n_zones(), start, volume, slr)
}

/// Trained-model forecast for target hours `lookback + 1..T`.
pub fn model_series(model: &TrainedModel, panel: &ZoneHourPanel, graph: &ZoneGraph) -> Result<ForecastSeries> {
    let ends = model.lookback..panel.n_hours() - 1;
    let (slr, logv) = model.predict(panel, graph, ends)?;
    let volume = logv.iter().map(|v| v.exp_m1().max(0.0)).collect();
    ForecastSeries::new(panel.n_zones(), model.lookback + 1, volume, slr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScores {
    pub scores: Vec<f64>,
    pub slr_p95: Vec<f64>,
    pub lost_p95: Vec<f64>,
    /// True when every predicted loss is zero and only the SLR term is used.
    pub fallback: bool,
}

impl RiskScores {
    /// Zone indices sorted by descending score; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|a, b| self.scores[*b].total_cmp(&self.scores[*a]).then(a.cmp(b)));
        idx
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut r = self.ranking();
        r.truncate(k);
        r
    }
}

pub fn risk_scores(series: &ForecastSeries) -> RiskScores {
    let nz = series.n_zones;
    let lost: Vec<f64> = series.volume.iter().zip(&series.slr).map(|(v, s)| v * s).collect();
    let slr_p95: Vec<f64> = (0..nz).map(|z| stats::quantile(&series.zone_series(&series.slr, z), 0.95)).collect();
    let lost_p95: Vec<f64> = (0..nz).map(|z| stats::quantile(&series.zone_series(&lost, z), 0.95)).collect();
    let med = stats::median(&lost_p95);
    let fallback = med <= 0.0;
    let scores = slr_p95
        .iter()
        .zip(&lost_p95)
        .map(|(s, l)| if fallback { 0.6 * s } else { 0.6 * s + 0.4 * l / med })
        .collect();
    RiskScores { scores, slr_p95, lost_p95, fallback }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every truth value is zero.
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    /// Percent over points above the per-zone 75th percentile of truth.
    pub peak_mape: Option<f64>,
}

/// Hour-major `pred` and `truth` with `n_zones` columns.
pub fn eval_accuracy(pred: &[f64], truth: &[f64], n_zones: usize) -> Result<Accuracy> {
    if pred.is_empty() || n_zones == 0 {
        return Err(Error::Empty("accuracy series".into()));
    }
    if pred.len() != truth.len() || !pred.len().is_multiple_of(n_zones) {
        return Err(Error::invalid("pred", "prediction and truth must align"));
    }
    let n = pred.len() as f64;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;

    let mut ape = Vec::new();
    let mut skipped = 0;
    for (p, t) in pred.iter().zip(truth) {
        if *t == 0.0 {
            skipped += 1;
        } else {
            ape.push(((p - t) / t).abs());
        }
    }
    let mape = (!ape.is_empty()).then(|| 100.0 * stats::mean(&ape));

    let thresholds: Vec<f64> = (0..n_zones)
        .map(|z| {
            let col: Vec<f64> = truth.iter().skip(z).step_by(n_zones).copied().collect();
            stats::quantile(&col, 0.75)
        })
        .collect();
    let peak: Vec<f64> = pred
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(k, (_, t))| **t > thresholds[k % n_zones] && **t != 0.0)
        .map(|(_, (p, t))| ((p - t) / t).abs())
        .collect();
    let peak_mape = (!peak.is_empty()).then(|| 100.0 * stats::mean(&peak));

    Ok(Accuracy { rmse, mae, mape, mape_skipped: skipped, peak_mape })
}

/// Something that maps a (stressed, uninjected) panel to per-zone mean SLR.
pub trait SlrPredictor {
    fn zone_mean_slr(&self, panel: &ZoneHourPanel) -> Result<Vec<f64>>;
}

impl SlrPredictor for Injector {
    fn zone_mean_slr(&self, panel: &ZoneHourPanel) -> Result<Vec<f64>> {
        let injected = self.inject(panel)?;
        let slr = injected.slr().expect("injected");
        Ok((0..panel.n_zones()).map(|z| stats::mean(&panel.zone_series(slr, z))).collect())
    }
}

/// A trained model evaluated end to end: the stressed panel is re-injected
/// and re-featurized with the frozen training statistics.
pub struct ModelPredictor<'a> {
    pub model: &'a TrainedModel,
    pub graph: &'a ZoneGraph,
    pub injector: &'a Injector,
    /// Window end hours to average over.
    pub ends: Range<usize>,
}

impl SlrPredictor for ModelPredictor<'_> {
    fn zone_mean_slr(&self, panel: &ZoneHourPanel) -> Result<Vec<f64>> {
        let injected = self.injector.inject(panel)?;
        let (slr, _) = self.model.predict(&injected, self.graph, self.ends.clone())?;
        let nz = panel.n_zones();
        Ok((0..nz)
            .map(|z| stats::mean(&slr.iter().skip(z).step_by(nz).copied().collect::<Vec<_>>()))
            .collect())
    }
}

pub const DEFAULT_STRESS_MULTIPLIERS: [f64; 4] = [1.0, 1.2, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressResponse {
    pub multipliers: Vec<f64>,
    pub mean_slr: Vec<f64>,
    pub spearman_rho: f64,
    pub monotone: bool,
    /// `(last / first − 1)·100`; `None` when the first mean is zero.
    pub tail_amplification_pct: Option<f64>,
    /// Share of zones whose mean SLR at the last multiplier exceeds the first.
    pub pct_zones_worse: f64,
}

pub fn stress_response<P: SlrPredictor + ?Sized>(
    predictor: &P,
    panel: &ZoneHourPanel,
    multipliers: &[f64],
) -> Result<StressResponse> {
    if multipliers.len() < 2 {
        return Err(Error::invalid("multipliers", "need at least two stress levels"));
    }
    let per_zone = multipliers
        .iter()
        .map(|m| predictor.zone_mean_slr(&panel.with_demand_scaled(*m)))
        .collect::<Result<Vec<_>>>()?;
    let mean_slr: Vec<f64> = per_zone.iter().map(|z| stats::mean(z)).collect();
    Ok(summarize_stress(multipliers, &mean_slr, &per_zone[0], &per_zone[per_zone.len() - 1]))
}

/// Summary statistics from already computed means.
pub fn summarize_stress(multipliers: &[f64], mean_slr: &[f64], first: &[f64], last: &[f64]) -> StressResponse {
    let monotone = mean_slr.windows(2).all(|w| w[1] > w[0]);
    let (a, b) = (mean_slr[0], mean_slr[mean_slr.len() - 1]);
    let tail_amplification_pct = (a != 0.0).then(|| 100.0 * (b / a - 1.0));
    let worse = first.iter().zip(last).filter(|(f, l)| l > f).count();
    StressResponse {
        multipliers: multipliers.to_vec(),
        mean_slr: mean_slr.to_vec(),
        spearman_rho: stats::spearman(multipliers, mean_slr),
        monotone,
        tail_amplification_pct,
        pct_zones_worse: 100.0 * worse as f64 / first.len().max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(nz: usize, vol: Vec<f64>, slr: Vec<f64>) -> ForecastSeries {
        ForecastSeries::new(nz, 0, vol, slr).unwrap()
    }

    #[test]
    fn identical_zones_score_point_six_slr_plus_point_four() {
        let s = series(2, vec![10.0, 10.0, 20.0, 20.0], vec![0.2, 0.2, 0.4, 0.4]);
        let r = risk_scores(&s);
        let expect = 0.6 * stats::quantile(&[0.2, 0.4], 0.95) + 0.4;
        assert!((r.scores[0] - expect).abs() < 1e-12);
        assert_eq!(r.scores[0], r.scores[1]);
    }

    #[test]
    fn zero_loss_falls_back_to_slr_term() {
        let s = series(2, vec![0.0; 4], vec![0.1, 0.3, 0.1, 0.3]);
        let r = risk_scores(&s);
        assert!(r.fallback);
        assert!((r.scores[1] - 0.6 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn doubled_loss_zone_adds_point_four() {
        // three zones, constant series; zone 2 has twice the loss
        let s = series(3, vec![10.0, 10.0, 20.0], vec![0.5, 0.5, 0.5]);
        let r = risk_scores(&s);
        assert!((r.scores[2] - r.scores[0] - 0.4).abs() < 1e-12);
        assert_eq!(r.ranking()[0], 2);
    }

    #[test]
    fn mape_skips_zero_truth() {
        let a = eval_accuracy(&[1.0, 11.0], &[0.0, 10.0], 1).unwrap();
        assert!((a.mape.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(a.mape_skipped, 1);
        let p = eval_accuracy(&[3.0, 4.0], &[3.0, 4.0], 2).unwrap();
        assert_eq!((p.rmse, p.mae, p.mape), (0.0, 0.0, Some(0.0)));
        assert!(eval_accuracy(&[], &[], 1).is_err());
    }

    #[test]
    fn stress_summary_ranks() {
        let up = summarize_stress(&[1.0, 1.2, 1.5, 2.0], &[1.0, 2.0, 3.0, 4.0], &[1.0], &[4.0]);
        assert_eq!(up.spearman_rho, 1.0);
        assert!(up.monotone);
        assert!((up.tail_amplification_pct.unwrap() - 300.0).abs() < 1e-12);
        let down = summarize_stress(&[1.0, 1.2, 1.5, 2.0], &[4.0, 3.0, 2.0, 1.0], &[4.0], &[1.0]);
        assert_eq!(down.spearman_rho, -1.0);
        assert!(!down.monotone);
        assert_eq!(down.pct_zones_worse, 0.0);
    }

    #[test]
    fn tiling_repeats_weeks() {
        let nz = 1;
        let vol: Vec<f64> = (0..200).map(|t| t as f64).collect();
        let s = ForecastSeries::new(nz, 10, vol, vec![0.0; 200]).unwrap();
        let tiled = s.tile_to(400).unwrap();
        assert_eq!(tiled.n_hours(), 400);
        // hour 5 is before coverage: 5 + 168 = 173 -> index 163
        assert_eq!(tiled.volume[5], 163.0);
        assert_eq!(tiled.volume[100], 90.0);
        // hour 250 is past the end (209): 250 - 168 = 82 -> index 72
        assert_eq!(tiled.volume[250], 72.0);
    }
}
