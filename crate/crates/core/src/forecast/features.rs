use std::f64::consts::PI;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{SplitIndex, ZoneHourPanel};

pub const N_FEATURES: usize = 8;
pub const DEFAULT_LOOKBACK: usize = 24;

/// Feature order within a zone-hour vector.
pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["log1p_demand", "temp_z", "s_mapped", "capacity_z", "h_sin", "h_cos", "d_sin", "d_cos"];

/// Training-split standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub temp_mean: f64,
    pub temp_std: f64,
    pub capacity_mean: f64,
    pub capacity_std: f64,
}

impl NormStats {
    pub fn from_training(panel: &ZoneHourPanel, split: &SplitIndex) -> Self {
        let temps = &panel.temp_c()[..split.train_end * panel.n_zones()];
        let nonzero = |s: f64| if s > 0.0 { s } else { 1.0 };
        Self {
            temp_mean: crate::stats::mean(temps),
            temp_std: nonzero(crate::stats::std_dev(temps)),
            capacity_mean: crate::stats::mean(panel.capacity()),
            capacity_std: nonzero(crate::stats::std_dev(panel.capacity())),
        }
    }
}

/// `(sin, cos)` of hour-of-day and day-of-week for an absolute hour index.
pub fn cyclic_encoding(hour: usize) -> [f64; 4] {
    let h = 2.0 * PI * (hour % 24) as f64 / 24.0;
    let d = 2.0 * PI * ((hour / 24) % 7) as f64 / 7.0;
    [h.sin(), h.cos(), d.sin(), d.cos()]
}

/// Inputs for hours `[t - lookback + 1, t]`, shaped `(lookback, zones, 8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub end_hour: usize,
    pub data: Array3<f64>,
}

impl FeatureWindow {
    pub fn lookback(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_zones(&self) -> usize {
        self.data.shape()[1]
    }
}

pub fn featurize(panel: &ZoneHourPanel, t: usize, stats: &NormStats, lookback: usize) -> Result<FeatureWindow> {
    if lookback == 0 || t < lookback {
        return Err(Error::invalid("t", format!("hour {t} has less than {lookback} hours of history")));
    }
    if t >= panel.n_hours() {
        return Err(Error::invalid("t", format!("hour {t} beyond panel end {}", panel.n_hours())));
    }
    let s_mapped = panel
        .s_mapped()
        .ok_or_else(|| Error::invalid("panel", "featurize needs an injected panel"))?;
    let nz = panel.n_zones();
    let start = t + 1 - lookback;
    let mut data = Array3::zeros((lookback, nz, N_FEATURES));
    for tau in 0..lookback {
        let hour = start + tau;
        let cyc = cyclic_encoding(hour);
        for z in 0..nz {
            let i = panel.idx(hour, z);
            let row = [
                panel.demand()[i].ln_1p(),
                (panel.temp_c()[i] - stats.temp_mean) / stats.temp_std,
                s_mapped[i],
                (panel.capacity()[z] - stats.capacity_mean) / stats.capacity_std,
                cyc[0],
                cyc[1],
                cyc[2],
                cyc[3],
            ];
            for (f, v) in row.into_iter().enumerate() {
                data[[tau, z, f]] = v;
            }
        }
    }
    Ok(FeatureWindow { end_hour: t, data })
}
