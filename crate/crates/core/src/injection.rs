//! Cross-domain pressure alignment and LUT injection.
//!
//! City pressures are carried into the telemetry pressure domain by matching
//! percentile ranks, then rescaled so that the capacity boundary `s = 1`
//! lands on itself. The aligned pressure indexes the deliverability LUT and
//! the complement of the looked-up value is the service-loss rate (SLR).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deliverability::{compute_pressure, DeliverabilityLut};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::panel::{SplitIndex, StationConfig, TelemetryRecord, ZoneHourPanel};

/// Largest aligned pressure the LUT covers.
pub const S_MAX_LUT: f64 = 3.0;

/// Empirical CDF with linear interpolation between order statistics.
///
/// Order statistic `i` sits at rank fraction `i / (n - 1)`; tied samples
/// share the midpoint of their ranks. Below the support the CDF is 0,
/// above it 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn fit(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("ECDF needs at least one sample".into()));
        }
        if let Some(v) = samples.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid("pressure sample", format!("{v} is not a finite value >= 0")));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let xs = &self.sorted;
        let n = xs.len();
        if n == 1 {
            return if x < xs[0] { 0.0 } else { 1.0 };
        }
        if x < xs[0] {
            return 0.0;
        }
        if x > xs[n - 1] {
            return 1.0;
        }
        let last = (n - 1) as f64;
        let lo = xs.partition_point(|v| *v < x);
        let hi = xs.partition_point(|v| *v <= x);
        if lo < hi {
            return (lo + hi - 1) as f64 / 2.0 / last;
        }
        let i = lo - 1;
        let frac = (x - xs[i]) / (xs[i + 1] - xs[i]);
        (i as f64 + frac) / last
    }

    /// Quantile function; errors for `q` outside [0, 1].
    pub fn inverse(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid("quantile", format!("{q} outside [0, 1]")));
        }
        Ok(crate::stats::quantile_sorted(&self.sorted, q))
    }
}

pub fn fit_ecdf(samples: &[f64]) -> Result<EmpiricalCdf> {
    EmpiricalCdf::fit(samples)
}

pub fn inverse_cdf(cdf: &EmpiricalCdf, q: f64) -> Result<f64> {
    cdf.inverse(q)
}

/// Anchored quantile map from city pressure to the telemetry domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureAligner {
    /// City-panel pressures (training split).
    pub target: EmpiricalCdf,
    /// Telemetry pressures.
    pub source: EmpiricalCdf,
    pub anchor: f64,
    pub s_max_lut: f64,
}

impl PressureAligner {
    pub fn new(target: EmpiricalCdf, source: EmpiricalCdf) -> Result<Self> {
        let anchor = source.inverse(target.cdf(1.0))?;
        if !(anchor > 0.0) {
            return Err(Error::invalid(
                "anchor",
                format!("source quantile at the capacity rank is {anchor}; the source distribution is degenerate"),
            ));
        }
        Ok(Self { target, source, anchor, s_max_lut: S_MAX_LUT })
    }

    /// Fit from panel pressures over the training hours and telemetry
    /// pressures under `station`.
    pub fn fit(
        panel: &ZoneHourPanel,
        split: &SplitIndex,
        telemetry: &[TelemetryRecord],
        station: &StationConfig,
    ) -> Result<Self> {
        let nz = panel.n_zones();
        let target = &panel.s_raw()[..split.train_end * nz];
        Self::new(EmpiricalCdf::fit(target)?, EmpiricalCdf::fit(&source_pressures(telemetry, station)?)?)
    }

    /// Pressure quantile map before anchoring.
    pub fn quantile_map(&self, s_raw: f64) -> f64 {
        let q = self.target.cdf(s_raw);
        crate::stats::quantile_sorted(self.source.samples(), q)
    }

    pub fn map(&self, s_raw: f64) -> f64 {
        (self.quantile_map(s_raw) / self.anchor).clamp(0.0, self.s_max_lut)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stored: PressureAligner = read_json(path)?;
        let rebuilt = Self::new(
            EmpiricalCdf::fit(stored.target.samples())?,
            EmpiricalCdf::fit(stored.source.samples())?,
        )?;
        if rebuilt.anchor != stored.anchor {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("stored anchor {} disagrees with samples ({})", stored.anchor, rebuilt.anchor),
            });
        }
        Ok(Self { s_max_lut: stored.s_max_lut, ..rebuilt })
    }
}

pub fn anchored_map(aligner: &PressureAligner, s_raw: f64) -> f64 {
    aligner.map(s_raw)
}

/// Telemetry pressures `p_req / p_cap`.
pub fn source_pressures(records: &[TelemetryRecord], station: &StationConfig) -> Result<Vec<f64>> {
    records.iter().map(|r| compute_pressure(r.p_req_kw, station.p_cap_kw)).collect()
}

/// Inverse-pressure SLR without alignment: `1 - min(1, 1/s)`, zero at `s = 0`.
pub fn baseline_a0(s_raw: f64) -> f64 {
    if s_raw <= 1.0 {
        0.0
    } else {
        1.0 - 1.0 / s_raw
    }
}

/// Fill `s_mapped` and `slr` for every zone-hour.
pub fn inject_panel(panel: &ZoneHourPanel, lut: &DeliverabilityLut, aligner: &PressureAligner) -> Result<ZoneHourPanel> {
    let s_mapped: Vec<f64> = panel.s_raw().iter().map(|s| aligner.map(*s)).collect();
    let slr = s_mapped
        .iter()
        .zip(panel.temp_c())
        .map(|(s, t)| 1.0 - lut.query(*t, *s))
        .collect();
    panel.clone().with_injection(s_mapped, slr)
}

/// A0 arm: the pressure feature stays raw and SLR follows the inverse rule.
pub fn inject_panel_a0(panel: &ZoneHourPanel) -> Result<ZoneHourPanel> {
    let s = panel.s_raw().to_vec();
    let slr = s.iter().map(|v| baseline_a0(*v)).collect();
    panel.clone().with_injection(s, slr)
}

/// Which ablation arm produces the SLR panel.
#[derive(Debug, Clone)]
pub enum Injector {
    /// Aligned pressure through the monotone LUT.
    A1 { lut: DeliverabilityLut, aligner: PressureAligner },
    /// Raw pressure through the inverse-pressure rule.
    A0,
}

impl Injector {
    pub fn inject(&self, panel: &ZoneHourPanel) -> Result<ZoneHourPanel> {
        match self {
            Injector::A1 { lut, aligner } => inject_panel(panel, lut, aligner),
            Injector::A0 => inject_panel_a0(panel),
        }
    }

    /// `(s_mapped, slr)` for one zone-hour.
    pub fn point(&self, s_raw: f64, temp_c: f64) -> (f64, f64) {
        match self {
            Injector::A1 { lut, aligner } => {
                let s = aligner.map(s_raw);
                (s, 1.0 - lut.query(temp_c, s))
            }
            Injector::A0 => (s_raw, baseline_a0(s_raw)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Injector::A1 { .. } => "a1",
            Injector::A0 => "a0",
        }
    }
}
