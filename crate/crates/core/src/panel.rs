//! Shared data model: micro telemetry records, the zone-hour panel and the
//! chronological split, plus their CSV formats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{check_header, open_csv, parse_field, write_atomic};

/// Hours per panel step. Pressures and backlog flows are per-hour quantities.
pub const DELTA_T_HOURS: f64 = 1.0;

pub const TELEMETRY_COLUMNS: [&str; 6] =
    ["timestamp", "station_id", "p_req_kw", "p_set_kw", "p_real_kw", "temp_c"];
pub const PANEL_COLUMNS: [&str; 4] = ["zone", "hour", "demand_kwh", "temp_c"];
pub const INJECTED_COLUMNS: [&str; 2] = ["s_mapped", "slr"];
pub const ZONE_META_COLUMNS: [&str; 4] = ["zone", "capacity_kwh_per_h", "x_km", "y_km"];

/// Realized power may exceed the setpoint by this much before a record is
/// considered inconsistent.
pub const DEFAULT_SETPOINT_TOLERANCE_KW: f64 = 1.0;

/// One minute of charging telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    /// Minutes since epoch.
    pub timestamp: i64,
    pub station_id: String,
    pub p_req_kw: f64,
    pub p_set_kw: f64,
    pub p_real_kw: f64,
    pub temp_c: f64,
}

impl TelemetryRecord {
    pub fn validate(&self, setpoint_tolerance_kw: f64) -> std::result::Result<(), String> {
        for (name, v) in [
            ("p_req_kw", self.p_req_kw),
            ("p_set_kw", self.p_set_kw),
            ("p_real_kw", self.p_real_kw),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("column `{name}`: power must be finite and >= 0, got {v}"));
            }
        }
        if !self.temp_c.is_finite() {
            return Err("column `temp_c`: not finite".into());
        }
        if self.p_real_kw > self.p_set_kw + setpoint_tolerance_kw {
            return Err(format!(
                "column `p_real_kw`: realized {} exceeds setpoint {} by more than {} kW",
                self.p_real_kw, self.p_set_kw, setpoint_tolerance_kw
            ));
        }
        Ok(())
    }
}

/// Rated physical capacity used to turn requested power into pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub p_cap_kw: f64,
}

impl StationConfig {
    pub const PER_PLUG_KW: f64 = 86.25;
    pub const STATION_KW: f64 = 172.5;

    pub fn new(p_cap_kw: f64) -> Result<Self> {
        if !(p_cap_kw > 0.0) {
            return Err(Error::invalid("p_cap_kw", format!("must be > 0, got {p_cap_kw}")));
        }
        Ok(Self { p_cap_kw })
    }

    pub fn per_plug() -> Self {
        Self { p_cap_kw: Self::PER_PLUG_KW }
    }

    pub fn station_level() -> Self {
        Self { p_cap_kw: Self::STATION_KW }
    }
}

impl Default for StationConfig {
    fn default() -> Self {
        Self::per_plug()
    }
}

pub fn load_telemetry_csv(path: &Path) -> Result<Vec<TelemetryRecord>> {
    load_telemetry_csv_with_tolerance(path, DEFAULT_SETPOINT_TOLERANCE_KW)
}

pub fn load_telemetry_csv_with_tolerance(
    path: &Path,
    setpoint_tolerance_kw: f64,
) -> Result<Vec<TelemetryRecord>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &TELEMETRY_COLUMNS)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = TelemetryRecord {
            timestamp: parse_field(path, &row, 0, "timestamp")?,
            station_id: parse_field(path, &row, 1, "station_id")?,
            p_req_kw: parse_field(path, &row, 2, "p_req_kw")?,
            p_set_kw: parse_field(path, &row, 3, "p_set_kw")?,
            p_real_kw: parse_field(path, &row, 4, "p_real_kw")?,
            temp_c: parse_field(path, &row, 5, "temp_c")?,
        };
        rec.validate(setpoint_tolerance_kw).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_telemetry_csv(path: &Path, records: &[TelemetryRecord]) -> Result<()> {
    let mut text = TELEMETRY_COLUMNS.join(",");
    text.push('\n');
    for r in records {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            r.timestamp, r.station_id, r.p_req_kw, r.p_set_kw, r.p_real_kw, r.temp_c
        );
    }
    write_atomic(path, text.as_bytes())
}

/// City-scale zone-hour panel. Arrays are hour-major: index `t * n_zones + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneHourPanel {
    n_zones: usize,
    n_hours: usize,
    zone_ids: Vec<String>,
    demand: Vec<f64>,
    temp_c: Vec<f64>,
    capacity: Vec<f64>,
    coords: Vec<(f64, f64)>,
    s_raw: Vec<f64>,
    s_mapped: Option<Vec<f64>>,
    slr: Option<Vec<f64>>,
}

/// Static per-zone attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMeta {
    pub zone_id: String,
    pub capacity_kwh_per_h: f64,
    pub x_km: f64,
    pub y_km: f64,
}

fn pressure(demand: f64, capacity: f64) -> f64 {
    demand / (capacity * DELTA_T_HOURS)
}

impl ZoneHourPanel {
    pub fn new(zones: Vec<ZoneMeta>, n_hours: usize, demand: Vec<f64>, temp_c: Vec<f64>) -> Result<Self> {
        let n_zones = zones.len();
        if n_zones == 0 {
            return Err(Error::invalid("n_zones", "panel needs at least one zone"));
        }
        if n_hours == 0 {
            return Err(Error::invalid("n_hours", "panel needs at least one hour"));
        }
        let cells = n_zones * n_hours;
        if demand.len() != cells || temp_c.len() != cells {
            return Err(Error::invalid(
                "panel",
                format!("expected {cells} zone-hours, got demand {} / temp {}", demand.len(), temp_c.len()),
            ));
        }
        for z in &zones {
            if !(z.capacity_kwh_per_h > 0.0) || !z.capacity_kwh_per_h.is_finite() {
                return Err(Error::invalid(
                    "capacity_kwh_per_h",
                    format!("zone {} has capacity {}", z.zone_id, z.capacity_kwh_per_h),
                ));
            }
        }
        if let Some(i) = demand.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "demand_kwh",
                format!("hour {} zone {} has demand {}", i / n_zones, zones[i % n_zones].zone_id, demand[i]),
            ));
        }
        if temp_c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("temp_c".into()));
        }
        let capacity: Vec<f64> = zones.iter().map(|z| z.capacity_kwh_per_h).collect();
        let s_raw = demand
            .iter()
            .enumerate()
            .map(|(i, v)| pressure(*v, capacity[i % n_zones]))
            .collect();
        Ok(Self {
            n_zones,
            n_hours,
            zone_ids: zones.iter().map(|z| z.zone_id.clone()).collect(),
            coords: zones.iter().map(|z| (z.x_km, z.y_km)).collect(),
            capacity,
            demand,
            temp_c,
            s_raw,
            s_mapped: None,
            slr: None,
        })
    }

    pub fn n_zones(&self) -> usize {
        self.n_zones
    }

    pub fn n_hours(&self) -> usize {
        self.n_hours
    }

    #[inline]
    pub fn idx(&self, t: usize, z: usize) -> usize {
        t * self.n_zones + z
    }

    pub fn zone_ids(&self) -> &[String] {
        &self.zone_ids
    }

    pub fn zones(&self) -> Vec<ZoneMeta> {
        (0..self.n_zones)
            .map(|z| ZoneMeta {
                zone_id: self.zone_ids[z].clone(),
                capacity_kwh_per_h: self.capacity[z],
                x_km: self.coords[z].0,
                y_km: self.coords[z].1,
            })
            .collect()
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn temp_c(&self) -> &[f64] {
        &self.temp_c
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn s_raw(&self) -> &[f64] {
        &self.s_raw
    }

    pub fn s_mapped(&self) -> Option<&[f64]> {
        self.s_mapped.as_deref()
    }

    pub fn slr(&self) -> Option<&[f64]> {
        self.slr.as_deref()
    }

    pub fn is_injected(&self) -> bool {
        self.s_mapped.is_some() && self.slr.is_some()
    }

    /// Attach aligned pressures and service-loss rates.
    pub fn with_injection(mut self, s_mapped: Vec<f64>, slr: Vec<f64>) -> Result<Self> {
        let cells = self.n_zones * self.n_hours;
        if s_mapped.len() != cells || slr.len() != cells {
            return Err(Error::invalid("injection", "s_mapped/slr length does not match the panel"));
        }
        if let Some(v) = slr.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::invalid("slr", format!("{v} outside [0, 1]")));
        }
        if s_mapped.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("s_mapped", "must be finite and >= 0"));
        }
        self.s_mapped = Some(s_mapped);
        self.slr = Some(slr);
        Ok(self)
    }

    /// Copy with all demand multiplied by `factor` and pressures recomputed.
    /// Injected fields are dropped since they no longer match the demand.
    pub fn with_demand_scaled(&self, factor: f64) -> Self {
        let demand: Vec<f64> = self.demand.iter().map(|v| v * factor).collect();
        let s_raw = demand
            .iter()
            .enumerate()
            .map(|(i, v)| pressure(*v, self.capacity[i % self.n_zones]))
            .collect();
        Self {
            demand,
            s_raw,
            s_mapped: None,
            slr: None,
            ..self.clone()
        }
    }

    /// `s_raw` recomputed from demand and capacity, for audits.
    pub fn recompute_s_raw(&self) -> Vec<f64> {
        self.demand
            .iter()
            .enumerate()
            .map(|(i, v)| pressure(*v, self.capacity[i % self.n_zones]))
            .collect()
    }

    /// Series of `values` for one zone over all hours.
    pub fn zone_series(&self, values: &[f64], z: usize) -> Vec<f64> {
        (0..self.n_hours).map(|t| values[self.idx(t, z)]).collect()
    }
}

/// Chronological train / validation / test boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train_end: usize,
    pub valid_end: usize,
    pub n_hours: usize,
}

impl SplitIndex {
    pub fn new(train_end: usize, valid_end: usize, n_hours: usize) -> Result<Self> {
        if !(0 < train_end && train_end < valid_end && valid_end < n_hours) {
            return Err(Error::invalid(
                "split",
                format!("need 0 < {train_end} < {valid_end} < {n_hours}"),
            ));
        }
        Ok(Self { train_end, valid_end, n_hours })
    }

    /// 70 / 15 / 15 chronological split.
    pub fn chronological(n_hours: usize) -> Result<Self> {
        let train_end = (n_hours as f64 * 0.70).round() as usize;
        let valid_end = (n_hours as f64 * 0.85).round() as usize;
        Self::new(train_end, valid_end, n_hours)
    }

    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn valid(&self) -> std::ops::Range<usize> {
        self.train_end..self.valid_end
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.valid_end..self.n_hours
    }
}

pub fn load_zone_meta_csv(path: &Path) -> Result<Vec<ZoneMeta>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &ZONE_META_COLUMNS)?;
    let mut zones: Vec<ZoneMeta> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let meta = ZoneMeta {
            zone_id: parse_field(path, &row, 0, "zone")?,
            capacity_kwh_per_h: parse_field(path, &row, 1, "capacity_kwh_per_h")?,
            x_km: parse_field(path, &row, 2, "x_km")?,
            y_km: parse_field(path, &row, 3, "y_km")?,
        };
        if !(meta.capacity_kwh_per_h > 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("zone {}: capacity must be > 0", meta.zone_id),
            });
        }
        if zones.iter().any(|z| z.zone_id == meta.zone_id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate zone {}", meta.zone_id),
            });
        }
        zones.push(meta);
    }
    if zones.is_empty() {
        return Err(Error::Empty(format!("{}: no zones", path.display())));
    }
    Ok(zones)
}

/// Load a long-format panel plus its zone metadata.
///
/// Missing zone-hours get zero demand (their temperature is the mean of the
/// zones observed in that hour) and the fill count is logged. Optional
/// trailing `s_mapped,slr` columns are read back as injected fields.
pub fn load_panel_csv(path: &Path, meta_path: &Path) -> Result<ZoneHourPanel> {
    let zones = load_zone_meta_csv(meta_path)?;
    let zone_index: HashMap<&str, usize> =
        zones.iter().enumerate().map(|(i, z)| (z.zone_id.as_str(), i)).collect();

    let mut reader = open_csv(path)?;
    let header = check_header(path, &mut reader, &PANEL_COLUMNS)?;
    let injected = header.len() >= 6 && header.get(4) == Some("s_mapped") && header.get(5) == Some("slr");

    struct Row {
        t: usize,
        z: usize,
        demand: f64,
        temp: f64,
        extra: Option<(f64, f64)>,
    }
    let mut rows = Vec::new();
    let mut seen: HashMap<(usize, usize), u64> = HashMap::new();
    let mut n_hours = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let zone: String = parse_field(path, &row, 0, "zone")?;
        let t: usize = parse_field(path, &row, 1, "hour")?;
        let z = *zone_index.get(zone.as_str()).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("zone {zone} is not in the metadata file {}", meta_path.display()),
        })?;
        if let Some(prev) = seen.insert((z, t), line) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate key (zone={zone}, hour={t}); first seen on line {prev}"),
            });
        }
        let demand: f64 = parse_field(path, &row, 2, "demand_kwh")?;
        if !(demand >= 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column `demand_kwh`: must be >= 0, got {demand}"),
            });
        }
        let temp: f64 = parse_field(path, &row, 3, "temp_c")?;
        let extra = if injected {
            Some((parse_field(path, &row, 4, "s_mapped")?, parse_field(path, &row, 5, "slr")?))
        } else {
            None
        };
        n_hours = n_hours.max(t + 1);
        rows.push(Row { t, z, demand, temp, extra });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{}: no panel rows", path.display())));
    }

    let n_zones = zones.len();
    let cells = n_zones * n_hours;
    let mut demand = vec![0.0; cells];
    let mut temp = vec![f64::NAN; cells];
    let mut s_mapped = vec![0.0; cells];
    let mut slr = vec![0.0; cells];
    let mut present = vec![false; cells];
    for r in &rows {
        let i = r.t * n_zones + r.z;
        demand[i] = r.demand;
        temp[i] = r.temp;
        present[i] = true;
        if let Some((s, l)) = r.extra {
            s_mapped[i] = s;
            slr[i] = l;
        }
    }
    let missing = present.iter().filter(|p| !**p).count();
    if missing > 0 {
        warn!("{}: {missing} missing zone-hours zero-filled", path.display());
        let overall = crate::stats::mean(&rows.iter().map(|r| r.temp).collect::<Vec<_>>());
        for t in 0..n_hours {
            let obs: Vec<f64> = (0..n_zones)
                .filter(|z| present[t * n_zones + z])
                .map(|z| temp[t * n_zones + z])
                .collect();
            let fill = if obs.is_empty() { overall } else { crate::stats::mean(&obs) };
            for z in 0..n_zones {
                if !present[t * n_zones + z] {
                    temp[t * n_zones + z] = fill;
                }
            }
        }
    }
    let panel = ZoneHourPanel::new(zones, n_hours, demand, temp)?;
    if injected {
        if missing > 0 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: "injected panel must be complete".into(),
            });
        }
        panel.with_injection(s_mapped, slr)
    } else {
        Ok(panel)
    }
}

pub fn write_zone_meta_csv(path: &Path, panel: &ZoneHourPanel) -> Result<()> {
    let mut text = ZONE_META_COLUMNS.join(",");
    text.push('\n');
    for z in panel.zones() {
        let _ = writeln!(text, "{},{},{},{}", z.zone_id, z.capacity_kwh_per_h, z.x_km, z.y_km);
    }
    write_atomic(path, text.as_bytes())
}

/// Long-format panel CSV; injected panels get the extra `s_mapped,slr` columns.
pub fn write_panel_csv(path: &Path, panel: &ZoneHourPanel) -> Result<()> {
    let mut text = PANEL_COLUMNS.join(",");
    let injected = panel.s_mapped.as_ref().zip(panel.slr.as_ref());
    if injected.is_some() {
        text.push(',');
        text.push_str(&INJECTED_COLUMNS.join(","));
    }
    text.push('\n');
    for t in 0..panel.n_hours {
        for z in 0..panel.n_zones {
            let i = panel.idx(t, z);
            let _ = write!(text, "{},{},{},{}", panel.zone_ids[z], t, panel.demand[i], panel.temp_c[i]);
            if let Some((s, l)) = injected {
                let _ = write!(text, ",{},{}", s[i], l[i]);
            }
            text.push('\n');
        }
    }
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zone(id: &str, cap: f64) -> ZoneMeta {
        ZoneMeta { zone_id: id.into(), capacity_kwh_per_h: cap, x_km: 0.0, y_km: 0.0 }
    }

    #[test]
    fn s_raw_is_demand_over_capacity() {
        let p = ZoneHourPanel::new(vec![zone("a", 100.0)], 1, vec![50.0], vec![10.0]).unwrap();
        assert_eq!(p.s_raw(), &[0.5]);
    }

    #[test]
    fn rejects_nonpositive_capacity() {
        assert!(ZoneHourPanel::new(vec![zone("a", 0.0)], 1, vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn chronological_split_covers_range() {
        let s = SplitIndex::chronological(720).unwrap();
        assert_eq!((s.train_end, s.valid_end), (504, 612));
        assert_eq!(s.train().end, s.valid().start);
        assert_eq!(s.valid().end, s.test().start);
        assert_eq!(s.test().end, 720);
        assert!(SplitIndex::new(5, 5, 10).is_err());
        assert!(SplitIndex::new(0, 5, 10).is_err());
    }

    #[test]
    fn scaling_recomputes_pressure_and_drops_injection() {
        let p = ZoneHourPanel::new(vec![zone("a", 100.0)], 2, vec![50.0, 20.0], vec![1.0, 1.0])
            .unwrap()
            .with_injection(vec![0.5, 0.2], vec![0.0, 0.0])
            .unwrap();
        let q = p.with_demand_scaled(2.0);
        assert_eq!(q.s_raw(), &[1.0, 0.4]);
        assert!(!q.is_injected());
    }

    #[test]
    fn setpoint_tolerance_enforced() {
        let mut r = TelemetryRecord {
            timestamp: 0,
            station_id: "s".into(),
            p_req_kw: 50.0,
            p_set_kw: 40.0,
            p_real_kw: 40.5,
            temp_c: 10.0,
        };
        assert!(r.validate(1.0).is_ok());
        r.p_real_kw = 41.5;
        assert!(r.validate(1.0).is_err());
    }
}
