//! Micro-scale deliverability surface: bin telemetry by temperature and
//! pressure, average the served fraction per cell, then force each
//! temperature row to be non-increasing in pressure with a running minimum.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{check_header, open_csv, parse_field, read_json, write_atomic, write_json};
use crate::panel::{StationConfig, TelemetryRecord};

/// Cells with at least this many samples are reported as trusted.
pub const MIN_TRUSTED_SUPPORT: u64 = 30;

pub const LUT_COLUMNS: [&str; 4] = ["t_bin_low_c", "s_bin_low", "eta", "count"];

/// Temperature x pressure binning. Bins are left-closed, right-open except
/// the last, which is closed; values outside the edges clip to the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub temp_edges: Vec<f64>,
    pub pressure_edges: Vec<f64>,
}

impl BinGrid {
    pub fn new(temp_edges: Vec<f64>, pressure_edges: Vec<f64>) -> Result<Self> {
        for (name, edges) in [("temp_edges", &temp_edges), ("pressure_edges", &pressure_edges)] {
            if edges.len() < 2 {
                return Err(Error::invalid(name, "need at least two edges"));
            }
            if edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::invalid(name, "edges must be strictly increasing"));
            }
        }
        Ok(Self { temp_edges, pressure_edges })
    }

    /// 5 degC bins over [0, 35] and 0.1-wide pressure bins over [0, 3].
    pub fn standard() -> Self {
        Self {
            temp_edges: (0..=7).map(|k| 5.0 * k as f64).collect(),
            pressure_edges: (0..=30).map(|k| k as f64 / 10.0).collect(),
        }
    }

    pub fn n_temp(&self) -> usize {
        self.temp_edges.len() - 1
    }

    pub fn n_pressure(&self) -> usize {
        self.pressure_edges.len() - 1
    }

    pub fn temp_bin(&self, temp_c: f64) -> usize {
        clip_bin(&self.temp_edges, temp_c)
    }

    pub fn pressure_bin(&self, s: f64) -> usize {
        clip_bin(&self.pressure_edges, s)
    }

    pub fn temp_center(&self, k: usize) -> f64 {
        0.5 * (self.temp_edges[k] + self.temp_edges[k + 1])
    }

    pub fn pressure_center(&self, k: usize) -> f64 {
        0.5 * (self.pressure_edges[k] + self.pressure_edges[k + 1])
    }

    /// Largest pressure the grid represents.
    pub fn pressure_max(&self) -> f64 {
        self.pressure_edges[self.pressure_edges.len() - 1]
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::standard()
    }
}

fn clip_bin(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    if !(x >= edges[0]) {
        // also catches NaN
        return 0;
    }
    if x >= edges[n] {
        return n - 1;
    }
    edges.partition_point(|e| *e <= x) - 1
}

pub fn bin_observation(temp_c: f64, s: f64, grid: &BinGrid) -> (usize, usize) {
    (grid.temp_bin(temp_c), grid.pressure_bin(s))
}

pub fn compute_pressure(p_req_kw: f64, p_cap_kw: f64) -> Result<f64> {
    if !(p_cap_kw > 0.0) {
        return Err(Error::invalid("p_cap_kw", format!("must be > 0, got {p_cap_kw}")));
    }
    if !(p_req_kw >= 0.0) {
        return Err(Error::invalid("p_req_kw", format!("must be >= 0, got {p_req_kw}")));
    }
    Ok(p_req_kw / p_cap_kw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaKind {
    Setpoint,
    #[default]
    Realized,
}

/// Served fraction `p_num / p_req`, clipped to [0, 1]. `None` when the
/// request is zero and the ratio is undefined.
pub fn compute_eta(p_num_kw: f64, p_req_kw: f64) -> Option<f64> {
    if !(p_req_kw > 0.0) {
        return None;
    }
    Some((p_num_kw / p_req_kw).clamp(0.0, 1.0))
}

fn record_eta(r: &TelemetryRecord, kind: EtaKind) -> Option<f64> {
    match kind {
        EtaKind::Setpoint => compute_eta(r.p_set_kw, r.p_req_kw),
        EtaKind::Realized => compute_eta(r.p_real_kw, r.p_req_kw),
    }
}

// Cell sums are kept in fixed point so partial surfaces merge exactly and
// in any order.
const FIXED_SCALE: f64 = (1u64 << 52) as f64;

/// Per-cell (sum, count) accumulator for the raw surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceAccumulator {
    grid: BinGrid,
    sums: Vec<u128>,
    counts: Vec<u64>,
    skipped: u64,
}

impl SurfaceAccumulator {
    pub fn new(grid: BinGrid) -> Self {
        let cells = grid.n_temp() * grid.n_pressure();
        Self { grid, sums: vec![0; cells], counts: vec![0; cells], skipped: 0 }
    }

    pub fn add(&mut self, temp_c: f64, s: f64, eta: f64) {
        let (tb, sb) = bin_observation(temp_c, s, &self.grid);
        let i = tb * self.grid.n_pressure() + sb;
        self.sums[i] += (eta.clamp(0.0, 1.0) * FIXED_SCALE).round() as u128;
        self.counts[i] += 1;
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn merge(&mut self, other: &SurfaceAccumulator) {
        assert_eq!(self.grid, other.grid, "merging surfaces over different grids");
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.skipped += other.skipped;
    }

    pub fn finish(self) -> RawSurface {
        let eta_mean = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| (*c > 0).then(|| *s as f64 / FIXED_SCALE / *c as f64))
            .collect();
        RawSurface { grid: self.grid, eta_mean, count: self.counts, skipped: self.skipped }
    }
}

/// Cell means of the served fraction before any monotone correction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSurface {
    pub grid: BinGrid,
    /// Row-major `[t_bin][s_bin]`; `None` where no sample fell.
    pub eta_mean: Vec<Option<f64>>,
    pub count: Vec<u64>,
    pub skipped: u64,
}

impl RawSurface {
    /// Build directly from per-cell values (empty where `None`). Counts are 1
    /// for populated cells.
    pub fn from_cells(grid: BinGrid, eta_mean: Vec<Option<f64>>) -> Result<Self> {
        if eta_mean.len() != grid.n_temp() * grid.n_pressure() {
            return Err(Error::invalid("eta_mean", "cell count does not match the grid"));
        }
        let count = eta_mean.iter().map(|e| u64::from(e.is_some())).collect();
        Ok(Self { grid, eta_mean, count, skipped: 0 })
    }

    pub fn get(&self, t_bin: usize, s_bin: usize) -> Option<f64> {
        self.eta_mean[t_bin * self.grid.n_pressure() + s_bin]
    }

    pub fn records_used(&self) -> u64 {
        self.count.iter().sum()
    }
}

pub fn estimate_raw_surface(
    records: &[TelemetryRecord],
    cfg: &StationConfig,
    grid: &BinGrid,
    kind: EtaKind,
) -> Result<RawSurface> {
    if records.is_empty() {
        return Err(Error::Empty("no telemetry records".into()));
    }
    let mut acc = SurfaceAccumulator::new(grid.clone());
    for r in records {
        match record_eta(r, kind) {
            Some(eta) => acc.add(r.temp_c, compute_pressure(r.p_req_kw, cfg.p_cap_kw)?, eta),
            None => acc.skip(),
        }
    }
    let raw = acc.finish();
    if raw.records_used() == 0 {
        return Err(Error::Empty(format!(
            "all {} telemetry records have zero requested power",
            records.len()
        )));
    }
    Ok(raw)
}

/// Fill statistics from the envelope step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillStats {
    pub forward_filled: u64,
    pub leading_filled: u64,
    pub rows_from_column_mean: u64,
}

/// Monotone deliverability look-up table.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliverabilityLut {
    pub grid: BinGrid,
    /// Row-major `[t_bin][s_bin]`, every row non-increasing.
    pub eta: Vec<f64>,
    pub count: Vec<u64>,
    pub fill: FillStats,
}

/// Running minimum along a row.
pub fn cummin(row: &mut [f64]) {
    for k in 1..row.len() {
        if row[k] > row[k - 1] {
            row[k] = row[k - 1];
        }
    }
}

/// Fill empties in each row (forward fill; leading empties take the first
/// populated value), take the running minimum along pressure, then give
/// fully empty rows the column mean of the enveloped populated rows.
pub fn monotone_envelope(raw: &RawSurface) -> Result<DeliverabilityLut> {
    let nt = raw.grid.n_temp();
    let ns = raw.grid.n_pressure();
    let mut eta = vec![0.0; nt * ns];
    let mut fill = FillStats::default();
    let mut populated_rows = Vec::new();
    let mut empty_rows = Vec::new();

    for t in 0..nt {
        let cells = &raw.eta_mean[t * ns..(t + 1) * ns];
        let Some(first) = cells.iter().flatten().next().copied() else {
            empty_rows.push(t);
            continue;
        };
        let row = &mut eta[t * ns..(t + 1) * ns];
        let mut last: Option<f64> = None;
        for (k, cell) in cells.iter().enumerate() {
            row[k] = match (cell, last) {
                (Some(v), _) => {
                    last = Some(*v);
                    *v
                }
                (None, Some(prev)) => {
                    fill.forward_filled += 1;
                    prev
                }
                (None, None) => {
                    fill.leading_filled += 1;
                    first
                }
            };
        }
        cummin(row);
        populated_rows.push(t);
    }

    if populated_rows.is_empty() {
        return Err(Error::Empty("deliverability surface has no populated cells".into()));
    }
    if !empty_rows.is_empty() {
        let mut column_mean = vec![0.0; ns];
        for &t in &populated_rows {
            for k in 0..ns {
                column_mean[k] += eta[t * ns + k];
            }
        }
        for v in &mut column_mean {
            *v /= populated_rows.len() as f64;
        }
        cummin(&mut column_mean);
        for &t in &empty_rows {
            eta[t * ns..(t + 1) * ns].copy_from_slice(&column_mean);
            fill.rows_from_column_mean += 1;
        }
    }

    Ok(DeliverabilityLut { grid: raw.grid.clone(), eta, count: raw.count.clone(), fill })
}

impl DeliverabilityLut {
    pub fn get(&self, t_bin: usize, s_bin: usize) -> f64 {
        self.eta[t_bin * self.grid.n_pressure() + s_bin]
    }

    pub fn row(&self, t_bin: usize) -> &[f64] {
        let ns = self.grid.n_pressure();
        &self.eta[t_bin * ns..(t_bin + 1) * ns]
    }

    /// Deliverability at `(temp_c, s)`, clipping both to the grid.
    pub fn query(&self, temp_c: f64, s: f64) -> f64 {
        let (t, k) = bin_observation(temp_c, s, &self.grid);
        self.get(t, k)
    }

    pub fn is_monotone(&self) -> bool {
        (0..self.grid.n_temp()).all(|t| self.row(t).windows(2).all(|w| w[0] >= w[1]))
    }

    /// Trusted cells have at least [`MIN_TRUSTED_SUPPORT`] samples.
    pub fn is_trusted(&self, t_bin: usize, s_bin: usize) -> bool {
        self.count[t_bin * self.grid.n_pressure() + s_bin] >= MIN_TRUSTED_SUPPORT
    }

    /// View as a raw surface: populated where the count is nonzero.
    pub fn to_raw_surface(&self) -> RawSurface {
        RawSurface {
            grid: self.grid.clone(),
            eta_mean: self.eta.iter().zip(&self.count).map(|(e, c)| (*c > 0).then_some(*e)).collect(),
            count: self.count.clone(),
            skipped: 0,
        }
    }

    /// Constant table, handy as a stand-in in tests and demos.
    pub fn constant(grid: BinGrid, eta: f64) -> Self {
        let cells = grid.n_temp() * grid.n_pressure();
        Self { grid, eta: vec![eta.clamp(0.0, 1.0); cells], count: vec![0; cells], fill: FillStats::default() }
    }
}

pub fn lut_query(lut: &DeliverabilityLut, temp_c: f64, s: f64) -> f64 {
    lut.query(temp_c, s)
}

/// Everything needed to rebuild a LUT from telemetry, as recorded in the
/// JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutProvenance {
    pub records_total: u64,
    pub records_used: u64,
    pub records_skipped: u64,
    pub eta_kind: EtaKind,
    pub p_cap_kw: f64,
    pub cells_populated: u64,
    pub cells_trusted: u64,
    pub min_trusted_support: u64,
    pub fill: FillStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutSidecar {
    pub temp_edges: Vec<f64>,
    pub pressure_edges: Vec<f64>,
    pub provenance: Option<LutProvenance>,
}

/// Stage 1 end to end: raw surface then monotone envelope.
pub fn fit_lut(
    records: &[TelemetryRecord],
    cfg: &StationConfig,
    grid: &BinGrid,
    kind: EtaKind,
) -> Result<(DeliverabilityLut, LutProvenance)> {
    let raw = estimate_raw_surface(records, cfg, grid, kind)?;
    let lut = monotone_envelope(&raw)?;
    let prov = LutProvenance {
        records_total: records.len() as u64,
        records_used: raw.records_used(),
        records_skipped: raw.skipped,
        eta_kind: kind,
        p_cap_kw: cfg.p_cap_kw,
        cells_populated: raw.count.iter().filter(|c| **c > 0).count() as u64,
        cells_trusted: raw.count.iter().filter(|c| **c >= MIN_TRUSTED_SUPPORT).count() as u64,
        min_trusted_support: MIN_TRUSTED_SUPPORT,
        fill: lut.fill,
    };
    Ok((lut, prov))
}

/// Sidecar path next to a LUT CSV: `lut.csv` -> `lut.json`.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

pub fn write_lut(path: &Path, lut: &DeliverabilityLut, provenance: Option<&LutProvenance>) -> Result<()> {
    let mut text = LUT_COLUMNS.join(",");
    text.push('\n');
    for t in 0..lut.grid.n_temp() {
        for k in 0..lut.grid.n_pressure() {
            let i = t * lut.grid.n_pressure() + k;
            let _ = writeln!(
                text,
                "{},{},{},{}",
                lut.grid.temp_edges[t], lut.grid.pressure_edges[k], lut.eta[i], lut.count[i]
            );
        }
    }
    write_atomic(path, text.as_bytes())?;
    write_json(
        &sidecar_path(path),
        &LutSidecar {
            temp_edges: lut.grid.temp_edges.clone(),
            pressure_edges: lut.grid.pressure_edges.clone(),
            provenance: provenance.cloned(),
        },
    )
}

pub fn load_lut(path: &Path) -> Result<(DeliverabilityLut, LutSidecar)> {
    let sidecar: LutSidecar = read_json(&sidecar_path(path))?;
    let grid = BinGrid::new(sidecar.temp_edges.clone(), sidecar.pressure_edges.clone())?;
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &LUT_COLUMNS)?;
    let ns = grid.n_pressure();
    let cells = grid.n_temp() * ns;
    let mut eta = vec![f64::NAN; cells];
    let mut count = vec![0; cells];
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let t_low: f64 = parse_field(path, &row, 0, "t_bin_low_c")?;
        let s_low: f64 = parse_field(path, &row, 1, "s_bin_low")?;
        let i = grid.temp_bin(t_low) * ns + grid.pressure_bin(s_low);
        eta[i] = parse_field(path, &row, 2, "eta")?;
        count[i] = parse_field(path, &row, 3, "count")?;
    }
    if eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected {cells} cells with eta in [0, 1]"),
        });
    }
    let lut = DeliverabilityLut {
        grid,
        eta,
        count,
        fill: sidecar.provenance.as_ref().map(|p| p.fill).unwrap_or_default(),
    };
    if !lut.is_monotone() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "LUT rows are not non-increasing in pressure".into(),
        });
    }
    Ok((lut, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_row_grid(n: usize) -> BinGrid {
        BinGrid::new(vec![0.0, 35.0], (0..=n).map(|k| k as f64 / 10.0).collect()).unwrap()
    }

    fn envelope_row(cells: &[Option<f64>]) -> Vec<f64> {
        let raw = RawSurface::from_cells(one_row_grid(cells.len()), cells.to_vec()).unwrap();
        monotone_envelope(&raw).unwrap().eta
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(compute_pressure(86.25, 86.25).unwrap(), 1.0);
        assert_eq!(compute_pressure(172.5, 86.25).unwrap(), 2.0);
        assert_eq!(compute_pressure(0.0, 86.25).unwrap(), 0.0);
        assert!(compute_pressure(1.0, 0.0).is_err());
    }

    #[test]
    fn eta_examples() {
        assert_eq!(compute_eta(43.125, 86.25), Some(0.5));
        assert_eq!(compute_eta(50.0, 50.0), Some(1.0));
        assert_eq!(compute_eta(10.0, 0.0), None);
        assert_eq!(compute_eta(51.0, 50.0), Some(1.0));
    }

    #[test]
    fn binning_examples() {
        let g = BinGrid::standard();
        assert_eq!(bin_observation(12.3, 0.55, &g), (2, 5));
        assert_eq!(bin_observation(-4.0, 1.0, &g), (0, 10));
        assert_eq!(bin_observation(20.0, 3.7, &g).1, 29);
        assert_eq!(bin_observation(35.0, 3.0, &g), (6, 29));
        assert_eq!(bin_observation(50.0, 0.3, &g), (6, 3));
        assert_eq!(bin_observation(5.0, 0.1, &g), (1, 1));
    }

    #[test]
    fn envelope_examples() {
        let f = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
        assert_eq!(envelope_row(&f(&[1.0, 0.9, 0.95, 0.8])), vec![1.0, 0.9, 0.9, 0.8]);
        assert_eq!(envelope_row(&f(&[1.0, 0.9, 0.5])), vec![1.0, 0.9, 0.5]);
        assert_eq!(envelope_row(&[Some(0.5), None, Some(0.7)]), vec![0.5, 0.5, 0.5]);
        assert_eq!(envelope_row(&[None, Some(0.8), None]), vec![0.8, 0.8, 0.8]);
    }

    #[test]
    fn empty_row_takes_column_mean() {
        let grid = BinGrid::new(vec![0.0, 5.0, 10.0, 15.0], vec![0.0, 0.1, 0.2]).unwrap();
        let raw = RawSurface::from_cells(
            grid,
            vec![Some(1.0), Some(0.6), None, None, Some(0.8), Some(0.4)],
        )
        .unwrap();
        let lut = monotone_envelope(&raw).unwrap();
        assert_eq!(lut.row(1), &[0.9, 0.5]);
        assert_eq!(lut.fill.rows_from_column_mean, 1);
    }

    #[test]
    fn entirely_empty_surface_errors() {
        let raw = RawSurface::from_cells(one_row_grid(3), vec![None; 3]).unwrap();
        assert!(monotone_envelope(&raw).is_err());
    }

    #[test]
    fn two_records_average_in_cell() {
        let recs = [0.8, 0.6]
            .iter()
            .enumerate()
            .map(|(i, eta)| TelemetryRecord {
                timestamp: i as i64,
                station_id: "s".into(),
                p_req_kw: 43.125,
                p_set_kw: 43.125,
                p_real_kw: 43.125 * eta,
                temp_c: 12.0,
            })
            .collect::<Vec<_>>();
        let raw = estimate_raw_surface(&recs, &StationConfig::per_plug(), &BinGrid::standard(), EtaKind::Realized)
            .unwrap();
        let v = raw.get(2, 5).unwrap();
        assert!((v - 0.7).abs() < 1e-12);
        assert_eq!(raw.count[2 * 30 + 5], 2);
        assert_eq!(raw.eta_mean.iter().flatten().count(), 1);
    }

    #[test]
    fn zero_request_records_are_skipped() {
        let mk = |p_req: f64| TelemetryRecord {
            timestamp: 0,
            station_id: "s".into(),
            p_req_kw: p_req,
            p_set_kw: 0.0,
            p_real_kw: 0.0,
            temp_c: 10.0,
        };
        let cfg = StationConfig::per_plug();
        let raw = estimate_raw_surface(&[mk(0.0), mk(10.0)], &cfg, &BinGrid::standard(), EtaKind::Realized)
            .unwrap();
        assert_eq!(raw.skipped, 1);
        assert_eq!(raw.records_used(), 1);
        assert!(estimate_raw_surface(&[mk(0.0)], &cfg, &BinGrid::standard(), EtaKind::Realized).is_err());
        assert!(estimate_raw_surface(&[], &cfg, &BinGrid::standard(), EtaKind::Realized).is_err());
    }

    #[test]
    fn accumulator_merge_is_order_independent() {
        let g = BinGrid::standard();
        let samples: Vec<(f64, f64, f64)> =
            (0..200).map(|i| (i as f64 % 37.0, (i % 31) as f64 / 10.0, (i % 13) as f64 / 13.0)).collect();
        let build = |part: &[(f64, f64, f64)]| {
            let mut a = SurfaceAccumulator::new(g.clone());
            for (t, s, e) in part {
                a.add(*t, *s, *e);
            }
            a
        };
        let mut ab = build(&samples[..70]);
        ab.merge(&build(&samples[70..]));
        let mut ba = build(&samples[70..]);
        ba.merge(&build(&samples[..70]));
        assert_eq!(ab.finish(), ba.finish());
    }
}
