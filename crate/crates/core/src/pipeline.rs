//! End-to-end synthetic context: telemetry to simulation inputs.

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deliverability::{fit_lut, DeliverabilityLut, EtaKind, LutProvenance};
use crate::error::Result;
use crate::forecast::train::{train, EpochLog, TrainConfig, TrainedModel};
use crate::forecast::{
    build_graph, model_series, persistence_series, risk_scores, ForecastSeries, RiskScores, ZoneGraph,
    DEFAULT_RADIUS_KM,
};
use crate::grid::GridConfig;
use crate::injection::{Injector, PressureAligner};
use crate::panel::{SplitIndex, StationConfig, TelemetryRecord, ZoneHourPanel};
use crate::resilience::{ScenarioSpec, SimInputs};
use crate::synth::{generate_synthetic_panel, generate_synthetic_telemetry, SynthPanelSpec, SynthTelemetrySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastSource {
    /// Trained graph forecaster.
    Model,
    /// Previous-day persistence.
    #[default]
    Persistence,
    /// The injected panel itself.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    #[default]
    A1,
    A0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub telemetry: SynthTelemetrySpec,
    pub panel: SynthPanelSpec,
    pub eta_kind: EtaKind,
    pub injection: InjectionMode,
    pub graph_radius_km: f64,
    pub train: TrainConfig,
    pub forecast: ForecastSource,
    pub scenario: ScenarioSpec,
    pub grid: GridConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: crate::seed::DEFAULT_SEED,
            telemetry: SynthTelemetrySpec::default(),
            panel: SynthPanelSpec::default(),
            eta_kind: EtaKind::default(),
            injection: InjectionMode::default(),
            graph_radius_km: DEFAULT_RADIUS_KM,
            train: TrainConfig::default(),
            forecast: ForecastSource::default(),
            scenario: ScenarioSpec::default(),
            grid: GridConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything downstream stages need, built once per configuration.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub version: String,
    pub telemetry: Vec<TelemetryRecord>,
    pub lut: DeliverabilityLut,
    pub lut_provenance: LutProvenance,
    pub aligner: PressureAligner,
    pub injector: Injector,
    pub panel: ZoneHourPanel,
    pub split: SplitIndex,
    pub graph: ZoneGraph,
    pub model: Option<TrainedModel>,
    pub train_log: Vec<EpochLog>,
    /// Forecast over the hours it actually covers.
    pub forecast: ForecastSeries,
    pub risk: RiskScores,
    pub inputs: SimInputs,
}

impl Context {
    pub fn build(config: &PipelineConfig) -> Result<Self> {
        let seed = config.seed;
        let station = StationConfig::new(config.telemetry.p_cap_kw)?;
        let telemetry = generate_synthetic_telemetry(&config.telemetry, seed)?;
        let (lut, lut_provenance) = fit_lut(&telemetry, &station, &config.telemetry.grid, config.eta_kind)?;
        let raw = generate_synthetic_panel(&config.panel, seed)?;
        let split = SplitIndex::chronological(raw.n_hours())?;
        let aligner = PressureAligner::fit(&raw, &split, &telemetry, &station)?;
        let injector = match config.injection {
            InjectionMode::A1 => Injector::A1 { lut: lut.clone(), aligner: aligner.clone() },
            InjectionMode::A0 => Injector::A0,
        };
        let panel = injector.inject(&raw)?;
        let graph = build_graph(panel.coords(), config.graph_radius_km);
        info!("context: {} zones, {} hours, {} graph edges", panel.n_zones(), panel.n_hours(), graph.edge_count());

        let mut model = None;
        let mut train_log = Vec::new();
        let forecast = match config.forecast {
            ForecastSource::Model => {
                let train_cfg = TrainConfig { seed, ..config.train.clone() };
                let (m, log) = train(&panel, &graph, &split, &train_cfg)?;
                let f = model_series(&m, &panel, &graph)?;
                model = Some(m);
                train_log = log;
                f
            }
            ForecastSource::Persistence => persistence_series(&panel, 1..panel.n_hours(), &injector)?,
            ForecastSource::Truth => ForecastSeries::from_panel(&panel)?,
        };
        let risk = risk_scores(&forecast);
        let tiled = forecast.tile_to(config.scenario.horizon)?;
        let inputs = SimInputs::new(tiled, panel.capacity().to_vec(), risk.scores.clone())?;
        Ok(Self {
            config: config.clone(),
            version: config.fingerprint(),
            telemetry,
            lut,
            lut_provenance,
            aligner,
            injector,
            panel,
            split,
            graph,
            model,
            train_log,
            forecast,
            risk,
            inputs,
        })
    }
}
