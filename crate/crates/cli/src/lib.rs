//! Subcommands of the `evres` binary. Every stage reads and writes fixed
//! file names under the output directory, so stages chain without flags:
//!
//! ```text
//! generate  -> telemetry.csv panel.csv zones.csv config.json
//! fit-lut   -> lut.csv lut.json
//! inject    -> injected.csv aligner.json injection.json
//! train     -> model.json train_log.csv
//! forecast  -> forecast.csv risk.json
//! simulate  -> resilience.json backlog_<policy>.csv
//! sweep     -> sweep.csv boundary.json
//! grid      -> grid.json load_<policy>.csv
//! report    -> report.csv
//! ```

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use ev_resilience::deliverability::{fit_lut, load_lut, write_lut};
use ev_resilience::forecast::train::{train, write_train_log, TrainConfig, TrainedModel};
use ev_resilience::forecast::{
    build_graph, model_series, persistence_series, risk_scores, ForecastSeries, RiskScores,
};
use ev_resilience::grid::{grid_report, GridReport};
use ev_resilience::injection::{Injector, PressureAligner};
use ev_resilience::io::{read_json, write_atomic, write_json};
use ev_resilience::panel::{
    load_panel_csv, load_telemetry_csv, write_panel_csv, write_telemetry_csv, write_zone_meta_csv, SplitIndex,
    StationConfig, ZoneHourPanel,
};
use ev_resilience::pipeline::{Context, InjectionMode, PipelineConfig};
use ev_resilience::resilience::{
    fit_boundary, run_policy_suite, sweep, write_sweep_csv, BacklogTrajectory, PolicyKind, PolicySuite, ScenarioSpec,
    SimInputs, SWEEP_ELASTICITIES, SWEEP_MULTIPLIERS,
};
use ev_resilience::synth::{generate_synthetic_panel, generate_synthetic_telemetry};

pub const OUT_DIR_ENV: &str = "EVRES_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "evres", version, about = "EV charging resilience pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides the seed in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for sweeps and the policy suite.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    pub out_dir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    A1,
    A0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Model,
    Persistence,
    Truth,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic telemetry and a synthetic zone-hour panel.
    Generate,
    /// Fit the deliverability table from telemetry.
    FitLut {
        #[arg(long)]
        telemetry: Option<PathBuf>,
    },
    /// Add s_mapped and slr columns to the panel.
    Inject {
        #[arg(long, value_enum, default_value = "a1")]
        mode: ModeArg,
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        telemetry: Option<PathBuf>,
    },
    /// Train the graph forecaster on the injected panel.
    Train {
        /// Tail-weight alpha values to search; the best validation loss wins.
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Vec<f64>,
        /// Tail-weight exponents to search.
        #[arg(long, value_delimiter = ',')]
        beta_grid: Vec<f64>,
    },
    /// Produce next-hour volume and SLR forecasts.
    Forecast {
        #[arg(long, value_enum, default_value = "persistence")]
        source: SourceArg,
    },
    /// Simulate one scenario, or every policy with --suite.
    Simulate {
        #[arg(long)]
        suite: bool,
        /// Scenario JSON; defaults to the config scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Keep only these policies in the suite output.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<PolicyKind>,
    },
    /// Stress-multiplier by elasticity grid for one policy.
    Sweep {
        #[arg(long, default_value = "price")]
        policy: PolicyKind,
        #[arg(long, value_delimiter = ',')]
        multipliers: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        elasticities: Vec<f64>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Transformer loading and stress hours per policy.
    Grid {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Merge resilience.json and grid.json into one table.
    Report,
    /// Serve the HTTP API over a freshly built context.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = ev_resilience_service::DEFAULT_SWEEP_CAP)]
        sweep_cap: usize,
    },
}

/// Resolved run configuration.
pub struct Run {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(p) => {
                if !p.is_file() {
                    bail!("{}: config file not found", p.display());
                }
                read_json::<PipelineConfig>(p)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = global.seed {
            config.seed = s;
        }
        config.scenario.validate()?;
        config.grid.validate()?;
        Ok(Self { config, out: global.out_dir.clone() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, flag: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = flag.clone().unwrap_or_else(|| self.path(name));
        if !p.is_file() {
            bail!("{}: input file not found", p.display());
        }
        Ok(p)
    }

    /// `path` relative to the output directory when it lies inside it,
    /// absolute otherwise, so records do not depend on where the run happened.
    fn relative(&self, path: &Path) -> Result<PathBuf> {
        let abs = std::fs::canonicalize(path).with_context(|| path.display().to_string())?;
        let out = std::fs::canonicalize(&self.out).with_context(|| self.out.display().to_string())?;
        Ok(abs.strip_prefix(&out).map(Path::to_path_buf).unwrap_or(abs))
    }

    fn scenario(&self, flag: &Option<PathBuf>) -> Result<ScenarioSpec> {
        let s = match flag {
            Some(_) => read_json::<ScenarioSpec>(&self.input(flag, "")?)?,
            None => self.config.scenario,
        };
        s.validate()?;
        Ok(s)
    }
}

/// How the panel was injected, so later stages rebuild the same injector.
/// Paths are relative to the output directory unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub mode: InjectionMode,
    pub lut: Option<PathBuf>,
    pub aligner: Option<PathBuf>,
}

fn load_injector(run: &Run) -> Result<Injector> {
    let rec: InjectionRecord = read_json(&run.input(&None, "injection.json")?)?;
    Ok(match rec.mode {
        InjectionMode::A0 => Injector::A0,
        InjectionMode::A1 => {
            let lut_path = rec.lut.context("injection.json: a1 without lut")?;
            let al_path = rec.aligner.context("injection.json: a1 without aligner")?;
            let (lut, _) = load_lut(&run.input(&Some(run.out.join(lut_path)), "")?)?;
            let aligner = PressureAligner::load(&run.input(&Some(run.out.join(al_path)), "")?)?;
            Injector::A1 { lut, aligner }
        }
    })
}

fn load_injected(run: &Run) -> Result<ZoneHourPanel> {
    let panel = load_panel_csv(&run.input(&None, "injected.csv")?, &run.input(&None, "zones.csv")?)?;
    if !panel.is_injected() {
        bail!("{}: panel has no s_mapped/slr columns; run inject", run.path("injected.csv").display());
    }
    Ok(panel)
}

fn sim_inputs(run: &Run, horizon: usize) -> Result<(SimInputs, ZoneHourPanel)> {
    let panel = load_injected(run)?;
    let forecast = ForecastSeries::load_csv(&run.input(&None, "forecast.csv")?, panel.zone_ids())?;
    let risk = risk_scores(&forecast);
    let inputs = SimInputs::new(forecast.tile_to(horizon)?, panel.capacity().to_vec(), risk.scores)?;
    Ok((inputs, panel))
}

fn write_trajectory_csv(path: &Path, traj: &BacklogTrajectory, zone_ids: &[String]) -> Result<()> {
    let mut text = String::from("hour,zone,backlog,arrivals,supply,served,lost\n");
    for t in 0..traj.horizon {
        for (z, id) in zone_ids.iter().enumerate() {
            let i = t * traj.n_zones + z;
            let _ = writeln!(
                text,
                "{t},{id},{},{},{},{},{}",
                traj.backlog[i], traj.arrivals[i], traj.supply[i], traj.served[i], traj.lost[i]
            );
        }
    }
    for (z, id) in zone_ids.iter().enumerate() {
        let _ = writeln!(text, "{},{id},{},,,,", traj.horizon, traj.backlog[traj.horizon * traj.n_zones + z]);
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

fn cmd_generate(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let telemetry = generate_synthetic_telemetry(&cfg.telemetry, cfg.seed)?;
    let panel = generate_synthetic_panel(&cfg.panel, cfg.seed)?;
    write_telemetry_csv(&run.path("telemetry.csv"), &telemetry)?;
    write_panel_csv(&run.path("panel.csv"), &panel)?;
    write_zone_meta_csv(&run.path("zones.csv"), &panel)?;
    write_json(&run.path("config.json"), cfg)?;
    info!("{} telemetry records, {} zones x {} hours", telemetry.len(), panel.n_zones(), panel.n_hours());
    Ok(())
}

fn cmd_fit_lut(run: &Run, telemetry: &Option<PathBuf>) -> Result<()> {
    let cfg = &run.config;
    let records = load_telemetry_csv(&run.input(telemetry, "telemetry.csv")?)?;
    let station = StationConfig::new(cfg.telemetry.p_cap_kw)?;
    let (lut, prov) = fit_lut(&records, &station, &cfg.telemetry.grid, cfg.eta_kind)?;
    if !lut.is_monotone() {
        bail!("fitted table is not monotone");
    }
    write_lut(&run.path("lut.csv"), &lut, Some(&prov))?;
    info!("lut: {} of {} records used", prov.records_used, prov.records_total);
    Ok(())
}

struct InjectInputs<'a> {
    mode: ModeArg,
    panel: &'a Option<PathBuf>,
    zones: &'a Option<PathBuf>,
    lut: &'a Option<PathBuf>,
    telemetry: &'a Option<PathBuf>,
}

fn cmd_inject(run: &Run, a: InjectInputs) -> Result<()> {
    let raw = load_panel_csv(&run.input(a.panel, "panel.csv")?, &run.input(a.zones, "zones.csv")?)?;
    let zones_path = run.path("zones.csv");
    if a.zones.is_some() || a.panel.is_some() {
        write_zone_meta_csv(&zones_path, &raw)?;
    }
    let rec = match a.mode {
        ModeArg::A0 => {
            write_panel_csv(&run.path("injected.csv"), &Injector::A0.inject(&raw)?)?;
            InjectionRecord { mode: InjectionMode::A0, lut: None, aligner: None }
        }
        ModeArg::A1 => {
            let lut_path = run.input(a.lut, "lut.csv")?;
            let (lut, _) = load_lut(&lut_path)?;
            let records = load_telemetry_csv(&run.input(a.telemetry, "telemetry.csv")?)?;
            let station = StationConfig::new(run.config.telemetry.p_cap_kw)?;
            let split = SplitIndex::chronological(raw.n_hours())?;
            let aligner = PressureAligner::fit(&raw, &split, &records, &station)?;
            aligner.save(&run.path("aligner.json"))?;
            let injector = Injector::A1 { lut, aligner };
            write_panel_csv(&run.path("injected.csv"), &injector.inject(&raw)?)?;
            InjectionRecord {
                mode: InjectionMode::A1,
                lut: Some(run.relative(&lut_path)?),
                aligner: Some("aligner.json".into()),
            }
        }
    };
    write_json(&run.path("injection.json"), &rec)?;
    Ok(())
}

fn cmd_train(run: &Run, alpha_grid: &[f64], beta_grid: &[f64]) -> Result<()> {
    let panel = load_injected(run)?;
    let split = SplitIndex::chronological(panel.n_hours())?;
    let graph = build_graph(panel.coords(), run.config.graph_radius_km);
    let base = TrainConfig { seed: run.config.seed, ..run.config.train.clone() };
    let alphas = if alpha_grid.is_empty() { vec![base.loss.alpha] } else { alpha_grid.to_vec() };
    let betas = if beta_grid.is_empty() { vec![base.loss.beta_exp] } else { beta_grid.to_vec() };
    let searching = alphas.len() * betas.len() > 1;
    let mut search = String::from("alpha,beta_exp,final_valid_loss\n");
    let mut best: Option<(f64, TrainedModel, Vec<_>)> = None;
    for a in &alphas {
        for b in &betas {
            let mut cfg = base.clone();
            cfg.loss.alpha = *a;
            cfg.loss.beta_exp = *b;
            let (model, log) = train(&panel, &graph, &split, &cfg)?;
            let v = log.last().map_or(f64::INFINITY, |e| e.valid_loss);
            let _ = writeln!(search, "{a},{b},{v}");
            info!("alpha {a} beta {b}: valid loss {v:.5}");
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, model, log));
            }
        }
    }
    let (_, model, log) = best.expect("at least one configuration");
    model.save(&run.path("model.json"))?;
    write_train_log(&run.path("train_log.csv"), &log)?;
    if searching {
        write_atomic(&run.path("tail_search.csv"), search.as_bytes())?;
    }
    Ok(())
}

fn cmd_forecast(run: &Run, source: SourceArg) -> Result<()> {
    let panel = load_injected(run)?;
    let series = match source {
        SourceArg::Truth => ForecastSeries::from_panel(&panel)?,
        SourceArg::Persistence => persistence_series(&panel, 1..panel.n_hours(), &load_injector(run)?)?,
        SourceArg::Model => {
            let model = TrainedModel::load(&run.input(&None, "model.json")?)?;
            model_series(&model, &panel, &build_graph(panel.coords(), model.graph_radius_km))?
        }
    };
    series.write_csv(&run.path("forecast.csv"), panel.zone_ids())?;
    let risk: RiskScores = risk_scores(&series);
    write_json(&run.path("risk.json"), &risk)?;
    Ok(())
}

fn cmd_simulate(run: &Run, suite: bool, scenario: &Option<PathBuf>, policies: &[PolicyKind]) -> Result<()> {
    let spec = run.scenario(scenario)?;
    let (inputs, panel) = sim_inputs(run, spec.horizon)?;
    let mut result = run_policy_suite(&spec, &inputs)?;
    if !suite {
        result.outcomes.retain(|o| o.policy == spec.policy.kind);
    }
    if !policies.is_empty() {
        result.outcomes.retain(|o| policies.contains(&o.policy));
    }
    for o in &result.outcomes {
        if let Some(t) = &o.trajectory {
            write_trajectory_csv(&run.path(&format!("backlog_{}.csv", o.policy.name())), t, panel.zone_ids())?;
        }
    }
    write_json(&run.path("resilience.json"), &result)?;
    Ok(())
}

fn cmd_sweep(
    run: &Run,
    policy: PolicyKind,
    multipliers: &[f64],
    elasticities: &[f64],
    scenario: &Option<PathBuf>,
) -> Result<()> {
    let spec = run.scenario(scenario)?;
    let ms = if multipliers.is_empty() { SWEEP_MULTIPLIERS.to_vec() } else { multipliers.to_vec() };
    let es = if elasticities.is_empty() { SWEEP_ELASTICITIES.to_vec() } else { elasticities.to_vec() };
    for m in &ms {
        ScenarioSpec { multiplier: *m, ..spec }.validate()?;
    }
    for e in &es {
        let mut s = spec;
        s.policy.elasticity = *e;
        s.validate()?;
    }
    let (inputs, _) = sim_inputs(run, spec.horizon)?;
    let cells = sweep(&spec, &inputs, &ms, &es, policy)?;
    write_sweep_csv(&run.path("sweep.csv"), &cells)?;
    let fit = fit_boundary(&cells);
    if let Some(w) = &fit.warning {
        log::warn!("boundary: {w}");
    }
    write_json(&run.path("boundary.json"), &fit)?;
    Ok(())
}

fn cmd_grid(run: &Run, scenario: &Option<PathBuf>) -> Result<()> {
    let spec = run.scenario(scenario)?;
    let (inputs, _) = sim_inputs(run, spec.horizon)?;
    let suite = run_policy_suite(&spec, &inputs)?;
    let report = grid_report(&suite, &run.config.grid)?;
    for (name, load) in &report.loads {
        load.write_csv(&run.path(&format!("load_{name}.csv")))?;
    }
    write_json(&run.path("grid.json"), &report)?;
    Ok(())
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "policy",
    "delta_auc",
    "delta_rt",
    "censored",
    "peak",
    "ens",
    "delta_h",
    "h_stress",
    "auc_reduction_pct",
    "peak_reduction_pct",
    "ens_reduction_pct",
];

fn cmd_report(run: &Run) -> Result<String> {
    let suite: PolicySuite = read_json(&run.input(&None, "resilience.json")?)?;
    let grid_path = run.path("grid.json");
    let grid: Option<GridReport> = if grid_path.is_file() { Some(read_json(&grid_path)?) } else { None };
    let mut text = REPORT_COLUMNS.join(",");
    text.push('\n');
    for o in &suite.outcomes {
        let r = &o.report;
        let entry = grid.as_ref().and_then(|g| g.policies.get(o.policy.name()));
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            o.policy.name(),
            r.delta_auc,
            r.delta_rt,
            r.censored,
            r.peak,
            r.ens,
            entry.map_or(String::new(), |e| e.delta_h.to_string()),
            entry.map_or(String::new(), |e| e.h_stress.to_string()),
            o.auc_reduction_pct,
            o.peak_reduction_pct,
            o.ens_reduction_pct,
        );
    }
    write_atomic(&run.path("report.csv"), text.as_bytes())?;
    Ok(text)
}

fn cmd_serve(run: &Run, host: &str, port: u16, sweep_cap: usize) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let state = ev_resilience_service::AppState::empty(sweep_cap);
    let config = run.config.clone();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let loader = state.clone();
        tokio::task::spawn_blocking(move || match Context::build(&config) {
            Ok(ctx) => {
                info!("context {} loaded", ctx.version);
                loader.load(ctx);
            }
            Err(e) => log::error!("context build failed: {e}"),
        });
        ev_resilience_service::serve(addr, state).await
    })?;
    Ok(())
}

/// Runs one subcommand. Text meant for stdout is returned.
pub fn run(cli: &Cli) -> Result<Option<String>> {
    let run = Run::new(&cli.global)?;
    let sweeping = matches!(cli.command, Command::Sweep { .. } | Command::Serve { .. });
    let threads = if sweeping { cli.global.jobs.unwrap_or(0) } else { 1 };
    // Ignore the error when a pool already exists (repeated calls in tests).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match &cli.command {
        Command::Generate => cmd_generate(&run)?,
        Command::FitLut { telemetry } => cmd_fit_lut(&run, telemetry)?,
        Command::Inject { mode, panel, zones, lut, telemetry } => {
            cmd_inject(&run, InjectInputs { mode: *mode, panel, zones, lut, telemetry })?
        }
        Command::Train { alpha_grid, beta_grid } => cmd_train(&run, alpha_grid, beta_grid)?,
        Command::Forecast { source } => cmd_forecast(&run, *source)?,
        Command::Simulate { suite, scenario, policies } => cmd_simulate(&run, *suite, scenario, policies)?,
        Command::Sweep { policy, multipliers, elasticities, scenario } => {
            cmd_sweep(&run, *policy, multipliers, elasticities, scenario)?
        }
        Command::Grid { scenario } => cmd_grid(&run, scenario)?,
        Command::Report => return Ok(Some(cmd_report(&run)?)),
        Command::Serve { host, port, sweep_cap } => cmd_serve(&run, host, *port, *sweep_cap)?,
    }
    Ok(None)
}

/// Single-line JSON error for stderr.
pub fn error_line(command: &str, err: &anyhow::Error) -> String {
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    serde_json::json!({ "error": message, "command": command }).to_string()
}

pub fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate => "generate",
        Command::FitLut { .. } => "fit-lut",
        Command::Inject { .. } => "inject",
        Command::Train { .. } => "train",
        Command::Forecast { .. } => "forecast",
        Command::Simulate { .. } => "simulate",
        Command::Sweep { .. } => "sweep",
        Command::Grid { .. } => "grid",
        Command::Report => "report",
        Command::Serve { .. } => "serve",
    }
}
