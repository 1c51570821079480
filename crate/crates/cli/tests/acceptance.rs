//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ev_resilience::deliverability::{cummin, fit_lut, monotone_envelope, BinGrid, EtaKind, RawSurface};
use ev_resilience::forecast::model::{tail_weight, ModelDims, ModelParams, TailLossConfig, Targets};
use ev_resilience::forecast::train::{gradient_check, Dataset};
use ev_resilience::forecast::{
    build_graph, stress_response, FeatureWindow, ForecastSeries, ModelPredictor, DEFAULT_STRESS_MULTIPLIERS,
};
use ev_resilience::grid::{grid_report, stress_hours};
use ev_resilience::injection::{anchored_map, EmpiricalCdf, Injector, PressureAligner};
use ev_resilience::panel::StationConfig;
use ev_resilience::pipeline::{Context, ForecastSource, PipelineConfig};
use ev_resilience::resilience::{
    fit_boundary, fit_boundary_points, metrics_from_excess, run_policy_suite, simulate, sweep, PolicyKind,
    PolicySpec, ScenarioSpec, SimInputs, SWEEP_ELASTICITIES, SWEEP_MULTIPLIERS,
};
use ev_resilience::synth::{generate_synthetic_telemetry, SynthTelemetrySpec};

type Check = (bool, String);

fn lut_recovery() -> Check {
    let started = Instant::now();
    let worst = |spec: &SynthTelemetrySpec| {
        let records = generate_synthetic_telemetry(spec, 42).unwrap();
        let station = StationConfig::new(spec.p_cap_kw).unwrap();
        let (lut, _) = fit_lut(&records, &station, &spec.grid, EtaKind::default()).unwrap();
        let mut err: f64 = 0.0;
        for t in 0..lut.grid.n_temp() {
            for k in 0..lut.grid.n_pressure() {
                if lut.is_trusted(t, k) {
                    err = err.max((lut.get(t, k) - spec.law.eval(t, lut.grid.pressure_center(k))).abs());
                }
            }
        }
        (lut.is_monotone(), err)
    };
    let noisy = SynthTelemetrySpec::default();
    let (mono, err) = worst(&noisy);
    let (mono0, err0) = worst(&SynthTelemetrySpec { noise: 0.0, ..noisy.clone() });
    let secs = started.elapsed().as_secs_f64();
    let pass = noisy.samples_per_cell >= 30 && mono && mono0 && err <= 0.05 && err0 <= 1e-9 && secs < 5.0;
    (pass, format!("monotone={}, noisy err {err:.4} (<=0.05), noise-free err {err0:.1e} (<=1e-9), {secs:.2}s (<5s)", mono && mono0))
}

fn cummin_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..31);
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let oracle: Vec<f64> = (0..n).map(|k| row[..=k].iter().copied().fold(f64::INFINITY, f64::min)).collect();
        let grid = BinGrid::new(vec![0.0, 5.0], (0..=n).map(|k| k as f64 / 10.0).collect()).unwrap();
        let lut = monotone_envelope(&RawSurface::from_cells(grid, row.iter().map(|v| Some(*v)).collect()).unwrap())
            .unwrap();
        let mut direct = row.clone();
        cummin(&mut direct);
        if lut.row(0) != oracle.as_slice() || direct != oracle {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches in 1000 rows"))
}

fn anchor_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut aligners = Vec::new();
    for _ in 0..100 {
        let target: Vec<f64> = (0..rng.gen_range(20..400)).map(|_| rng.gen_range(0.0..1.5)).collect();
        let source: Vec<f64> = (0..rng.gen_range(20..400)).map(|_| rng.gen_range(0.0..3.0)).collect();
        let a = PressureAligner::new(EmpiricalCdf::fit(&target).unwrap(), EmpiricalCdf::fit(&source).unwrap()).unwrap();
        worst = worst.max((anchored_map(&a, 1.0) - 1.0).abs());
        aligners.push(a);
    }
    let mut flips = 0;
    for i in 0..10_000 {
        let a = &aligners[i % 100];
        let (x, y): (f64, f64) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        if anchored_map(a, lo) > anchored_map(a, hi) {
            flips += 1;
        }
    }
    (worst <= 1e-9 && flips == 0, format!("max |map(1)-1| {worst:.1e} over 100 fits, {flips} rank flips in 10000 pairs"))
}

fn injection_stress(ctx: &Context) -> Check {
    let a1 = stress_response(&ctx.injector, &ctx.panel, &DEFAULT_STRESS_MULTIPLIERS).unwrap();
    let a0 = stress_response(&Injector::A0, &ctx.panel, &DEFAULT_STRESS_MULTIPLIERS).unwrap();
    let tail = a1.tail_amplification_pct.unwrap_or(f64::NAN);
    let gap: Vec<String> = a1.mean_slr.iter().zip(&a0.mean_slr).map(|(x, y)| format!("{:+.4}", x - y)).collect();
    (
        a1.spearman_rho == 1.0 && tail > 0.0,
        format!("A1 rho {:+.2}, tail {tail:+.1}%; A0 rho {:+.2}, A1-A0 mean slr gap [{}]", a1.spearman_rho, a0.spearman_rho, gap.join(", ")),
    )
}

fn trained_model() -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let started = Instant::now();
        let cfg = PipelineConfig { forecast: ForecastSource::Model, ..Default::default() };
        let ctx = Context::build(&cfg).unwrap();
        let model = ctx.model.as_ref().unwrap();
        let test = ctx.split.test();
        let p = ModelPredictor { model, graph: &ctx.graph, injector: &ctx.injector, ends: test.start - 1..test.end - 1 };
        let r = stress_response(&p, &ctx.panel, &DEFAULT_STRESS_MULTIPLIERS).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let shape_ok = ctx.panel.n_zones() == 20 && cfg.train.hidden == 16 && cfg.train.epochs <= 200;
        (
            shape_ok && r.spearman_rho >= 0.6 && secs < 600.0,
            format!(
                "Z={} H={} epochs={}, rho {:+.2} (>=0.6), {secs:.1}s single-threaded (<600s)",
                ctx.panel.n_zones(),
                cfg.train.hidden,
                cfg.train.epochs,
                r.spearman_rho
            ),
        )
    })
}

fn gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lookback, nz, n) = (3, 2, 4);
    let windows = (0..n)
        .map(|b| FeatureWindow {
            end_hour: b + lookback,
            data: Array3::from_shape_simple_fn((lookback, nz, 8), || rng.gen_range(-1.5..1.5)),
        })
        .collect();
    let mut targets = Targets::default();
    for _ in 0..n * nz {
        targets.slr.push(rng.gen_range(0.0..1.0));
        targets.log_volume.push(rng.gen_range(0.0..3.0));
        targets.weight.push(1.0 + 2.0 * rng.gen_range(0.0f64..3.0).powi(2));
    }
    let data = Dataset { windows, targets, n_zones: nz };
    let graph = build_graph(&[(0.0, 0.0), (3.0, 0.0)], 5.0);
    let mut params = ModelParams::init(ModelDims::new(2), &mut rng);
    for (name, t) in params.tensors_mut() {
        if name.contains('b') {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let c = gradient_check(&params, &data, &graph, &TailLossConfig { w_slr: 1.3, w_vol: 0.7, ..Default::default() }, 1e-5)
        .unwrap();
    (
        c.worst_rel_error <= 1e-4 && c.n_params == params.n_params(),
        format!("{} parameters, worst rel error {:.1e} at {} (<=1e-4)", c.n_params, c.worst_rel_error, c.worst_param),
    )
}

fn tail_weight_claim() -> Check {
    let w = tail_weight(3.0, &TailLossConfig { alpha: 2.0, beta_exp: 2.0, ..Default::default() });
    (w == 19.0, format!("tail_weight(3.0) = {w}"))
}

fn conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut step_bad, mut worst_final) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let nz = rng.gen_range(1..6);
        let horizon = rng.gen_range(2..120);
        let cells = nz * horizon;
        let forecast = ForecastSeries::new(
            nz,
            0,
            (0..cells).map(|_| rng.gen_range(0.0..400.0)).collect(),
            (0..cells).map(|_| rng.gen_range(0.0..0.6)).collect(),
        )
        .unwrap();
        let inputs = SimInputs::new(
            forecast,
            (0..nz).map(|_| rng.gen_range(50.0..500.0)).collect(),
            (0..nz).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let start = rng.gen_range(0..horizon - 1);
        let scenario = ScenarioSpec {
            multiplier: rng.gen_range(1.0..2.5),
            shock_window: (start, rng.gen_range(start + 1..=horizon)),
            horizon,
            policy: PolicySpec {
                kind: PolicyKind::ALL[rng.gen_range(0..4)],
                delta_p: rng.gen_range(0.0..1.0),
                elasticity: -rng.gen_range(0.0..0.6),
                boost_frac: rng.gen_range(0.0..0.5),
                top_k: rng.gen_range(1..5),
            },
            balk_threshold: rng.gen_range(0.0..500.0),
            ..ScenarioSpec::default()
        };
        let tr = simulate(&scenario, &inputs).unwrap();
        for z in 0..nz {
            let (mut sa, mut ss) = (0.0, 0.0);
            for t in 0..horizon {
                let i = t * nz + z;
                if tr.backlog[i + nz] - tr.backlog[i] != tr.arrivals[i] - tr.served[i] {
                    step_bad += 1;
                }
                sa += tr.arrivals[i];
                ss += tr.served[i];
            }
            worst_final = worst_final.max((tr.backlog[horizon * nz + z] - (sa - ss)).abs());
        }
    }
    (
        step_bad == 0 && worst_final <= 1e-9,
        format!("{step_bad} inexact steps over 1000 scenarios, final balance error {worst_final:.1e} (<=1e-9)"),
    )
}

fn hand_fixture() -> Check {
    let r = metrics_from_excess(&[0.0, 10.0, 5.0, 0.0, 0.0, 0.0, 0.0], 1, 2, 2, 0.01, 0.0);
    (
        r.delta_auc == 15.0 && r.peak == 10.0 && r.delta_rt == 1.0 && !r.censored,
        format!("dAUC {} peak {} dRT {}", r.delta_auc, r.peak, r.delta_rt),
    )
}

fn policy_ordering() -> Check {
    let started = Instant::now();
    let cfg = PipelineConfig::default();
    let ctx = Context::build(&cfg).unwrap();
    let s = &cfg.scenario;
    let suite = run_policy_suite(s, &ctx.inputs).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let auc = |k| suite.get(k).report.delta_auc;
    let red = |k| suite.get(k).auc_reduction_pct;
    let order = auc(PolicyKind::Hybrid) < auc(PolicyKind::Capboost)
        && auc(PolicyKind::Capboost) < auc(PolicyKind::Price)
        && auc(PolicyKind::Price) < auc(PolicyKind::None);
    let hybrid_best = red(PolicyKind::Hybrid) >= red(PolicyKind::Price).max(red(PolicyKind::Capboost));
    let setup = s.multiplier == 1.5 && s.shock_window.1 - s.shock_window.0 == 48;
    (
        order && hybrid_best && setup && secs < 60.0,
        format!(
            "m={} shock {}h: dAUC hybrid {:.0} < capboost {:.0} < price {:.0} < none {:.0}; reduction hybrid {:.1}% price {:.1}% capboost {:.1}%; {secs:.2}s (<60s)",
            s.multiplier,
            s.shock_window.1 - s.shock_window.0,
            auc(PolicyKind::Hybrid),
            auc(PolicyKind::Capboost),
            auc(PolicyKind::Price),
            auc(PolicyKind::None),
            red(PolicyKind::Hybrid),
            red(PolicyKind::Price),
            red(PolicyKind::Capboost)
        ),
    )
}

fn grid_signs(ctx: &Context) -> Check {
    let suite = run_policy_suite(&ctx.config.scenario, &ctx.inputs).unwrap();
    let g = grid_report(&suite, &ctx.config.grid).unwrap();
    let (p, c) = (g.policies["price"].delta_h, g.policies["capboost"].delta_h);
    (p >= c, format!("dH price {p:+} >= dH capboost {c:+} (H none {})", g.policies["none"].h_stress))
}

fn stress_hours_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let lambda: Vec<f64> = (0..rng.gen_range(0..300)).map(|_| rng.gen_range(0.0..1.5)).collect();
        let thr = rng.gen_range(0.05..0.95);
        let mut n = 0;
        for l in &lambda {
            if *l > thr {
                n += 1;
            }
        }
        if stress_hours(&lambda, thr) != n {
            mismatches += 1;
        }
    }
    let fixture = stress_hours(&[0.7, 0.85, 0.9, 0.75], 0.8);
    (mismatches == 0 && fixture == 2, format!("{mismatches} mismatches in 1000 series, fixture {fixture} h"))
}

fn boundary(ctx: &Context) -> Check {
    let pts: Vec<(f64, f64)> = SWEEP_ELASTICITIES.iter().map(|e| (*e, 1.7 - 1.0 * e)).collect();
    let (a, b) = fit_boundary_points(&pts).unwrap();
    let cells =
        sweep(&ctx.config.scenario, &ctx.inputs, &SWEEP_MULTIPLIERS, &SWEEP_ELASTICITIES, PolicyKind::Price).unwrap();
    let mut steps = fit_boundary(&cells).points;
    steps.sort_by(|x, y| x.0.total_cmp(&y.0));
    let staircase = steps.len() >= 2 && steps.windows(2).all(|w| w[0].1 >= w[1].1);
    (
        (a - 1.7).abs() <= 1e-9 && (b + 1.0).abs() <= 1e-9 && staircase,
        format!("recovered ({a:.12}, {b:.12}); m_crit by eps {steps:?}"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg_path = cfg_dir.path().join("config.json");
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 3;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let commands: [&[&str]; 12] = [
        &["generate"],
        &["fit-lut"],
        &["inject", "--mode", "a0"],
        &["inject", "--mode", "a1"],
        &["train"],
        &["forecast", "--source", "model"],
        &["forecast", "--source", "truth"],
        &["forecast"],
        &["simulate", "--suite"],
        &["sweep"],
        &["grid"],
        &["report"],
    ];
    let mut diverged = Vec::new();
    for args in commands {
        for d in &dirs {
            let out = Command::new(env!("CARGO_BIN_EXE_evres"))
                .args(["--seed", "42", "--config", cfg_path.to_str().unwrap(), "--out-dir"])
                .arg(d.path())
                .args(args)
                .env_remove("EVRES_OUT_DIR")
                .output()
                .unwrap();
            if !out.status.success() {
                return (false, format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
            }
        }
        let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
        if a != b {
            let names: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            diverged.push(format!("{}: {names:?}", args[0]));
        }
    }
    let files = snapshot(dirs[0].path()).len();
    (
        diverged.is_empty(),
        if diverged.is_empty() {
            format!("{} commands rerun, {files} output files byte-identical (serve writes no files)", commands.len())
        } else {
            format!("differences after {}", diverged.join("; "))
        },
    )
}

fn main() {
    let ctx = Context::build(&PipelineConfig::default()).expect("default context");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("lut monotonicity and recovery", Box::new(lut_recovery)),
        ("cummin oracle", Box::new(cummin_oracle)),
        ("anchor exactness and rank preservation", Box::new(anchor_exactness)),
        ("injection stress monotonicity", Box::new(|| injection_stress(&ctx))),
        ("trained-model physics consistency", Box::new(trained_model)),
        ("gradient check", Box::new(gradient)),
        ("tail weight at s=3", Box::new(tail_weight_claim)),
        ("backlog conservation", Box::new(conservation)),
        ("hand-fixture metrics", Box::new(hand_fixture)),
        ("policy-suite ordering", Box::new(policy_ordering)),
        ("grid sign structure", Box::new(|| grid_signs(&ctx))),
        ("stress-hours oracle", Box::new(stress_hours_oracle)),
        ("boundary fit identity and staircase", Box::new(|| boundary(&ctx))),
        ("cli determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let total = Instant::now();
    for (name, check) in &criteria {
        let started = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{}]",
            if pass { "PASS" } else { "FAIL" },
            fmt_duration(started.elapsed())
        );
    }
    println!("acceptance: {} passed, {failed} failed in {}", criteria.len() - failed, fmt_duration(total.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
