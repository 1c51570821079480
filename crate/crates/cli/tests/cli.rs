use std::path::Path;
use std::process::{Command, Output};

fn evres(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evres"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("EVRES_OUT_DIR")
        .output()
        .expect("spawn evres")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = evres(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn prepare(out: &Path) {
    for cmd in [&["generate"][..], &["fit-lut"], &["inject"], &["forecast"]] {
        ok(out, cmd);
    }
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = evres(dir.path(), &["fit-lut"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("telemetry.csv"), "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["command"], "fit-lut");
}

#[test]
fn lut_from_cli_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate"]);
    ok(dir.path(), &["fit-lut"]);
    let (lut, side) = ev_resilience::deliverability::load_lut(&dir.path().join("lut.csv")).unwrap();
    assert!(lut.is_monotone());
    assert!(side.provenance.unwrap().cells_trusted > 0);
}

#[test]
fn inject_modes_on_pinned_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["generate"]);
    ok(out, &["fit-lut"]);
    // Pin zone Z000 to s_raw = 1 at hour 0 and s_raw = 2 at hour 1.
    let zones = std::fs::read_to_string(out.join("zones.csv")).unwrap();
    let cap = column(&zones, "capacity_kwh_per_h")[0].clone();
    let cap_f: f64 = cap.parse().unwrap();
    let panel = std::fs::read_to_string(out.join("panel.csv")).unwrap();
    let edited: Vec<String> = panel
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            match (f[0], f[1]) {
                ("Z000", "0") => format!("Z000,0,{cap},{}", f[3]),
                ("Z000", "1") => format!("Z000,1,{},{}", 2.0 * cap_f, f[3]),
                _ => l.to_string(),
            }
        })
        .collect();
    std::fs::write(out.join("panel.csv"), edited.join("\n") + "\n").unwrap();

    ok(out, &["inject", "--mode", "a1"]);
    let a1 = std::fs::read_to_string(out.join("injected.csv")).unwrap();
    let row = |text: &str, hour: &str| -> Vec<String> {
        text.lines().find(|l| l.starts_with(&format!("Z000,{hour},"))).unwrap().split(',').map(String::from).collect()
    };
    assert_eq!(row(&a1, "0")[4].parse::<f64>().unwrap(), 1.0);

    ok(out, &["inject", "--mode", "a0"]);
    let a0 = std::fs::read_to_string(out.join("injected.csv")).unwrap();
    assert_eq!(row(&a0, "1")[5].parse::<f64>().unwrap(), 0.5);
    assert_ne!(column(&a1, "slr"), column(&a0, "slr"));
}

#[test]
fn sweep_row_count() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    ok(dir.path(), &["sweep", "--multipliers", "1.2,1.5,2.0", "--elasticities", "-0.1,-0.3"]);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn no_policy_report_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    ok(dir.path(), &["simulate", "--suite", "--policies", "none"]);
    ok(dir.path(), &["grid"]);
    let text = ok(dir.path(), &["report"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let delta_h = column(&text, "delta_h");
    assert_eq!(delta_h, vec!["0"]);
    for c in ["auc_reduction_pct", "peak_reduction_pct", "ens_reduction_pct"] {
        assert_eq!(column(&text, c)[0].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenario": {"multiplier": 1.5, "oops": 1}}"#).unwrap();
    let o = evres(dir.path(), &["--config", cfg.to_str().unwrap(), "generate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("oops"));
}

#[test]
fn seed_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["generate"]);
    ok(b.path(), &["--seed", "7", "generate"]);
    let read = |d: &Path| std::fs::read(d.join("panel.csv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn bad_arguments_give_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = evres(dir.path(), &["inject", "--mode", "a9"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}
