//! Align city pressure to the telemetry domain and inject SLR, then compare
//! with the rule that ignores temperature.

use ev_resilience::deliverability::{fit_lut, EtaKind};
use ev_resilience::injection::{Injector, PressureAligner};
use ev_resilience::panel::{SplitIndex, StationConfig};
use ev_resilience::stats::mean;
use ev_resilience::synth::{generate_synthetic_panel, generate_synthetic_telemetry, SynthPanelSpec, SynthTelemetrySpec};

fn main() -> ev_resilience::Result<()> {
    let tspec = SynthTelemetrySpec::default();
    let telemetry = generate_synthetic_telemetry(&tspec, 42)?;
    let station = StationConfig::per_plug();
    let (lut, _) = fit_lut(&telemetry, &station, &tspec.grid, EtaKind::default())?;
    let raw = generate_synthetic_panel(&SynthPanelSpec::default(), 42)?;
    let split = SplitIndex::chronological(raw.n_hours())?;
    let aligner = PressureAligner::fit(&raw, &split, &telemetry, &station)?;
    println!("anchor {:.3}; s_raw 1.0 maps to {:.6}", aligner.anchor, aligner.map(1.0));

    let a1 = Injector::A1 { lut, aligner }.inject(&raw)?;
    let a0 = Injector::A0.inject(&raw)?;
    println!("mean slr  a1 {:.4}  a0 {:.4}", mean(a1.slr().unwrap()), mean(a0.slr().unwrap()));
    for (i, (s, m)) in raw.s_raw().iter().zip(a1.s_mapped().unwrap()).take(5).enumerate() {
        println!("cell {i}: s_raw {s:.3} -> s_mapped {m:.3}");
    }
    Ok(())
}
