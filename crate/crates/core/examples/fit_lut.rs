//! Fit a deliverability table from synthetic telemetry and print one row.

use ev_resilience::deliverability::{fit_lut, BinGrid, EtaKind};
use ev_resilience::panel::StationConfig;
use ev_resilience::synth::{generate_synthetic_telemetry, SynthTelemetrySpec};

fn main() -> ev_resilience::Result<()> {
    let spec = SynthTelemetrySpec::default();
    let records = generate_synthetic_telemetry(&spec, 42)?;
    let (lut, prov) = fit_lut(&records, &StationConfig::per_plug(), &BinGrid::standard(), EtaKind::default())?;
    println!(
        "{} records, {} used, {} trusted cells, monotone: {}",
        prov.records_total,
        prov.records_used,
        prov.cells_trusted,
        lut.is_monotone()
    );
    let t_bin = lut.grid.temp_bin(-4.0);
    for k in (0..lut.grid.n_pressure()).step_by(5) {
        let s = lut.grid.pressure_center(k);
        println!("T<5C  s={s:.2}  eta={:.3}  law={:.3}", lut.get(t_bin, k), spec.law.eval(t_bin, s));
    }
    Ok(())
}
