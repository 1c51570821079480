//! Transformer loading per policy and stress hours relieved.

use ev_resilience::grid::grid_report;
use ev_resilience::pipeline::{Context, PipelineConfig};
use ev_resilience::resilience::run_policy_suite;

fn main() -> ev_resilience::Result<()> {
    let ctx = Context::build(&PipelineConfig::default())?;
    let suite = run_policy_suite(&ctx.config.scenario, &ctx.inputs)?;
    let report = grid_report(&suite, &ctx.config.grid)?;
    println!("transformer {:.0} kW", report.transformer_capacity_kw);
    for (name, e) in &report.policies {
        println!("{name:<9} H={:<4} dH={:+}  peak lambda {:.2}", e.h_stress, e.delta_h, e.peak_lambda);
    }
    Ok(())
}
