//! Scale demand and re-inject: mean SLR should rise with every step.

use ev_resilience::forecast::{stress_response, DEFAULT_STRESS_MULTIPLIERS};
use ev_resilience::injection::Injector;
use ev_resilience::pipeline::{Context, PipelineConfig};

fn main() -> ev_resilience::Result<()> {
    let ctx = Context::build(&PipelineConfig::default())?;
    for (name, inj) in [("a1", &ctx.injector), ("a0", &Injector::A0)] {
        let r = stress_response(inj, &ctx.panel, &DEFAULT_STRESS_MULTIPLIERS)?;
        println!(
            "{name}: mean slr {:?}  rho {:.2}  tail {}",
            r.mean_slr.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            r.spearman_rho,
            r.tail_amplification_pct.map_or("n/a".into(), |t| format!("{t:+.1}%"))
        );
    }
    Ok(())
}
