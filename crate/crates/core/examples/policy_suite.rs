//! Demand shock with each policy, against the unshocked baseline.

use ev_resilience::pipeline::{Context, PipelineConfig};
use ev_resilience::resilience::run_policy_suite;

fn main() -> ev_resilience::Result<()> {
    let ctx = Context::build(&PipelineConfig::default())?;
    let suite = run_policy_suite(&ctx.config.scenario, &ctx.inputs)?;
    println!("{:<9}{:>14}{:>8}{:>10}{:>12}", "policy", "dAUC", "dRT", "peak", "ens");
    for o in &suite.outcomes {
        let r = &o.report;
        let rt = if r.censored { format!(">{}", r.delta_rt) } else { r.delta_rt.to_string() };
        println!("{:<9}{:>14.0}{:>8}{:>10.1}{:>12.1}", o.policy.name(), r.delta_auc, rt, r.peak, r.ens);
    }
    Ok(())
}
