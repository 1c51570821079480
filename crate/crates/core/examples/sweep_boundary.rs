//! Recovery-time grid over stress and elasticity, with the fitted boundary.

use ev_resilience::pipeline::{Context, PipelineConfig};
use ev_resilience::resilience::{fit_boundary, sweep, PolicyKind, SWEEP_ELASTICITIES, SWEEP_MULTIPLIERS};

fn main() -> ev_resilience::Result<()> {
    let ctx = Context::build(&PipelineConfig::default())?;
    let cells = sweep(&ctx.config.scenario, &ctx.inputs, &SWEEP_MULTIPLIERS, &SWEEP_ELASTICITIES, PolicyKind::Price)?;
    print!("m\\eps");
    for e in SWEEP_ELASTICITIES {
        print!("{e:>8}");
    }
    println!();
    for row in cells.chunks(SWEEP_ELASTICITIES.len()) {
        print!("{:<5}", row[0].m);
        for c in row {
            let mark = if c.report.censored { "*" } else { " " };
            print!("{:>7}{mark}", c.report.delta_rt);
        }
        println!();
    }
    let fit = fit_boundary(&cells);
    println!("m_crit by eps: {:?}", fit.points);
    match fit.line {
        Some((a, b)) => println!("m_crit ~ {a:.3} + {b:.3} eps"),
        None => println!("no line: {}", fit.warning.unwrap_or_default()),
    }
    Ok(())
}
