//! Persistence forecast, its accuracy, and the zones a capacity boost targets.

use ev_resilience::forecast::eval_accuracy;
use ev_resilience::pipeline::{Context, PipelineConfig};

fn main() -> ev_resilience::Result<()> {
    let ctx = Context::build(&PipelineConfig::default())?;
    let f = &ctx.forecast;
    let nz = f.n_zones;
    let hours = f.hours();
    let truth = &ctx.panel.demand()[hours.start * nz..hours.end * nz];
    let acc = eval_accuracy(&f.volume, truth, nz)?;
    println!("volume rmse {:.2} mae {:.2} mape {:?}", acc.rmse, acc.mae, acc.mape);
    for z in ctx.risk.top_k(5) {
        println!("{}  risk {:.3}", ctx.panel.zone_ids()[z], ctx.risk.scores[z]);
    }
    Ok(())
}
