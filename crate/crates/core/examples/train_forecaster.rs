//! Train the graph forecaster and score it on the test split.
//!
//! `cargo run --release --example train_forecaster -- 150` runs the full
//! schedule; the default is a short run.

use ev_resilience::forecast::{eval_accuracy, stress_response, ModelPredictor, DEFAULT_STRESS_MULTIPLIERS};
use ev_resilience::pipeline::{Context, ForecastSource, PipelineConfig};

fn main() -> ev_resilience::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let mut cfg = PipelineConfig { forecast: ForecastSource::Model, ..Default::default() };
    cfg.train.epochs = epochs;
    let ctx = Context::build(&cfg)?;
    let (first, last) = (ctx.train_log[0], ctx.train_log[ctx.train_log.len() - 1]);
    println!("loss {:.4} -> {:.4} (valid {:.4})", first.train_loss, last.train_loss, last.valid_loss);

    let model = ctx.model.as_ref().expect("model source trains a model");
    let test = ctx.split.test();
    let nz = ctx.panel.n_zones();
    let (slr, _) = model.predict(&ctx.panel, &ctx.graph, test.start - 1..test.end - 1)?;
    let truth = &ctx.panel.slr().unwrap()[test.start * nz..test.end * nz];
    let acc = eval_accuracy(&slr, truth, nz)?;
    println!("test slr rmse {:.4} mae {:.4}", acc.rmse, acc.mae);

    let p = ModelPredictor { model, graph: &ctx.graph, injector: &ctx.injector, ends: test.start - 1..test.end - 1 };
    let r = stress_response(&p, &ctx.panel, &DEFAULT_STRESS_MULTIPLIERS)?;
    println!("stress rho {:.2}", r.spearman_rho);
    Ok(())
}
