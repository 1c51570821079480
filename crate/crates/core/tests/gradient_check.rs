use ev_resilience::forecast::model::{forward_batch, stack_windows, weighted_loss, ModelDims, ModelParams, TailLossConfig, Targets};
use ev_resilience::forecast::train::{gradient_check, loss_and_gradient, Dataset};
use ev_resilience::forecast::{build_graph, FeatureWindow};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_dataset(rng: &mut ChaCha8Rng, n_windows: usize) -> Dataset {
    let (lookback, nz) = (3, 2);
    let windows: Vec<FeatureWindow> = (0..n_windows)
        .map(|b| FeatureWindow {
            end_hour: b + lookback,
            data: Array3::from_shape_simple_fn((lookback, nz, 8), || rng.gen_range(-1.5..1.5)),
        })
        .collect();
    let rows = n_windows * nz;
    let mut targets = Targets::default();
    for _ in 0..rows {
        targets.slr.push(rng.gen_range(0.0..1.0));
        targets.log_volume.push(rng.gen_range(0.0..3.0));
        targets.weight.push(1.0 + 2.0 * rng.gen_range(0.0f64..3.0).powi(2));
    }
    Dataset { windows, targets, n_zones: nz }
}

fn full_loss(p: &ModelParams, data: &Dataset, graph: &ev_resilience::forecast::ZoneGraph, cfg: &TailLossConfig) -> f64 {
    let refs: Vec<&FeatureWindow> = data.windows.iter().collect();
    let cache = forward_batch(p, &stack_windows(&refs).unwrap(), graph).unwrap();
    weighted_loss(&cache.slr_hat, &cache.vol_hat, &data.targets, cfg, data.targets.slr.len() as f64)
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // zones 3 km apart so graph mixing is exercised
    let graph = build_graph(&[(0.0, 0.0), (3.0, 0.0)], 5.0);
    let data = tiny_dataset(&mut rng, 4);
    let cfg = TailLossConfig { w_slr: 1.3, w_vol: 0.7, ..Default::default() };
    let mut params = ModelParams::init(ModelDims::new(2), &mut rng);
    // nonzero biases so every path carries signal
    for (name, t) in params.tensors_mut() {
        if name.contains("b") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    // chunked accumulation must agree with the single-chunk gradient
    let (loss, grads) = loss_and_gradient(&params, &data, &graph, &cfg, 3).unwrap();
    assert!((loss - full_loss(&params, &data, &graph, &cfg)).abs() < 1e-12);
    let (_, whole) = loss_and_gradient(&params, &data, &graph, &cfg, data.len()).unwrap();
    for ((_, a), (_, b)) in grads.tensors().into_iter().zip(whole.tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    let check = gradient_check(&params, &data, &graph, &cfg, 1e-5).unwrap();
    assert_eq!(check.n_params, params.n_params());
    assert!(check.worst_rel_error <= 1e-4, "{check:?}");
}
