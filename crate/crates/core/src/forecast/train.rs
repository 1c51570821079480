use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureWindow, NormStats, DEFAULT_LOOKBACK};
use super::graph::ZoneGraph;
use super::model::{backward, forward_batch, stack_windows, tail_weight, ModelDims, ModelParams, TailLossConfig, Targets};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::panel::{SplitIndex, ZoneHourPanel};
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub lookback: usize,
    /// Use every `time_stride`-th training hour as a window end.
    pub time_stride: usize,
    /// Windows per forward/backward chunk; chunks sum to one gradient.
    pub chunk_windows: usize,
    /// Windows per update. `None` takes one full-batch step per epoch;
    /// otherwise windows are shuffled each epoch and stepped in batches.
    pub batch_windows: Option<usize>,
    pub seed: u64,
    pub loss: TailLossConfig,
    /// Rescale the gradient when its L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 0.1,
            hidden: 16,
            lookback: DEFAULT_LOOKBACK,
            time_stride: 2,
            chunk_windows: 48,
            batch_windows: Some(16),
            seed: crate::seed::DEFAULT_SEED,
            loss: TailLossConfig::default(),
            max_grad_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_slr_rmse: f64,
    pub valid_vol_mae: f64,
}

/// Windows ending at `t` paired with targets at `t + 1`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub windows: Vec<FeatureWindow>,
    pub targets: Targets,
    pub n_zones: usize,
}

impl Dataset {
    /// Windows whose target hour lies in `target_hours`.
    pub fn build(
        panel: &ZoneHourPanel,
        target_hours: Range<usize>,
        stats: &NormStats,
        lookback: usize,
        stride: usize,
        loss: &TailLossConfig,
    ) -> Result<Self> {
        let slr = panel.slr().ok_or_else(|| Error::invalid("panel", "training needs an injected panel"))?;
        let s_mapped = panel.s_mapped().expect("injected panel has s_mapped");
        let nz = panel.n_zones();
        let first_end = lookback.max(target_hours.start.saturating_sub(1));
        let last_end = target_hours.end.min(panel.n_hours()).saturating_sub(1);
        let mut windows = Vec::new();
        let mut targets = Targets::default();
        for t in (first_end..last_end).step_by(stride.max(1)) {
            windows.push(featurize(panel, t, stats, lookback)?);
            for z in 0..nz {
                let i = panel.idx(t + 1, z);
                targets.slr.push(slr[i]);
                targets.log_volume.push(panel.demand()[i].ln_1p());
                targets.weight.push(tail_weight(s_mapped[i], loss));
            }
        }
        if windows.is_empty() {
            return Err(Error::Empty(format!("no windows with targets in {target_hours:?}")));
        }
        Ok(Self { windows, targets, n_zones: nz })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn chunk_targets(&self, range: Range<usize>) -> Targets {
        let rows = range.start * self.n_zones..range.end * self.n_zones;
        Targets {
            slr: self.targets.slr[rows.clone()].to_vec(),
            log_volume: self.targets.log_volume[rows.clone()].to_vec(),
            weight: self.targets.weight[rows].to_vec(),
        }
    }

    /// The windows at `order`, in that order.
    pub fn subset(&self, order: &[usize]) -> Dataset {
        let mut targets = Targets::default();
        for b in order {
            let t = self.chunk_targets(*b..b + 1);
            targets.slr.extend(t.slr);
            targets.log_volume.extend(t.log_volume);
            targets.weight.extend(t.weight);
        }
        Dataset { windows: order.iter().map(|b| self.windows[*b].clone()).collect(), targets, n_zones: self.n_zones }
    }
}

/// Full-batch loss and gradient, accumulated chunk by chunk.
pub fn loss_and_gradient(
    params: &ModelParams,
    data: &Dataset,
    graph: &ZoneGraph,
    cfg: &TailLossConfig,
    chunk_windows: usize,
) -> Result<(f64, ModelParams)> {
    let norm = data.targets.slr.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let chunk = chunk_windows.max(1);
    for start in (0..data.len()).step_by(chunk) {
        let range = start..(start + chunk).min(data.len());
        let refs: Vec<&FeatureWindow> = data.windows[range.clone()].iter().collect();
        let inputs = stack_windows(&refs)?;
        let cache = forward_batch(params, &inputs, graph)?;
        total += backward(params, &cache, &data.chunk_targets(range), cfg, norm, graph, &mut grads);
    }
    Ok((total, grads))
}

/// Predictions for every window in order: row-major `(window, zone)`.
pub fn predict_windows(
    params: &ModelParams,
    windows: &[FeatureWindow],
    graph: &ZoneGraph,
    chunk_windows: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut slr = Vec::new();
    let mut vol = Vec::new();
    for chunk in windows.chunks(chunk_windows.max(1)) {
        let refs: Vec<&FeatureWindow> = chunk.iter().collect();
        let cache = forward_batch(params, &stack_windows(&refs)?, graph)?;
        slr.extend(cache.slr_hat);
        vol.extend(cache.vol_hat);
    }
    Ok((slr, vol))
}

struct Evaluation {
    loss: f64,
    slr_rmse: f64,
    vol_mae: f64,
}

fn evaluate(params: &ModelParams, data: &Dataset, graph: &ZoneGraph, cfg: &TrainConfig) -> Result<Evaluation> {
    let (slr, logv) = predict_windows(params, &data.windows, graph, cfg.chunk_windows)?;
    let t = &data.targets;
    let n = slr.len() as f64;
    let loss = super::model::weighted_loss(&slr, &logv, t, &cfg.loss, n);
    let slr_rmse = (slr.iter().zip(&t.slr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
    let vol_mae = logv
        .iter()
        .zip(&t.log_volume)
        .map(|(a, b)| (a.exp_m1().max(0.0) - b.exp_m1()).abs())
        .sum::<f64>()
        / n;
    Ok(Evaluation { loss, slr_rmse, vol_mae })
}

/// Trained forecaster with everything needed to featurize new panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub stats: NormStats,
    pub lookback: usize,
    pub seed: u64,
    pub loss: TailLossConfig,
    pub graph_radius_km: f64,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: TrainedModel = read_json(path)?;
        if !m.params.is_finite() {
            return Err(Error::Schema { path: path.to_path_buf(), message: "non-finite weights".into() });
        }
        Ok(m)
    }

    /// Next-hour predictions for windows ending at each hour of `ends`.
    /// Returns row-major `(end, zone)` SLR and log-volume.
    pub fn predict(&self, panel: &ZoneHourPanel, graph: &ZoneGraph, ends: Range<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        let windows = ends
            .map(|t| featurize(panel, t, &self.stats, self.lookback))
            .collect::<Result<Vec<_>>>()?;
        predict_windows(&self.params, &windows, graph, 64)
    }
}

/// Fixed-rate gradient descent on the tail-weighted loss over the training
/// split. Output-layer biases start at the training target means.
pub fn train(
    panel: &ZoneHourPanel,
    graph: &ZoneGraph,
    split: &SplitIndex,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    cfg.loss.validate()?;
    let stats = NormStats::from_training(panel, split);
    let train_set = Dataset::build(panel, split.train(), &stats, cfg.lookback, cfg.time_stride, &cfg.loss)?;
    let valid_set = Dataset::build(panel, split.valid(), &stats, cfg.lookback, 1, &cfg.loss)?;

    let mut rng = stage_rng(cfg.seed, "forecast-init");
    let mut params = ModelParams::init(ModelDims::new(cfg.hidden), &mut rng);
    let mean_slr = crate::stats::mean(&train_set.targets.slr).clamp(1e-4, 1.0 - 1e-4);
    params.slr_b2[0] = (mean_slr / (1.0 - mean_slr)).ln();
    params.vol_b2[0] = crate::stats::mean(&train_set.targets.log_volume);

    let mut batch_rng = stage_rng(cfg.seed, "forecast-batches");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let valid = evaluate(&params, &valid_set, graph, cfg)?;
        let batches: Vec<Dataset> = match cfg.batch_windows {
            None => vec![train_set.clone()],
            Some(b) => {
                order.shuffle(&mut batch_rng);
                order.chunks(b.max(1)).map(|c| train_set.subset(c)).collect()
            }
        };
        let mut train_loss = 0.0;
        for batch in &batches {
            let (l, mut grads) = loss_and_gradient(&params, batch, graph, &cfg.loss, cfg.chunk_windows)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, loss: l });
            }
            train_loss += l * batch.len() as f64 / train_set.len() as f64;
            if let Some(max) = cfg.max_grad_norm {
                let norm = grads.l2_norm();
                if norm > max {
                    let scale = max / norm;
                    for (_, g) in grads.tensors_mut() {
                        g.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
            params.add_scaled(&grads, -cfg.learning_rate);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_loss: valid.loss,
            valid_slr_rmse: valid.slr_rmse,
            valid_vol_mae: valid.vol_mae,
        });
        debug!("epoch {epoch}: train {train_loss:.5} valid {:.5}", valid.loss);
    }

    Ok((
        TrainedModel {
            params,
            stats,
            lookback: cfg.lookback,
            seed: cfg.seed,
            loss: cfg.loss,
            graph_radius_km: graph.radius_km,
        },
        log,
    ))
}

pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["epoch", "train_loss", "valid_loss", "valid_slr_rmse", "valid_vol_mae"];

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = TRAIN_LOG_COLUMNS.join(",");
    text.push('\n');
    for e in log {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            e.epoch, e.train_loss, e.valid_loss, e.valid_slr_rmse, e.valid_vol_mae
        );
    }
    write_atomic(path, text.as_bytes())
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub n_params: usize,
    pub worst_rel_error: f64,
    pub worst_param: String,
}

/// Compares every analytic gradient entry with `(L(p+h) - L(p-h)) / 2h`.
/// Relative error uses `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn gradient_check(
    params: &ModelParams,
    data: &Dataset,
    graph: &ZoneGraph,
    cfg: &TailLossConfig,
    h: f64,
) -> Result<GradientCheck> {
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let (slr, logv) = predict_windows(p, &data.windows, graph, data.len())?;
        Ok(super::model::weighted_loss(&slr, &logv, &data.targets, cfg, data.targets.slr.len() as f64))
    };
    let (_, grads) = loss_and_gradient(params, data, graph, cfg, data.len())?;
    let analytic: Vec<(&str, Vec<f64>)> = grads.tensors().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
    let mut out = GradientCheck { n_params: 0, worst_rel_error: 0.0, worst_param: String::new() };
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (k, ga) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].1[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].1[k] -= h;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-6);
            out.n_params += 1;
            if rel > out.worst_rel_error {
                out.worst_rel_error = rel;
                out.worst_param = format!("{name}[{k}]");
            }
        }
    }
    Ok(out)
}
