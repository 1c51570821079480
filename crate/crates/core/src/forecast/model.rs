//! Two graph-convolution layers per hour, a GRU over the lookback window,
//! and two small heads (SLR through a logistic squash, log-volume linear).
//!
//! Windows are processed as a batch by stacking them along the row axis:
//! row `b * zones + z` is zone `z` of window `b`. Graph propagation acts on
//! each window's block; everything else is row-wise.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureWindow, N_FEATURES};
use super::graph::ZoneGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    pub fn new(hidden: usize) -> Self {
        Self { input: N_FEATURES, hidden, head_hidden: hidden }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::new(16)
    }
}

/// All learnable parameters. GRU gate blocks are laid out `[reset | update | candidate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub gcn0: Array2<f64>,
    pub gcn1: Array2<f64>,
    pub gru_wi: Array2<f64>,
    pub gru_wh: Array2<f64>,
    pub gru_bi: Array1<f64>,
    pub gru_bh: Array1<f64>,
    pub slr_w1: Array2<f64>,
    pub slr_b1: Array1<f64>,
    pub slr_w2: Array2<f64>,
    pub slr_b2: Array1<f64>,
    pub vol_w1: Array2<f64>,
    pub vol_b1: Array1<f64>,
    pub vol_w2: Array2<f64>,
    pub vol_b2: Array1<f64>,
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (f, h, k) = (dims.input, dims.hidden, dims.head_hidden);
        Self {
            dims,
            gcn0: Array2::zeros((f, h)),
            gcn1: Array2::zeros((h, h)),
            gru_wi: Array2::zeros((h, 3 * h)),
            gru_wh: Array2::zeros((h, 3 * h)),
            gru_bi: Array1::zeros(3 * h),
            gru_bh: Array1::zeros(3 * h),
            slr_w1: Array2::zeros((h, k)),
            slr_b1: Array1::zeros(k),
            slr_w2: Array2::zeros((k, 1)),
            slr_b2: Array1::zeros(1),
            vol_w1: Array2::zeros((h, k)),
            vol_b1: Array1::zeros(k),
            vol_w2: Array2::zeros((k, 1)),
            vol_b2: Array1::zeros(1),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let (f, h, k) = (dims.input, dims.hidden, dims.head_hidden);
        Self {
            gcn0: glorot(rng, f, h),
            gcn1: glorot(rng, h, h),
            gru_wi: glorot(rng, h, 3 * h),
            gru_wh: glorot(rng, h, 3 * h),
            slr_w1: glorot(rng, h, k),
            slr_w2: glorot(rng, k, 1),
            vol_w1: glorot(rng, h, k),
            vol_w2: glorot(rng, k, 1),
            ..Self::zeros(dims)
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("gcn0", self.gcn0.as_slice().unwrap()),
            ("gcn1", self.gcn1.as_slice().unwrap()),
            ("gru_wi", self.gru_wi.as_slice().unwrap()),
            ("gru_wh", self.gru_wh.as_slice().unwrap()),
            ("gru_bi", self.gru_bi.as_slice().unwrap()),
            ("gru_bh", self.gru_bh.as_slice().unwrap()),
            ("slr_w1", self.slr_w1.as_slice().unwrap()),
            ("slr_b1", self.slr_b1.as_slice().unwrap()),
            ("slr_w2", self.slr_w2.as_slice().unwrap()),
            ("slr_b2", self.slr_b2.as_slice().unwrap()),
            ("vol_w1", self.vol_w1.as_slice().unwrap()),
            ("vol_b1", self.vol_b1.as_slice().unwrap()),
            ("vol_w2", self.vol_w2.as_slice().unwrap()),
            ("vol_b2", self.vol_b2.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("gcn0", self.gcn0.as_slice_mut().unwrap()),
            ("gcn1", self.gcn1.as_slice_mut().unwrap()),
            ("gru_wi", self.gru_wi.as_slice_mut().unwrap()),
            ("gru_wh", self.gru_wh.as_slice_mut().unwrap()),
            ("gru_bi", self.gru_bi.as_slice_mut().unwrap()),
            ("gru_bh", self.gru_bh.as_slice_mut().unwrap()),
            ("slr_w1", self.slr_w1.as_slice_mut().unwrap()),
            ("slr_b1", self.slr_b1.as_slice_mut().unwrap()),
            ("slr_w2", self.slr_w2.as_slice_mut().unwrap()),
            ("slr_b2", self.slr_b2.as_slice_mut().unwrap()),
            ("vol_w1", self.vol_w1.as_slice_mut().unwrap()),
            ("vol_b1", self.vol_b1.as_slice_mut().unwrap()),
            ("vol_w2", self.vol_w2.as_slice_mut().unwrap()),
            ("vol_b2", self.vol_b2.as_slice_mut().unwrap()),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_shapes(&self) -> Result<()> {
        let (f, h, k) = (self.dims.input, self.dims.hidden, self.dims.head_hidden);
        let ok = self.gcn0.dim() == (f, h)
            && self.gcn1.dim() == (h, h)
            && self.gru_wi.dim() == (h, 3 * h)
            && self.gru_wh.dim() == (h, 3 * h)
            && self.gru_bi.len() == 3 * h
            && self.gru_bh.len() == 3 * h
            && self.slr_w1.dim() == (h, k)
            && self.slr_b1.len() == k
            && self.slr_w2.dim() == (k, 1)
            && self.slr_b2.len() == 1
            && self.vol_w1.dim() == (h, k)
            && self.vol_b1.len() == k
            && self.vol_w2.dim() == (k, 1)
            && self.vol_b2.len() == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("model params", "tensor shapes disagree with dims"))
        }
    }
}

/// Tail emphasis `1 + alpha * s^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailLossConfig {
    pub alpha: f64,
    pub beta_exp: f64,
    pub w_slr: f64,
    pub w_vol: f64,
}

impl Default for TailLossConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta_exp: 2.0, w_slr: 1.0, w_vol: 1.0 }
    }
}

impl TailLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be >= 0"));
        }
        if !(self.beta_exp > 0.0) {
            return Err(Error::invalid("beta_exp", "must be > 0"));
        }
        Ok(())
    }
}

pub fn tail_weight(s_mapped: f64, cfg: &TailLossConfig) -> f64 {
    1.0 + cfg.alpha * s_mapped.max(0.0).powf(cfg.beta_exp)
}

/// Per-row training targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub slr: Vec<f64>,
    pub log_volume: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Tail-weighted two-head loss summed over rows and divided by `norm`
/// (the total sample count, so chunks of one batch add up exactly).
pub fn weighted_loss(slr_hat: &[f64], vol_hat: &[f64], t: &Targets, cfg: &TailLossConfig, norm: f64) -> f64 {
    let mut ls = 0.0;
    let mut lv = 0.0;
    for i in 0..slr_hat.len() {
        let es = slr_hat[i] - t.slr[i];
        let ev = vol_hat[i] - t.log_volume[i];
        ls += t.weight[i] * es * es;
        lv += t.weight[i] * ev * ev;
    }
    (cfg.w_slr * ls + cfg.w_vol * lv) / norm
}

/// Mean tail-weighted loss over one batch.
pub fn loss(slr_hat: &[f64], vol_hat: &[f64], t: &Targets, cfg: &TailLossConfig) -> f64 {
    weighted_loss(slr_hat, vol_hat, t, cfg, slr_hat.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Apply the propagation operator to each window's block of rows.
fn propagate(p: ArrayView2<f64>, m: &Array2<f64>, nz: usize) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for b in 0..m.nrows() / nz {
        let rows = s![b * nz..(b + 1) * nz, ..];
        out.slice_mut(rows).assign(&p.dot(&m.slice(rows)));
    }
    out
}

fn check(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

struct StepCache {
    px: Array2<f64>,
    z1: Array2<f64>,
    ph1: Array2<f64>,
    z2: Array2<f64>,
    h_prev: Array2<f64>,
    r: Array2<f64>,
    u: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

/// Forward activations kept for the backward pass.
pub struct ForwardCache {
    steps: Vec<StepCache>,
    h_last: Array2<f64>,
    slr_pre: Array2<f64>,
    slr_act: Array2<f64>,
    vol_pre: Array2<f64>,
    vol_act: Array2<f64>,
    pub slr_hat: Vec<f64>,
    pub vol_hat: Vec<f64>,
}

/// Stack windows into per-hour `(batch * zones, features)` matrices.
pub fn stack_windows(windows: &[&FeatureWindow]) -> Result<Vec<Array2<f64>>> {
    let first = windows.first().ok_or_else(|| Error::Empty("no feature windows".into()))?;
    let (lookback, nz) = (first.lookback(), first.n_zones());
    if windows.iter().any(|w| w.lookback() != lookback || w.n_zones() != nz) {
        return Err(Error::invalid("windows", "mixed window shapes in one batch"));
    }
    let f = first.data.shape()[2];
    Ok((0..lookback)
        .map(|tau| {
            let mut x = Array2::zeros((windows.len() * nz, f));
            for (b, w) in windows.iter().enumerate() {
                x.slice_mut(s![b * nz..(b + 1) * nz, ..]).assign(&w.data.index_axis(Axis(0), tau));
            }
            x
        })
        .collect())
}

/// Batched forward pass over stacked inputs.
pub fn forward_batch(params: &ModelParams, inputs: &[Array2<f64>], graph: &ZoneGraph) -> Result<ForwardCache> {
    params.check_shapes()?;
    let nz = graph.n_zones();
    let h = params.dims.hidden;
    let rows = inputs.first().map_or(0, |x| x.nrows());
    if inputs.is_empty() || !rows.is_multiple_of(nz) {
        return Err(Error::invalid("inputs", "row count is not a multiple of the zone count"));
    }
    if inputs.iter().any(|x| x.ncols() != params.dims.input || x.nrows() != rows) {
        return Err(Error::invalid("inputs", "feature width disagrees with the model"));
    }
    let p = graph.norm_adjacency.view();
    let mut hid = Array2::<f64>::zeros((rows, h));
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let px = propagate(p, x, nz);
        let z1 = px.dot(&params.gcn0);
        check("gcn0", &z1)?;
        let h1 = z1.mapv(relu);
        let ph1 = propagate(p, &h1, nz);
        let z2 = ph1.dot(&params.gcn1);
        check("gcn1", &z2)?;
        let h2 = z2.mapv(relu);

        let gi = h2.dot(&params.gru_wi) + &params.gru_bi;
        let gh = hid.dot(&params.gru_wh) + &params.gru_bh;
        let r = Zip::from(gi.slice(s![.., 0..h]))
            .and(gh.slice(s![.., 0..h]))
            .map_collect(|a, b| sigmoid(a + b));
        let u = Zip::from(gi.slice(s![.., h..2 * h]))
            .and(gh.slice(s![.., h..2 * h]))
            .map_collect(|a, b| sigmoid(a + b));
        let gh_n = gh.slice(s![.., 2 * h..]).to_owned();
        let n = Zip::from(gi.slice(s![.., 2 * h..]))
            .and(&r)
            .and(&gh_n)
            .map_collect(|a, rr, b| (a + rr * b).tanh());
        let next = Zip::from(&u).and(&n).and(&hid).map_collect(|uu, nn, hp| (1.0 - uu) * nn + uu * hp);
        check("gru", &next)?;
        let h_prev = std::mem::replace(&mut hid, next);
        steps.push(StepCache { px, z1, ph1, z2, h_prev, r, u, n, gh_n });
    }

    let slr_pre = hid.dot(&params.slr_w1) + &params.slr_b1;
    let slr_act = slr_pre.mapv(relu);
    let slr_out = slr_act.dot(&params.slr_w2) + &params.slr_b2;
    check("slr_head", &slr_out)?;
    let vol_pre = hid.dot(&params.vol_w1) + &params.vol_b1;
    let vol_act = vol_pre.mapv(relu);
    let vol_out = vol_act.dot(&params.vol_w2) + &params.vol_b2;
    check("vol_head", &vol_out)?;

    Ok(ForwardCache {
        steps,
        h_last: hid,
        slr_pre,
        slr_act,
        vol_pre,
        vol_act,
        slr_hat: slr_out.iter().map(|v| sigmoid(*v)).collect(),
        vol_hat: vol_out.iter().copied().collect(),
    })
}

/// Predictions for one window: per-zone `(slr_hat, log_volume_hat)`.
pub fn forward(params: &ModelParams, window: &FeatureWindow, graph: &ZoneGraph) -> Result<(Vec<f64>, Vec<f64>)> {
    let inputs = stack_windows(&[window])?;
    let cache = forward_batch(params, &inputs, graph)?;
    Ok((cache.slr_hat, cache.vol_hat))
}

fn head_backward(
    d_out: &Array2<f64>,
    pre: &Array2<f64>,
    act: &Array2<f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    h_last: &Array2<f64>,
    g_w1: &mut Array2<f64>,
    g_b1: &mut Array1<f64>,
    g_w2: &mut Array2<f64>,
    g_b2: &mut Array1<f64>,
) -> Array2<f64> {
    *g_w2 += &act.t().dot(d_out);
    *g_b2 += &d_out.sum_axis(Axis(0));
    let mut d_act = d_out.dot(&w2.t());
    Zip::from(&mut d_act).and(pre).for_each(|d, p| {
        if *p <= 0.0 {
            *d = 0.0;
        }
    });
    *g_w1 += &h_last.t().dot(&d_act);
    *g_b1 += &d_act.sum_axis(Axis(0));
    d_act.dot(&w1.t())
}

/// Accumulate into `grads` the gradient of [`weighted_loss`] and return the
/// loss value.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    targets: &Targets,
    cfg: &TailLossConfig,
    norm: f64,
    graph: &ZoneGraph,
    grads: &mut ModelParams,
) -> f64 {
    let rows = cache.slr_hat.len();
    let h = params.dims.hidden;
    let nz = graph.n_zones();
    let value = weighted_loss(&cache.slr_hat, &cache.vol_hat, targets, cfg, norm);

    let d_slr_out = Array2::from_shape_fn((rows, 1), |(i, _)| {
        let y = cache.slr_hat[i];
        cfg.w_slr * 2.0 * targets.weight[i] * (y - targets.slr[i]) / norm * y * (1.0 - y)
    });
    let d_vol_out = Array2::from_shape_fn((rows, 1), |(i, _)| {
        cfg.w_vol * 2.0 * targets.weight[i] * (cache.vol_hat[i] - targets.log_volume[i]) / norm
    });
    let mut dh = head_backward(
        &d_slr_out,
        &cache.slr_pre,
        &cache.slr_act,
        &params.slr_w1,
        &params.slr_w2,
        &cache.h_last,
        &mut grads.slr_w1,
        &mut grads.slr_b1,
        &mut grads.slr_w2,
        &mut grads.slr_b2,
    );
    dh += &head_backward(
        &d_vol_out,
        &cache.vol_pre,
        &cache.vol_act,
        &params.vol_w1,
        &params.vol_w2,
        &cache.h_last,
        &mut grads.vol_w1,
        &mut grads.vol_b1,
        &mut grads.vol_w2,
        &mut grads.vol_b2,
    );

    let p_t = graph.norm_adjacency.t();
    for st in cache.steps.iter().rev() {
        let mut d_gi = Array2::<f64>::zeros((rows, 3 * h));
        let mut d_gh = Array2::<f64>::zeros((rows, 3 * h));
        let mut dh_prev = Array2::<f64>::zeros((rows, h));
        for i in 0..rows {
            for j in 0..h {
                let (r, u, n, ghn, hp) = (st.r[[i, j]], st.u[[i, j]], st.n[[i, j]], st.gh_n[[i, j]], st.h_prev[[i, j]]);
                let g = dh[[i, j]];
                let dn = g * (1.0 - u);
                let du = g * (hp - n);
                let dan = dn * (1.0 - n * n);
                let dar = dan * ghn * r * (1.0 - r);
                let dau = du * u * (1.0 - u);
                d_gi[[i, j]] = dar;
                d_gi[[i, h + j]] = dau;
                d_gi[[i, 2 * h + j]] = dan;
                d_gh[[i, j]] = dar;
                d_gh[[i, h + j]] = dau;
                d_gh[[i, 2 * h + j]] = dan * r;
                dh_prev[[i, j]] = g * u;
            }
        }
        let h2 = st.z2.mapv(relu);
        grads.gru_wi += &h2.t().dot(&d_gi);
        grads.gru_bi += &d_gi.sum_axis(Axis(0));
        grads.gru_wh += &st.h_prev.t().dot(&d_gh);
        grads.gru_bh += &d_gh.sum_axis(Axis(0));

        let mut dz2 = d_gi.dot(&params.gru_wi.t());
        Zip::from(&mut dz2).and(&st.z2).for_each(|d, z| {
            if *z <= 0.0 {
                *d = 0.0;
            }
        });
        grads.gcn1 += &st.ph1.t().dot(&dz2);
        let d_ph1 = dz2.dot(&params.gcn1.t());
        let mut dz1 = propagate(p_t, &d_ph1, nz);
        Zip::from(&mut dz1).and(&st.z1).for_each(|d, z| {
            if *z <= 0.0 {
                *d = 0.0;
            }
        });
        grads.gcn0 += &st.px.t().dot(&dz1);

        dh = dh_prev + d_gh.dot(&params.gru_wh.t());
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::graph::build_graph;
    use ndarray::Array3;

    #[test]
    fn tail_weight_examples() {
        let cfg = TailLossConfig::default();
        assert_eq!(tail_weight(3.0, &cfg), 19.0);
        assert_eq!(tail_weight(0.0, &cfg), 1.0);
        assert_eq!(tail_weight(1.0, &cfg), 3.0);
    }

    #[test]
    fn loss_examples() {
        let cfg = TailLossConfig { w_slr: 2.0, ..Default::default() };
        let t = Targets { slr: vec![0.3], log_volume: vec![1.0], weight: vec![1.0] };
        assert_eq!(loss(&[0.3], &[1.0], &t, &cfg), 0.0);
        let v = loss(&[0.4], &[1.0], &t, &cfg);
        assert!((v - 2.0 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_constant_half() {
        let g = build_graph(&[(0.0, 0.0), (1.0, 0.0), (20.0, 0.0)], 5.0);
        let params = ModelParams::zeros(ModelDims::new(4));
        let w = FeatureWindow { end_hour: 5, data: Array3::from_elem((5, 3, N_FEATURES), 0.7) };
        let (slr, vol) = forward(&params, &w, &g).unwrap();
        assert_eq!(slr, vec![0.5; 3]);
        assert_eq!(vol, vec![0.0; 3]);
    }

    #[test]
    fn slr_head_stays_in_unit_interval() {
        let mut rng = crate::seed::stage_rng(1, "test");
        let mut params = ModelParams::init(ModelDims::new(6), &mut rng);
        params.slr_b2[0] = 40.0;
        let g = build_graph(&[(0.0, 0.0), (1.0, 0.0)], 5.0);
        let w = FeatureWindow {
            end_hour: 3,
            data: Array3::from_shape_fn((3, 2, N_FEATURES), |(a, b, c)| (a + b * c) as f64 * 3.0),
        };
        let (slr, _) = forward(&params, &w, &g).unwrap();
        assert!(slr.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let g = build_graph(&[(0.0, 0.0)], 5.0);
        let mut rng = crate::seed::stage_rng(2, "test");
        let params = ModelParams::init(ModelDims::new(3), &mut rng);
        let mut data = Array3::zeros((2, 1, N_FEATURES));
        data[[0, 0, 0]] = f64::NAN;
        let err = forward(&params, &FeatureWindow { end_hour: 2, data }, &g).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref l) if l == "gcn0"), "{err}");
    }
}
