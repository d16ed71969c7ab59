//! Forecasting models whose errors the corrector learns: a neural ODE, a
//! decomposition-linear direct forecaster and an Elman RNN.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::autodiff::{Backend, Eager, Tape};
use crate::data::{sample_indices, stream_rng, Dataset, Window};
use crate::error::{Error, Result};
use crate::mlp::{fc_sizes, Activation, BoundMlp, MlpCheckpoint, MlpParams, ParamBackend};
use crate::ode::{self, SolveResult, SolverConfig, VectorField};
use crate::tensor::Tensor;
use crate::train::{run_epochs, TrainConfig, TrainLog};

// ---------------------------------------------------------------------------
// Forecast bundles

/// `x - x̂`, nudged so that `x̂ + e` rounds back to `x` when some nearby `e`
/// achieves that. Always exact when `x̂` is within a factor two of `x`.
pub fn exact_residual(x: f64, xhat: f64) -> f64 {
    let mut e = x - xhat;
    for _ in 0..8 {
        let s = xhat + e;
        if s == x {
            break;
        }
        e = if s < x { e.next_up() } else { e.next_down() };
    }
    e
}

/// A forecast paired with the truth on the same times.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    pub times: Vec<f64>,
    /// `[T, D]`
    pub forecast: Tensor,
    pub truth: Tensor,
    /// `truth - forecast`
    pub error: Tensor,
}

impl ForecastBundle {
    pub fn new(times: Vec<f64>, forecast: Tensor, truth: Tensor) -> Result<Self> {
        if forecast.shape() != truth.shape() || forecast.shape().len() != 2 || forecast.rows() != times.len() {
            return Err(Error::shape(
                "ForecastBundle",
                format!(
                    "{} times, forecast {:?}, truth {:?}",
                    times.len(),
                    forecast.shape(),
                    truth.shape()
                ),
            ));
        }
        let e = forecast
            .data()
            .iter()
            .zip(truth.data())
            .map(|(&f, &x)| exact_residual(x, f))
            .collect();
        let error = Tensor::new(forecast.shape().to_vec(), e)?;
        Ok(ForecastBundle {
            times,
            forecast,
            truth,
            error,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.forecast.cols()
    }

    pub fn select(&self, idx: &[usize]) -> ForecastBundle {
        ForecastBundle {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            forecast: self.forecast.select_rows(idx),
            truth: self.truth.select_rows(idx),
            error: self.error.select_rows(idx),
        }
    }

    pub fn head(&self, n: usize) -> ForecastBundle {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Models that roll a forecast forward from an initial state.
pub trait Forecaster {
    fn dim(&self) -> usize;

    /// `x0` is `[rows, D]`; returns one `[rows, D]` state per time.
    fn forecast(&self, x0: &Tensor, times: &[f64]) -> Result<Vec<Tensor>>;
}

/// Forecasts every trajectory of `ds` from its first state over its first
/// `horizon` points and pairs the result with the truth.
pub fn extract_forecast_bundles(
    model: &dyn Forecaster,
    ds: &Dataset,
    horizon: usize,
) -> Result<Vec<ForecastBundle>> {
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    if horizon < 2 || horizon > ds.min_len() {
        return Err(Error::invalid(
            "horizon",
            format!("{horizon} exceeds the shortest trajectory ({} points)", ds.min_len()),
        ));
    }
    let times = ds.trajectories[0].times[..horizon].to_vec();
    if ds.trajectories.iter().any(|t| t.times[..horizon] != times[..]) {
        return Err(Error::invalid("dataset", "trajectories must share their time grid"));
    }
    let x0 = Tensor::from_rows(&ds.trajectories.iter().map(|t| t.states.row(0).to_vec()).collect::<Vec<_>>())?;
    let states = model.forecast(&x0, &times)?;
    ds.trajectories
        .iter()
        .enumerate()
        .map(|(r, traj)| {
            let fc: Vec<Vec<f64>> = states.iter().map(|s| s.row(r).to_vec()).collect();
            ForecastBundle::new(times.clone(), Tensor::from_rows(&fc)?, traj.states.slice_rows(0, horizon))
        })
        .collect()
}

/// Rows `row_index` of the selected trajectories, stacked into `[B, D]`.
pub(crate) fn gather(states: &[Tensor], batch: &[usize], row_index: usize) -> Tensor {
    let d = states[0].cols();
    let mut data = Vec::with_capacity(batch.len() * d);
    for &b in batch {
        data.extend_from_slice(states[b].row(row_index));
    }
    Tensor::new(vec![batch.len(), d], data).expect("gathered rows")
}

/// Mean over `k ≥ 1` of `mse(pred[k], target[k])`.
pub fn sequence_loss<B: Backend>(b: &B, preds: &[B::V], targets: &[Tensor]) -> Result<B::V> {
    let n = preds.len();
    if n < 2 {
        return Err(Error::invalid("sequence", "loss needs at least two points"));
    }
    let terms = (1..n)
        .map(|k| b.mse(&preds[k], &b.constant(targets[k].clone())))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / (n - 1) as f64;
    b.lin_comb(&terms.iter().map(|t| (t, w)).collect::<Vec<_>>())
}

pub(crate) fn apply_step(opt: &mut Adam, params: &mut [&mut MlpParams], grads: Vec<Vec<Tensor>>) -> Result<()> {
    let flat: Vec<Tensor> = grads.into_iter().flatten().collect();
    let mut refs: Vec<&mut Tensor> = params.iter_mut().flat_map(|p| p.tensors_mut()).collect();
    opt.step(&mut refs, &flat)
}

/// Training inputs of sequence models: imputed states and the shared grid.
struct SequenceData {
    times: Vec<f64>,
    states: Vec<Tensor>,
}

impl SequenceData {
    fn new(ds: &Dataset, horizon: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("dataset", "training set is empty"));
        }
        if horizon < 2 || horizon > ds.min_len() {
            return Err(Error::invalid(
                "train_horizon",
                format!("{horizon} points requested, shortest trajectory has {}", ds.min_len()),
            ));
        }
        let times = ds.trajectories[0].times[..horizon].to_vec();
        if ds.trajectories.iter().any(|t| t.times[..horizon] != times[..]) {
            return Err(Error::invalid("dataset", "trajectories must share their time grid"));
        }
        let states = ds
            .trajectories
            .iter()
            .map(|t| t.imputed().slice_rows(0, horizon))
            .collect();
        Ok(SequenceData { times, states })
    }

    fn subset(&self, idx: &[usize]) -> SequenceData {
        SequenceData {
            times: self.times.clone(),
            states: idx.iter().map(|&i| self.states[i].clone()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Neural ODE

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub solver: SolverConfig,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            width: 100,
            depth: 2,
            activation: Activation::Tanh,
            solver: SolverConfig::default(),
        }
    }
}

/// An autonomous field `dx/dt = f(x)` given by a network.
pub struct MlpField<'a, V> {
    pub net: &'a BoundMlp<V>,
}

impl<B: Backend> VectorField<B> for MlpField<'_, B::V> {
    fn eval(&self, b: &B, _t: f64, _step_start: f64, y: &B::V) -> Result<B::V> {
        self.net.forward(b, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel {
    pub field: MlpParams,
    pub solver: SolverConfig,
}

impl NodeModel {
    pub fn new(dim: usize, cfg: &NodeConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(NodeModel {
            field: MlpParams::fc(dim, cfg.width, cfg.depth, dim, cfg.activation, rng)?,
            solver: cfg.solver.clone(),
        })
    }

    /// A model whose field is identically zero.
    pub fn zeros(dim: usize, cfg: &NodeConfig) -> Result<Self> {
        Ok(NodeModel {
            field: MlpParams::zeros(&fc_sizes(dim, cfg.width, cfg.depth, dim), cfg.activation)?,
            solver: cfg.solver.clone(),
        })
    }

    /// Integrates the bound field on any backend.
    pub fn solve<B: Backend>(
        &self,
        b: &B,
        net: &BoundMlp<B::V>,
        x0: &B::V,
        times: &[f64],
    ) -> Result<SolveResult<B::V>> {
        ode::integrate(b, &self.solver, &MlpField { net }, x0, times)
    }

    pub fn forecast_with_nfe(&self, x0: &Tensor, times: &[f64]) -> Result<(Vec<Tensor>, usize)> {
        if x0.shape().len() != 2 || x0.cols() != self.field.input_size() {
            return Err(Error::shape("node_forecast", format!("initial state {:?}", x0.shape())));
        }
        let e = Eager;
        let net = self.field.bind(&e);
        let r = self.solve(&e, &net, &e.constant(x0.clone()), times)?;
        let nfe = r.nfe;
        Ok((r.states.into_iter().map(|s| (*s).clone()).collect(), nfe))
    }
}

impl Forecaster for NodeModel {
    fn dim(&self) -> usize {
        self.field.input_size()
    }

    fn forecast(&self, x0: &Tensor, times: &[f64]) -> Result<Vec<Tensor>> {
        self.forecast_with_nfe(x0, times).map(|(s, _)| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceTrainConfig {
    /// Leading points of each trajectory used for training.
    pub train_horizon: usize,
    /// Fraction of those points kept per forward pass.
    pub observed_fraction: f64,
    pub train: TrainConfig,
}

impl Default for SequenceTrainConfig {
    fn default() -> Self {
        SequenceTrainConfig {
            train_horizon: 40,
            observed_fraction: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl SequenceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(Error::invalid("observed_fraction", "must lie in (0, 1]"));
        }
        if self.train_horizon < 2 {
            return Err(Error::invalid("train_horizon", "needs at least two points"));
        }
        Ok(())
    }
}

fn node_batch_loss<B: ParamBackend>(
    b: &B,
    model: &NodeModel,
    net: &BoundMlp<B::V>,
    data: &SequenceData,
    batch: &[usize],
    idx: &[usize],
) -> Result<(B::V, usize)> {
    let times: Vec<f64> = idx.iter().map(|&i| data.times[i]).collect();
    let x0 = b.constant(gather(&data.states, batch, idx[0]));
    let sol = model.solve(b, net, &x0, &times)?;
    let targets: Vec<Tensor> = idx.iter().map(|&i| gather(&data.states, batch, i)).collect();
    Ok((sequence_loss(b, &sol.states, &targets)?, sol.nfe))
}

/// Fits the field to multi-step rollouts from each trajectory's first point.
pub fn train_node(
    train: &Dataset,
    model_cfg: &NodeConfig,
    cfg: &SequenceTrainConfig,
) -> Result<(NodeModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.train.seed, u64::MAX);
    let model = NodeModel::new(train.dim, model_cfg, &mut rng)?;
    train_node_from(model, train, cfg)
}

/// Mini-batch optimisation state of a NODE on a fixed training set.
pub struct NodeTrainer {
    pub model: NodeModel,
    opt: Adam,
    train: SequenceData,
    val: SequenceData,
    cfg: SequenceTrainConfig,
}

impl NodeTrainer {
    pub fn new(model: NodeModel, train: &Dataset, cfg: &SequenceTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.field.input_size() != train.dim {
            return Err(Error::shape(
                "train_node",
                format!("model dimension {} against data dimension {}", model.field.input_size(), train.dim),
            ));
        }
        let all = SequenceData::new(train, cfg.train_horizon)?;
        let (tr_idx, val_idx) = cfg.train.carve_validation(train.len());
        let opt = cfg.train.optimizer(&model.field.tensors());
        Ok(NodeTrainer {
            model,
            opt,
            train: all.subset(&tr_idx),
            val: all.subset(&val_idx),
            cfg: cfg.clone(),
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.states.len()
    }

    /// One gradient step on `batch` (indices into the training side);
    /// `(epoch, k)` keys the per-pass subsampling stream.
    pub fn step(&mut self, epoch: usize, k: usize, batch: &[usize]) -> Result<(f64, usize)> {
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.train.seed ^ 0x0b5e_55ed, ((epoch as u64) << 24) | k as u64);
        let idx = sample_indices(cfg.train_horizon, cfg.observed_fraction, 2, &mut rng)?;
        let tape = Tape::new();
        let net = self.model.field.bind(&tape);
        let (loss, nfe) = node_batch_loss(&tape, &self.model, &net, &self.train, batch, &idx)
            .map_err(|e| diverged("NODE", epoch, k, e))?;
        let lv = tape.value(&loss).data()[0];
        let grads = tape.backward(loss)?;
        apply_step(&mut self.opt, &mut [&mut self.model.field], vec![net.grads(&grads)?])
            .map_err(|e| diverged("NODE", epoch, k, e))?;
        Ok((lv, nfe))
    }

    /// Full-horizon loss on the validation carve-out (training side when
    /// the carve-out is empty).
    pub fn validation_loss(&self) -> Result<f64> {
        let data = if self.val.states.is_empty() { &self.train } else { &self.val };
        let e = Eager;
        let net = self.model.field.bind(&e);
        let batch: Vec<usize> = (0..data.states.len()).collect();
        let full: Vec<usize> = (0..self.cfg.train_horizon).collect();
        let (l, _) = node_batch_loss(&e, &self.model, &net, data, &batch, &full)?;
        Ok(l.data()[0])
    }

    pub fn epoch(&mut self, epoch: usize) -> Result<(f64, f64, usize, Vec<usize>)> {
        let mut loss_sum = 0.0;
        let mut passes = Vec::new();
        for (k, batch) in self.cfg.train.batches(self.train_len(), epoch).iter().enumerate() {
            let (l, nfe) = self.step(epoch, k, batch)?;
            loss_sum += l * batch.len() as f64;
            passes.push(nfe);
        }
        let train_loss = loss_sum / self.train_len() as f64;
        let val_loss = self
            .validation_loss()
            .map_err(|e| diverged("NODE", epoch, usize::MAX, e))?;
        Ok((train_loss, val_loss, passes.iter().sum(), passes))
    }
}

/// Continues training an existing model.
pub fn train_node_from(model: NodeModel, train: &Dataset, cfg: &SequenceTrainConfig) -> Result<(NodeModel, TrainLog)> {
    let trainer = RefCell::new(NodeTrainer::new(model, train, cfg)?);
    let mut best = trainer.borrow().model.clone();
    let log = run_epochs(
        &cfg.train,
        |epoch| trainer.borrow_mut().epoch(epoch),
        || best = trainer.borrow().model.clone(),
    )?;
    Ok((best, log))
}

pub(crate) fn diverged(what: &str, epoch: usize, batch: usize, e: Error) -> Error {
    if e.is_numerical() {
        let at = if batch == usize::MAX {
            "validation".to_string()
        } else {
            format!("batch {batch}")
        };
        Error::Divergence(format!("{what} training, epoch {epoch}, {at}: {e}"))
    } else {
        e
    }
}

// ---------------------------------------------------------------------------
// DLinear

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DLinearConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub kernel: usize,
}

impl Default for DLinearConfig {
    fn default() -> Self {
        DLinearConfig {
            lookback: 336,
            horizon: 96,
            kernel: 25,
        }
    }
}

impl DLinearConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel", format!("moving-average kernel must be odd, got {}", self.kernel)));
        }
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::invalid("lookback", "lookback and horizon must be positive"));
        }
        Ok(())
    }
}

/// Channel-shared trend and seasonal linear maps from lookback to horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct DLinearModel {
    pub lookback: usize,
    pub horizon: usize,
    pub kernel: usize,
    pub trend: MlpParams,
    pub seasonal: MlpParams,
}

impl DLinearModel {
    /// Weights `1/L`, biases zero: a constant window maps to itself.
    pub fn new(cfg: &DLinearConfig) -> Result<Self> {
        cfg.validate()?;
        let mut branch = MlpParams::zeros(&[cfg.lookback, cfg.horizon], Activation::Identity)?;
        let w = 1.0 / cfg.lookback as f64;
        branch.layers_mut()[0].weight.data_mut().iter_mut().for_each(|v| *v = w);
        Ok(DLinearModel {
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            kernel: cfg.kernel,
            trend: branch.clone(),
            seasonal: branch,
        })
    }

    /// Moving average with replicated end values, and the remainder.
    pub fn decompose(&self, window: &Tensor) -> Result<(Tensor, Tensor)> {
        decompose(window, self.kernel)
    }

    fn branch_inputs(&self, windows: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        let l = self.lookback;
        let mut trend = Vec::new();
        let mut seasonal = Vec::new();
        for w in windows {
            if w.shape().len() != 2 || w.rows() != l {
                return Err(Error::shape(
                    "dlinear_forecast",
                    format!("window {:?}, lookback {l}", w.shape()),
                ));
            }
            let (t, s) = self.decompose(w)?;
            for c in 0..w.cols() {
                trend.extend((0..l).map(|i| t.row(i)[c]));
                seasonal.extend((0..l).map(|i| s.row(i)[c]));
            }
        }
        let rows = trend.len() / l;
        Ok((Tensor::new(vec![rows, l], trend)?, Tensor::new(vec![rows, l], seasonal)?))
    }

    /// `[windows · D, H]`: one row per (window, channel).
    fn forward_rows<B: ParamBackend>(
        &self,
        b: &B,
        nets: &(BoundMlp<B::V>, BoundMlp<B::V>),
        trend: &Tensor,
        seasonal: &Tensor,
    ) -> Result<B::V> {
        let t = nets.0.forward(b, &b.constant(trend.clone()))?;
        let s = nets.1.forward(b, &b.constant(seasonal.clone()))?;
        b.add(&t, &s)
    }

    /// Horizon forecast `[H, D]` of one `[L, D]` window.
    pub fn forecast(&self, window: &Tensor) -> Result<Tensor> {
        Ok(self.forecast_many(&[window])?.remove(0))
    }

    pub fn forecast_many(&self, windows: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (trend, seasonal) = self.branch_inputs(windows)?;
        let e = Eager;
        let nets = (self.trend.bind(&e), self.seasonal.bind(&e));
        let rows = self.forward_rows(&e, &nets, &trend, &seasonal)?;
        let mut out = Vec::with_capacity(windows.len());
        let mut r = 0;
        for w in windows {
            let d = w.cols();
            let mut f = Tensor::zeros(&[self.horizon, d]);
            for c in 0..d {
                for h in 0..self.horizon {
                    f.row_mut(h)[c] = rows.row(r + c)[h];
                }
            }
            r += d;
            out.push(f);
        }
        Ok(out)
    }
}

pub fn decompose(window: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    if kernel % 2 == 0 {
        return Err(Error::invalid("kernel", "moving-average kernel must be odd"));
    }
    let (l, d) = (window.rows(), window.cols());
    let half = (kernel / 2) as isize;
    let mut trend = Tensor::zeros(&[l, d]);
    for c in 0..d {
        for i in 0..l as isize {
            let s: f64 = (i - half..=i + half)
                .map(|j| window.row(j.clamp(0, l as isize - 1) as usize)[c])
                .sum();
            trend.row_mut(i as usize)[c] = s / kernel as f64;
        }
    }
    let seasonal = window.sub(&trend)?;
    Ok((trend, seasonal))
}

fn window_rows(windows: &[&Window]) -> Tensor {
    let h = windows[0].target.rows();
    let mut data = Vec::new();
    for w in windows {
        for c in 0..w.target.cols() {
            data.extend((0..h).map(|i| w.target.row(i)[c]));
        }
    }
    let rows = data.len() / h;
    Tensor::new(vec![rows, h], data).expect("window rows")
}

/// Direct multi-step MSE training on horizon windows.
pub fn train_dlinear(
    train: &[Window],
    val: &[Window],
    model_cfg: &DLinearConfig,
    cfg: &TrainConfig,
) -> Result<(DLinearModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("windows", "no training windows"));
    }
    let model = DLinearModel::new(model_cfg)?;
    let mut opt = cfg.optimizer(&[model.trend.tensors(), model.seasonal.tensors()].concat());
    let prep = |ws: &[&Window], m: &DLinearModel| -> Result<(Tensor, Tensor, Tensor)> {
        let inputs: Vec<&Tensor> = ws.iter().map(|w| &w.input).collect();
        let (t, s) = m.branch_inputs(&inputs)?;
        Ok((t, s, window_rows(ws)))
    };
    let val_refs: Vec<&Window> = val.iter().collect();
    let val_data = if val.is_empty() { None } else { Some(prep(&val_refs, &model)?) };
    let cell = RefCell::new(model);
    let mut best = cell.borrow().clone();
    let log = run_epochs(
        cfg,
        |epoch| {
            let mut guard = cell.borrow_mut();
            let model = &mut *guard;
            let mut loss_sum = 0.0;
            for (k, batch) in cfg.batches(train.len(), epoch).iter().enumerate() {
                let ws: Vec<&Window> = batch.iter().map(|&i| &train[i]).collect();
                let (t, s, y) = prep(&ws, &model)?;
                let tape = Tape::new();
                let nets = (model.trend.bind(&tape), model.seasonal.bind(&tape));
                let out = model.forward_rows(&tape, &nets, &t, &s)?;
                let loss = tape.mse(&out, &tape.constant(y))?;
                let lv = tape.value(&loss).data()[0];
                let g = tape.backward(loss)?;
                let grads = vec![nets.0.grads(&g)?, nets.1.grads(&g)?];
                let (tr, se) = (&mut model.trend, &mut model.seasonal);
                apply_step(&mut opt, &mut [tr, se], grads).map_err(|e| diverged("DLinear", epoch, k, e))?;
                loss_sum += lv * batch.len() as f64;
            }
            let train_loss = loss_sum / train.len() as f64;
            let val_loss = match &val_data {
                None => train_loss,
                Some((t, s, y)) => {
                    let e = Eager;
                    let nets = (model.trend.bind(&e), model.seasonal.bind(&e));
                    let out = model.forward_rows(&e, &nets, t, s)?;
                    e.mse(&out, &e.constant(y.clone()))?.data()[0]
                }
            };
            Ok((train_loss, val_loss, 0, Vec::new()))
        },
        || best = cell.borrow().clone(),
    )?;
    Ok((best, log))
}

/// Bundles of `H + 1` points: the last lookback value (forecast equals
/// truth there) followed by the horizon forecast, on integer times.
pub fn dlinear_bundles(model: &DLinearModel, windows: &[Window]) -> Result<Vec<ForecastBundle>> {
    let inputs: Vec<&Tensor> = windows.iter().map(|w| &w.input).collect();
    let forecasts = if inputs.is_empty() { Vec::new() } else { model.forecast_many(&inputs)? };
    windows
        .iter()
        .zip(forecasts)
        .map(|(w, f)| {
            let anchor = w.input.slice_rows(w.input.rows() - 1, w.input.rows());
            let times = (0..=model.horizon).map(|i| i as f64).collect();
            let forecast = Tensor::from_rows(
                &std::iter::once(anchor.row(0).to_vec())
                    .chain((0..f.rows()).map(|i| f.row(i).to_vec()))
                    .collect::<Vec<_>>(),
            )?;
            let truth = Tensor::from_rows(
                &std::iter::once(anchor.row(0).to_vec())
                    .chain((0..w.target.rows()).map(|i| w.target.row(i).to_vec()))
                    .collect::<Vec<_>>(),
            )?;
            ForecastBundle::new(times, forecast, truth)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Elman RNN

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnnConfig {
    pub hidden: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig { hidden: 64 }
    }
}

/// `h' = tanh(W_ih x + b_ih + W_hh h + b_hh)`, `x' = W_hy h' + b_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnModel {
    pub input: MlpParams,
    pub recurrent: MlpParams,
    pub output: MlpParams,
}

struct BoundRnn<V> {
    input: BoundMlp<V>,
    recurrent: BoundMlp<V>,
    output: BoundMlp<V>,
}

impl RnnModel {
    pub fn new(dim: usize, cfg: &RnnConfig, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.hidden;
        Ok(RnnModel {
            input: MlpParams::init(&[dim, h], Activation::Identity, rng)?,
            recurrent: MlpParams::init(&[h, h], Activation::Identity, rng)?,
            output: MlpParams::init(&[h, dim], Activation::Identity, rng)?,
        })
    }

    pub fn zeros(dim: usize, cfg: &RnnConfig) -> Result<Self> {
        let h = cfg.hidden;
        Ok(RnnModel {
            input: MlpParams::zeros(&[dim, h], Activation::Identity)?,
            recurrent: MlpParams::zeros(&[h, h], Activation::Identity)?,
            output: MlpParams::zeros(&[h, dim], Activation::Identity)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.input_size()
    }

    fn bind<B: ParamBackend>(&self, b: &B) -> BoundRnn<B::V> {
        BoundRnn {
            input: self.input.bind(b),
            recurrent: self.recurrent.bind(b),
            output: self.output.bind(b),
        }
    }

    fn params_mut(&mut self) -> [&mut MlpParams; 3] {
        [&mut self.input, &mut self.recurrent, &mut self.output]
    }

    /// One cell application: returns `(x', h')`.
    pub fn cell(&self, x: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = Eager;
        let net = self.bind(&e);
        let (x, h) = cell_on(&e, &net, &e.constant(x.clone()), &e.constant(h.clone()))?;
        Ok(((*x).clone(), (*h).clone()))
    }

    /// Free-running rollout of `steps` points starting at `x0`.
    pub fn rollout(&self, x0: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
        let e = Eager;
        let net = self.bind(&e);
        let mut h = e.constant(Tensor::zeros(&[x0.rows(), self.hidden()]));
        let mut x = e.constant(x0.clone());
        let mut out = vec![x0.clone()];
        for _ in 1..steps {
            let (nx, nh) = cell_on(&e, &net, &x, &h)?;
            out.push((*nx).clone());
            x = nx;
            h = nh;
        }
        Ok(out)
    }
}

fn cell_on<B: Backend>(b: &B, net: &BoundRnn<B::V>, x: &B::V, h: &B::V) -> Result<(B::V, B::V)> {
    let pre = b.add(&net.input.forward(b, x)?, &net.recurrent.forward(b, h)?)?;
    let h = b.activate(&pre, Activation::Tanh)?;
    Ok((net.output.forward(b, &h)?, h))
}

impl Forecaster for RnnModel {
    fn dim(&self) -> usize {
        self.input.input_size()
    }

    fn forecast(&self, x0: &Tensor, times: &[f64]) -> Result<Vec<Tensor>> {
        self.rollout(x0, times.len())
    }
}

fn rnn_teacher_loss<B: ParamBackend>(
    b: &B,
    model: &RnnModel,
    net: &BoundRnn<B::V>,
    data: &SequenceData,
    batch: &[usize],
) -> Result<B::V> {
    let n = data.times.len();
    let targets: Vec<Tensor> = (0..n).map(|i| gather(&data.states, batch, i)).collect();
    let mut h = b.constant(Tensor::zeros(&[batch.len(), model.hidden()]));
    let mut preds = vec![b.constant(targets[0].clone())];
    for x in targets.iter().take(n - 1) {
        let (nx, nh) = cell_on(b, net, &b.constant(x.clone()), &h)?;
        preds.push(nx);
        h = nh;
    }
    sequence_loss(b, &preds, &targets)
}

/// Teacher-forced training on the leading `train_horizon` points.
pub fn train_rnn(train: &Dataset, model_cfg: &RnnConfig, cfg: &SequenceTrainConfig) -> Result<(RnnModel, TrainLog)> {
    cfg.validate()?;
    if cfg.observed_fraction != 1.0 {
        return Err(Error::invalid("observed_fraction", "the RNN predictor needs regularly sampled data"));
    }
    let all = SequenceData::new(train, cfg.train_horizon)?;
    let (tr_idx, val_idx) = cfg.train.carve_validation(train.len());
    let (tr, val) = (all.subset(&tr_idx), all.subset(&val_idx));
    let model = RnnModel::new(train.dim, model_cfg, &mut stream_rng(cfg.train.seed, u64::MAX))?;
    let mut opt = cfg
        .train
        .optimizer(&[model.input.tensors(), model.recurrent.tensors(), model.output.tensors()].concat());
    let cell = RefCell::new(model);
    let mut best = cell.borrow().clone();
    let log = run_epochs(
        &cfg.train,
        |epoch| {
            let mut guard = cell.borrow_mut();
            let model = &mut *guard;
            let mut loss_sum = 0.0;
            for (k, batch) in cfg.train.batches(tr.states.len(), epoch).iter().enumerate() {
                let tape = Tape::new();
                let net = model.bind(&tape);
                let loss = rnn_teacher_loss(&tape, &model, &net, &tr, batch).map_err(|e| diverged("RNN", epoch, k, e))?;
                let lv = tape.value(&loss).data()[0];
                let g = tape.backward(loss)?;
                let grads = vec![net.input.grads(&g)?, net.recurrent.grads(&g)?, net.output.grads(&g)?];
                apply_step(&mut opt, &mut model.params_mut(), grads).map_err(|e| diverged("RNN", epoch, k, e))?;
                loss_sum += lv * batch.len() as f64;
            }
            let train_loss = loss_sum / tr.states.len() as f64;
            let val_loss = if val.states.is_empty() {
                train_loss
            } else {
                let e = Eager;
                let net = model.bind(&e);
                let batch: Vec<usize> = (0..val.states.len()).collect();
                rnn_teacher_loss(&e, &model, &net, &val, &batch)?.data()[0]
            };
            Ok((train_loss, val_loss, 0, Vec::new()))
        },
        || best = cell.borrow().clone(),
    )?;
    Ok((best, log))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Node(NodeModel),
    DLinear(DLinearModel),
    Rnn(RnnModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorCheckpoint {
    Node {
        field: MlpCheckpoint,
        solver: SolverConfig,
    },
    Dlinear {
        lookback: usize,
        horizon: usize,
        kernel: usize,
        trend: MlpCheckpoint,
        seasonal: MlpCheckpoint,
    },
    Rnn {
        input: MlpCheckpoint,
        recurrent: MlpCheckpoint,
        output: MlpCheckpoint,
    },
}

impl Predictor {
    pub fn kind(&self) -> &'static str {
        match self {
            Predictor::Node(_) => "node",
            Predictor::DLinear(_) => "dlinear",
            Predictor::Rnn(_) => "rnn",
        }
    }

    pub fn as_forecaster(&self) -> Option<&dyn Forecaster> {
        match self {
            Predictor::Node(m) => Some(m),
            Predictor::Rnn(m) => Some(m),
            Predictor::DLinear(_) => None,
        }
    }

    pub fn to_checkpoint(&self) -> PredictorCheckpoint {
        match self {
            Predictor::Node(m) => PredictorCheckpoint::Node {
                field: m.field.to_checkpoint(),
                solver: m.solver.clone(),
            },
            Predictor::DLinear(m) => PredictorCheckpoint::Dlinear {
                lookback: m.lookback,
                horizon: m.horizon,
                kernel: m.kernel,
                trend: m.trend.to_checkpoint(),
                seasonal: m.seasonal.to_checkpoint(),
            },
            Predictor::Rnn(m) => PredictorCheckpoint::Rnn {
                input: m.input.to_checkpoint(),
                recurrent: m.recurrent.to_checkpoint(),
                output: m.output.to_checkpoint(),
            },
        }
    }

    pub fn from_checkpoint(c: &PredictorCheckpoint) -> Result<Self> {
        Ok(match c {
            PredictorCheckpoint::Node { field, solver } => Predictor::Node(NodeModel {
                field: MlpParams::from_checkpoint(field)?,
                solver: solver.clone(),
            }),
            PredictorCheckpoint::Dlinear {
                lookback,
                horizon,
                kernel,
                trend,
                seasonal,
            } => Predictor::DLinear(DLinearModel {
                lookback: *lookback,
                horizon: *horizon,
                kernel: *kernel,
                trend: MlpParams::from_checkpoint(trend)?,
                seasonal: MlpParams::from_checkpoint(seasonal)?,
            }),
            PredictorCheckpoint::Rnn {
                input,
                recurrent,
                output,
            } => Predictor::Rnn(RnnModel {
                input: MlpParams::from_checkpoint(input)?,
                recurrent: MlpParams::from_checkpoint(recurrent)?,
                output: MlpParams::from_checkpoint(output)?,
            }),
        })
    }
}
