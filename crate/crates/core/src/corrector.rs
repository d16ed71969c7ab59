//! Neural CDE corrector: learns a predictor's error trajectory from the
//! forecast alone, plus a pointwise MLP baseline and alternating training.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adam::Adam;
use crate::autodiff::{Backend, Eager, Tape};
use crate::data::{sample_indices, stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::mlp::{Activation, BoundMlp, MlpCheckpoint, MlpParams, ParamBackend};
use crate::ode::{self, SolveResult, SolverConfig, VectorField};
use crate::path::{ControlPath, Scheme};
use crate::predictors::{
    apply_step, diverged, extract_forecast_bundles, gather, sequence_loss, ForecastBundle, NodeModel, NodeTrainer,
    SequenceTrainConfig,
};
use crate::tensor::Tensor;
use crate::train::{run_epochs, TrainConfig, TrainLog};

/// A fully connected block with `depth` hidden layers of `width` units,
/// written `FC(width)_depth`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fc {
    pub width: usize,
    pub depth: usize,
}

impl Fc {
    pub const fn new(width: usize, depth: usize) -> Self {
        Fc { width, depth }
    }
}

impl fmt::Display for Fc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FC({})_{}", self.width, self.depth)
    }
}

impl FromStr for Fc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("network", format!("expected FC(width)_depth, got {s:?}"));
        let t = s.trim().to_ascii_lowercase();
        let rest = t.strip_prefix("fc(").ok_or_else(bad)?;
        let (w, d) = rest.split_once(")_").ok_or_else(bad)?;
        let fc = Fc {
            width: w.parse().map_err(|_| bad())?,
            depth: d.parse().map_err(|_| bad())?,
        };
        if fc.width == 0 {
            return Err(bad());
        }
        Ok(fc)
    }
}

impl Serialize for Fc {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fc {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    /// Hidden state width `C`.
    pub hidden: usize,
    pub init: Fc,
    pub field: Fc,
    pub decoder: Fc,
    pub activation: Activation,
    pub interpolation: Scheme,
    pub solver: SolverConfig,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            hidden: 11,
            init: Fc::new(50, 1),
            field: Fc::new(400, 4),
            decoder: Fc::new(400, 4),
            activation: Activation::Tanh,
            interpolation: Scheme::Hermite,
            solver: SolverConfig::default(),
        }
    }
}

impl CorrectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        self.solver.validate()
    }
}

/// `z(t₀) = ζ(x̂₀, t₀)`, `dz = f_θ(z) dX`, `ê_i = ξ(z(t_i))` for `i ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorModel {
    pub dim: usize,
    pub hidden: usize,
    pub interpolation: Scheme,
    pub solver: SolverConfig,
    pub zeta: MlpParams,
    /// Output is `C·(D+1)`, read row-major as a `C×(D+1)` matrix after a tanh.
    pub field: MlpParams,
    pub decoder: MlpParams,
}

pub struct BoundCorrector<V> {
    pub zeta: BoundMlp<V>,
    pub field: BoundMlp<V>,
    pub decoder: BoundMlp<V>,
}

impl BoundCorrector<crate::autodiff::Var> {
    pub fn grads(&self, g: &crate::autodiff::Gradients) -> Result<Vec<Vec<Tensor>>> {
        Ok(vec![self.zeta.grads(g)?, self.field.grads(g)?, self.decoder.grads(g)?])
    }
}

impl CorrectorModel {
    pub fn new(dim: usize, cfg: &CorrectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.hidden, dim + 1);
        let act = cfg.activation;
        Ok(CorrectorModel {
            dim,
            hidden: c,
            interpolation: cfg.interpolation,
            solver: cfg.solver.clone(),
            zeta: MlpParams::fc(k, cfg.init.width, cfg.init.depth, c, act, rng)?,
            field: MlpParams::fc(c, cfg.field.width, cfg.field.depth, c * k, act, rng)?,
            decoder: MlpParams::fc(c, cfg.decoder.width, cfg.decoder.depth, dim, act, rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k) = (self.hidden, self.dim + 1);
        let ok = self.zeta.input_size() == k
            && self.zeta.output_size() == c
            && self.field.input_size() == c
            && self.field.output_size() == c * k
            && self.decoder.input_size() == c
            && self.decoder.output_size() == self.dim;
        if !ok {
            return Err(Error::shape(
                "CorrectorModel",
                format!(
                    "C={c}, D={}: ζ {:?}, f_θ {:?}, ξ {:?}",
                    self.dim,
                    self.zeta.sizes(),
                    self.field.sizes(),
                    self.decoder.sizes()
                ),
            ));
        }
        Ok(())
    }

    pub fn bind<B: ParamBackend>(&self, b: &B) -> BoundCorrector<B::V> {
        BoundCorrector {
            zeta: self.zeta.bind(b),
            field: self.field.bind(b),
            decoder: self.decoder.bind(b),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        [self.zeta.tensors(), self.field.tensors(), self.decoder.tensors()].concat()
    }

    fn params_mut(&mut self) -> [&mut MlpParams; 3] {
        [&mut self.zeta, &mut self.field, &mut self.decoder]
    }

    /// Predicted errors `[T, D]` for one forecast `[T, D]` on `times`.
    pub fn forward(&self, times: &[f64], forecast: &Tensor) -> Result<Tensor> {
        let knots: Vec<Tensor> = (0..forecast.rows()).map(|i| forecast.slice_rows(i, i + 1)).collect();
        let (e, _) = self.forward_knots(times, &knots)?;
        Ok(stack_rows(&e, 0))
    }

    /// Batched inference: `knots[i]` is the `[rows, D]` forecast at `times[i]`.
    pub fn forward_knots(&self, times: &[f64], knots: &[Tensor]) -> Result<(Vec<Tensor>, usize)> {
        let e = Eager;
        let nets = self.bind(&e);
        let (out, nfe) = corrector_forward(&e, self, &nets, times, knots)?;
        Ok((out.into_iter().map(|v| (*v).clone()).collect(), nfe))
    }
}

/// Row `r` of each per-time `[rows, D]` tensor, stacked into `[T, D]`.
fn stack_rows(per_time: &[Tensor], r: usize) -> Tensor {
    let d = per_time[0].cols();
    let data = per_time.iter().flat_map(|t| t.row(r).to_vec()).collect();
    Tensor::new(vec![per_time.len(), d], data).expect("stacked rows")
}

/// Per-time knots `[rows, D]` of a batch of `[T, D]` series.
fn to_knots(series: &[&Tensor]) -> Vec<Tensor> {
    let states: Vec<Tensor> = series.iter().map(|s| (*s).clone()).collect();
    let all: Vec<usize> = (0..states.len()).collect();
    (0..states[0].rows()).map(|i| gather(&states, &all, i)).collect()
}

pub fn init_hidden<B: Backend>(b: &B, model: &CorrectorModel, nets: &BoundCorrector<B::V>, x0: &Tensor, t0: f64) -> Result<B::V> {
    if x0.shape().len() != 2 || x0.cols() != model.dim {
        return Err(Error::shape(
            "init_hidden",
            format!("initial forecast {:?}, expected [rows, {}]", x0.shape(), model.dim),
        ));
    }
    let input = x0.concat_cols(&Tensor::full(&[x0.rows(), 1], t0))?;
    nets.zeta.forward(b, &b.constant(input))
}

/// `dz/ds = f_θ(z) · dX/ds` on the segment where the step started.
pub struct CdeField<'a, V> {
    pub net: &'a BoundMlp<V>,
    pub path: &'a ControlPath,
}

impl<B: Backend> VectorField<B> for CdeField<'_, B::V> {
    fn eval(&self, b: &B, t: f64, step_start: f64, z: &B::V) -> Result<B::V> {
        let seg = self.path.segment_index(step_start)?;
        let dx = self.path.derivative_on(seg, t)?;
        let m = b.activate(&self.net.forward(b, z)?, Activation::Tanh)?;
        b.row_contract(&m, &b.constant(dx))
    }

    fn fsal_across_eval_times(&self) -> bool {
        self.path.scheme() == Scheme::Hermite
    }
}

pub fn cde_integrate<B: Backend>(
    b: &B,
    model: &CorrectorModel,
    nets: &BoundCorrector<B::V>,
    path: &ControlPath,
    z0: &B::V,
    times: &[f64],
) -> Result<SolveResult<B::V>> {
    let field = CdeField { net: &nets.field, path };
    ode::integrate(b, &model.solver, &field, z0, times)
}

/// `ê_0 = 0`; the decoder maps every later hidden state to an error.
pub fn decode_errors<B: Backend>(b: &B, model: &CorrectorModel, nets: &BoundCorrector<B::V>, states: &[B::V]) -> Result<Vec<B::V>> {
    let Some(first) = states.first() else {
        return Ok(Vec::new());
    };
    let z0 = b.value(first);
    if z0.cols() != model.hidden {
        return Err(Error::shape("decode_errors", format!("hidden states {:?}, C = {}", z0.shape(), model.hidden)));
    }
    let mut out = vec![b.constant(Tensor::zeros(&[z0.rows(), model.dim]))];
    for z in &states[1..] {
        out.push(nets.decoder.forward(b, z)?);
    }
    Ok(out)
}

/// Path fit, hidden initialisation, integration and decoding. Returns the
/// predicted errors at `times` and the solver's NFE.
pub fn corrector_forward<B: Backend>(
    b: &B,
    model: &CorrectorModel,
    nets: &BoundCorrector<B::V>,
    times: &[f64],
    knots: &[Tensor],
) -> Result<(Vec<B::V>, usize)> {
    if times.len() < 2 {
        return Err(Error::invalid("forecast", "the corrector needs at least two forecast points"));
    }
    let path = ControlPath::fit_batch(times, knots, model.interpolation)?;
    let z0 = init_hidden(b, model, nets, &knots[0], times[0])?;
    let sol = cde_integrate(b, model, nets, &path, &z0, times)?;
    Ok((decode_errors(b, model, nets, &sol.states)?, sol.nfe))
}

/// `x̂ + ê`.
pub fn correct(forecast: &Tensor, errors: &Tensor) -> Result<Tensor> {
    forecast.add(errors)
}

// ---------------------------------------------------------------------------
// Regularisation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationConfig {
    /// Fraction of points kept in each forward pass.
    pub kappa: f64,
    /// Largest number of trailing points dropped in each forward pass.
    pub eta: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig { kappa: 1.0, eta: 0 }
    }
}

impl RegularizationConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::invalid("kappa", format!("must lie in (0, 1], got {}", self.kappa)));
        }
        if self.eta + 4 > len {
            return Err(Error::invalid(
                "eta",
                format!("{} exceeds {} for a {len}-point horizon", self.eta, len.saturating_sub(4)),
            ));
        }
        Ok(())
    }
}

/// `k ~ Uniform{0, …, η}` for a `len`-point forecast.
pub fn sample_tail_drop(eta: usize, len: usize, rng: &mut impl Rng) -> Result<usize> {
    if eta + 4 > len {
        return Err(Error::invalid(
            "eta",
            format!("{eta} leaves fewer than four of {len} points"),
        ));
    }
    Ok(rng.gen_range(0..=eta))
}

/// Sorted retained indices of a `len`-point forecast, index 0 included.
pub fn sparsify_path(len: usize, kappa: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::invalid("kappa", format!("must lie in (0, 1], got {kappa}")));
    }
    sample_indices(len, kappa, 4, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorTrainConfig {
    pub train_horizon: usize,
    /// Simulated irregular sampling applied before `kappa`.
    pub observed_fraction: f64,
    pub reg: RegularizationConfig,
    pub train: TrainConfig,
}

impl Default for CorrectorTrainConfig {
    fn default() -> Self {
        CorrectorTrainConfig {
            train_horizon: 50,
            observed_fraction: 1.0,
            reg: RegularizationConfig::default(),
            train: TrainConfig {
                batch_size: 256,
                ..TrainConfig::default()
            },
        }
    }
}

impl CorrectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(Error::invalid("observed_fraction", "must lie in (0, 1]"));
        }
        self.reg.validate(self.train_horizon)
    }

    /// Indices of the training horizon used by one forward pass: the tail
    /// drop, then simulated irregular sampling, then path sparsification.
    pub fn pass_indices(&self, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let k = sample_tail_drop(self.reg.eta, self.train_horizon, rng)?;
        let observed = sample_indices(self.train_horizon - k, self.observed_fraction, 4, rng)?;
        let kept = sparsify_path(observed.len(), self.reg.kappa, rng)?;
        Ok(kept.into_iter().map(|j| observed[j]).collect())
    }
}

/// Forecasts and true errors over the leading training horizon.
#[derive(Clone)]
struct ErrorData {
    times: Vec<f64>,
    forecast: Vec<Tensor>,
    error: Vec<Tensor>,
}

impl ErrorData {
    fn new(bundles: &[ForecastBundle], horizon: usize) -> Result<Self> {
        let Some(first) = bundles.first() else {
            return Err(Error::invalid("bundles", "no forecast bundles to train on"));
        };
        if bundles.iter().any(|b| b.len() < horizon) {
            return Err(Error::invalid(
                "train_horizon",
                format!("{horizon} points requested, shortest bundle is shorter"),
            ));
        }
        let times = first.times[..horizon].to_vec();
        if bundles.iter().any(|b| b.times[..horizon] != times[..]) {
            return Err(Error::invalid("bundles", "bundles must share their time grid"));
        }
        Ok(ErrorData {
            times,
            forecast: bundles.iter().map(|b| b.forecast.slice_rows(0, horizon)).collect(),
            error: bundles.iter().map(|b| b.error.slice_rows(0, horizon)).collect(),
        })
    }

    fn len(&self) -> usize {
        self.forecast.len()
    }

    fn subset(&self, idx: &[usize]) -> ErrorData {
        ErrorData {
            times: self.times.clone(),
            forecast: idx.iter().map(|&i| self.forecast[i].clone()).collect(),
            error: idx.iter().map(|&i| self.error[i].clone()).collect(),
        }
    }
}

fn corrector_loss<B: Backend>(
    b: &B,
    model: &CorrectorModel,
    nets: &BoundCorrector<B::V>,
    data: &ErrorData,
    batch: &[usize],
    idx: &[usize],
) -> Result<(B::V, usize)> {
    let times: Vec<f64> = idx.iter().map(|&i| data.times[i]).collect();
    let knots: Vec<Tensor> = idx.iter().map(|&i| gather(&data.forecast, batch, i)).collect();
    let targets: Vec<Tensor> = idx.iter().map(|&i| gather(&data.error, batch, i)).collect();
    let (pred, nfe) = corrector_forward(b, model, nets, &times, &knots)?;
    Ok((sequence_loss(b, &pred, &targets)?, nfe))
}

/// Mini-batch optimisation state of a corrector.
pub struct CorrectorTrainer {
    pub model: CorrectorModel,
    opt: Adam,
    train: ErrorData,
    val: ErrorData,
    cfg: CorrectorTrainConfig,
}

impl CorrectorTrainer {
    pub fn new(model: CorrectorModel, bundles: &[ForecastBundle], cfg: &CorrectorTrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let opt = cfg.train.optimizer(&model.tensors());
        let mut t = CorrectorTrainer {
            model,
            opt,
            train: ErrorData {
                times: Vec::new(),
                forecast: Vec::new(),
                error: Vec::new(),
            },
            val: ErrorData {
                times: Vec::new(),
                forecast: Vec::new(),
                error: Vec::new(),
            },
            cfg: cfg.clone(),
        };
        t.set_bundles(bundles)?;
        Ok(t)
    }

    /// Replaces the training data, keeping the optimiser state.
    pub fn set_bundles(&mut self, bundles: &[ForecastBundle]) -> Result<()> {
        if bundles.iter().any(|b| b.dim() != self.model.dim) {
            return Err(Error::shape("train_corrector", "bundle dimension differs from the corrector's"));
        }
        let all = ErrorData::new(bundles, self.cfg.train_horizon)?;
        let (tr, val) = self.cfg.train.carve_validation(all.len());
        self.train = all.subset(&tr);
        self.val = all.subset(&val);
        Ok(())
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn step(&mut self, epoch: usize, k: usize, batch: &[usize]) -> Result<(f64, usize)> {
        let mut rng = stream_rng(self.cfg.train.seed ^ 0xc0_22ec_7ed, ((epoch as u64) << 24) | k as u64);
        let idx = self.cfg.pass_indices(&mut rng)?;
        let tape = Tape::new();
        let nets = self.model.bind(&tape);
        let (loss, nfe) = corrector_loss(&tape, &self.model, &nets, &self.train, batch, &idx)
            .map_err(|e| diverged("corrector", epoch, k, e))?;
        let lv = tape.value(&loss).data()[0];
        let g = tape.backward(loss)?;
        apply_step(&mut self.opt, &mut self.model.params_mut(), nets.grads(&g)?)
            .map_err(|e| diverged("corrector", epoch, k, e))?;
        Ok((lv, nfe))
    }

    /// Full-horizon loss without sampling on the validation carve-out.
    pub fn validation_loss(&self) -> Result<f64> {
        let data = if self.val.len() == 0 { &self.train } else { &self.val };
        let e = Eager;
        let nets = self.model.bind(&e);
        let batch: Vec<usize> = (0..data.len()).collect();
        let idx: Vec<usize> = (0..self.cfg.train_horizon).collect();
        let (l, _) = corrector_loss(&e, &self.model, &nets, data, &batch, &idx)?;
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
        let val = self
            .validation_loss()
            .map_err(|e| diverged("corrector", epoch, usize::MAX, e))?;
        Ok((loss_sum / self.train_len() as f64, val, passes.iter().sum(), passes))
    }
}

pub fn train_corrector(
    bundles: &[ForecastBundle],
    model_cfg: &CorrectorConfig,
    cfg: &CorrectorTrainConfig,
) -> Result<(CorrectorModel, TrainLog)> {
    let dim = bundles.first().map_or(0, ForecastBundle::dim);
    let model = CorrectorModel::new(dim, model_cfg, &mut stream_rng(cfg.train.seed, u64::MAX))?;
    train_corrector_from(model, bundles, cfg)
}

pub fn train_corrector_from(
    model: CorrectorModel,
    bundles: &[ForecastBundle],
    cfg: &CorrectorTrainConfig,
) -> Result<(CorrectorModel, TrainLog)> {
    let trainer = RefCell::new(CorrectorTrainer::new(model, bundles, cfg)?);
    let mut best = trainer.borrow().model.clone();
    let log = run_epochs(
        &cfg.train,
        |epoch| trainer.borrow_mut().epoch(epoch),
        || best = trainer.borrow().model.clone(),
    )?;
    Ok((best, log))
}

// ---------------------------------------------------------------------------
// Pointwise MLP baseline

/// `ê_i = g(x̂_i, t_i)` applied independently at every point, `ê_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCorrector {
    pub net: MlpParams,
}

impl MlpCorrector {
    pub fn new(dim: usize, hidden: Fc, rng: &mut impl Rng) -> Result<Self> {
        Ok(MlpCorrector {
            net: MlpParams::fc(dim + 1, hidden.width, hidden.depth, dim, Activation::Tanh, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_size()
    }

    /// `[n, D]` predictions for `n` points `(x̂, t)`.
    pub fn predict_points(&self, forecast: &Tensor, times: &[f64]) -> Result<Tensor> {
        let input = with_time(forecast, times)?;
        self.net.forward(&input)
    }

    pub fn forward(&self, times: &[f64], forecast: &Tensor) -> Result<Tensor> {
        let mut out = self.predict_points(forecast, times)?;
        out.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        Ok(out)
    }
}

fn with_time(forecast: &Tensor, times: &[f64]) -> Result<Tensor> {
    if forecast.shape().len() != 2 || forecast.rows() != times.len() {
        return Err(Error::shape("mlp_corrector", format!("forecast {:?}, {} times", forecast.shape(), times.len())));
    }
    forecast.concat_cols(&Tensor::new(vec![times.len(), 1], times.to_vec())?)
}

/// Regression of `e_i` on `(x̂_i, t_i)` over points `1..train_horizon`.
pub fn train_mlp_corrector(
    bundles: &[ForecastBundle],
    hidden: Fc,
    train_horizon: usize,
    cfg: &TrainConfig,
) -> Result<(MlpCorrector, TrainLog)> {
    cfg.validate()?;
    let data = ErrorData::new(bundles, train_horizon)?;
    let (tr_idx, val_idx) = cfg.carve_validation(data.len());
    let points = |set: &[usize]| -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let times = &data.times[1..];
        for &i in set {
            xs.push(with_time(&data.forecast[i].slice_rows(1, train_horizon), times)?);
            ys.push(data.error[i].slice_rows(1, train_horizon));
        }
        Ok((stack(&xs)?, stack(&ys)?))
    };
    let (val_x, val_y) = if val_idx.is_empty() { points(&tr_idx)? } else { points(&val_idx)? };
    let model = MlpCorrector::new(data.forecast[0].cols(), hidden, &mut stream_rng(cfg.seed, u64::MAX))?;
    let mut opt = cfg.optimizer(&model.net.tensors());
    let cell = RefCell::new(model);
    let mut best = cell.borrow().clone();
    let log = run_epochs(
        cfg,
        |epoch| {
            let mut model = cell.borrow_mut();
            let mut loss_sum = 0.0;
            for (k, batch) in cfg.batches(tr_idx.len(), epoch).iter().enumerate() {
                let set: Vec<usize> = batch.iter().map(|&j| tr_idx[j]).collect();
                let (x, y) = points(&set)?;
                let tape = Tape::new();
                let net = model.net.bind(&tape);
                let loss = tape.mse(&net.forward(&tape, &tape.constant(x))?, &tape.constant(y))?;
                let lv = tape.value(&loss).data()[0];
                let g = tape.backward(loss)?;
                apply_step(&mut opt, &mut [&mut model.net], vec![net.grads(&g)?])
                    .map_err(|e| diverged("MLP corrector", epoch, k, e))?;
                loss_sum += lv * batch.len() as f64;
            }
            let e = Eager;
            let val = e.mse(&e.constant(model.net.forward(&val_x)?), &e.constant(val_y.clone()))?.data()[0];
            Ok((loss_sum / tr_idx.len() as f64, val, 0, Vec::new()))
        },
        || best = cell.borrow().clone(),
    )?;
    Ok((best, log))
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
    Tensor::new(vec![data.len() / cols, cols], data)
}

// ---------------------------------------------------------------------------
// Common interface

#[derive(Clone, Debug, PartialEq)]
pub enum Corrector {
    Ncde(CorrectorModel),
    Mlp(MlpCorrector),
}

impl Corrector {
    pub fn kind(&self) -> &'static str {
        match self {
            Corrector::Ncde(_) => "ncde",
            Corrector::Mlp(_) => "mlp",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Corrector::Ncde(m) => m.dim,
            Corrector::Mlp(m) => m.dim(),
        }
    }

    /// Predicted errors for every bundle; bundles on a shared grid are
    /// processed as one batch. Returns the errors and the total NFE.
    pub fn predict(&self, bundles: &[ForecastBundle]) -> Result<(Vec<Tensor>, usize)> {
        if bundles.is_empty() {
            return Ok((Vec::new(), 0));
        }
        match self {
            Corrector::Mlp(m) => Ok((
                bundles
                    .iter()
                    .map(|b| m.forward(&b.times, &b.forecast))
                    .collect::<Result<_>>()?,
                0,
            )),
            Corrector::Ncde(m) => {
                let shared = bundles.iter().all(|b| b.times == bundles[0].times);
                if !shared {
                    let mut nfe = 0;
                    let mut out = Vec::new();
                    for b in bundles {
                        let knots = to_knots(&[&b.forecast]);
                        let (e, n) = m.forward_knots(&b.times, &knots)?;
                        nfe += n;
                        out.push(stack_rows(&e, 0));
                    }
                    return Ok((out, nfe));
                }
                let knots = to_knots(&bundles.iter().map(|b| &b.forecast).collect::<Vec<_>>());
                let (e, nfe) = m.forward_knots(&bundles[0].times, &knots)?;
                Ok(((0..bundles.len()).map(|r| stack_rows(&e, r)).collect(), nfe))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorrectorCheckpoint {
    Ncde {
        dim: usize,
        hidden: usize,
        interpolation: Scheme,
        solver: SolverConfig,
        zeta: MlpCheckpoint,
        field: MlpCheckpoint,
        decoder: MlpCheckpoint,
    },
    Mlp {
        net: MlpCheckpoint,
    },
}

impl Corrector {
    pub fn to_checkpoint(&self) -> CorrectorCheckpoint {
        match self {
            Corrector::Ncde(m) => CorrectorCheckpoint::Ncde {
                dim: m.dim,
                hidden: m.hidden,
                interpolation: m.interpolation,
                solver: m.solver.clone(),
                zeta: m.zeta.to_checkpoint(),
                field: m.field.to_checkpoint(),
                decoder: m.decoder.to_checkpoint(),
            },
            Corrector::Mlp(m) => CorrectorCheckpoint::Mlp {
                net: m.net.to_checkpoint(),
            },
        }
    }

    pub fn from_checkpoint(c: &CorrectorCheckpoint) -> Result<Self> {
        Ok(match c {
            CorrectorCheckpoint::Ncde {
                dim,
                hidden,
                interpolation,
                solver,
                zeta,
                field,
                decoder,
            } => {
                let m = CorrectorModel {
                    dim: *dim,
                    hidden: *hidden,
                    interpolation: *interpolation,
                    solver: solver.clone(),
                    zeta: MlpParams::from_checkpoint(zeta)?,
                    field: MlpParams::from_checkpoint(field)?,
                    decoder: MlpParams::from_checkpoint(decoder)?,
                };
                m.validate()?;
                Corrector::Ncde(m)
            }
            CorrectorCheckpoint::Mlp { net } => Corrector::Mlp(MlpCorrector {
                net: MlpParams::from_checkpoint(net)?,
            }),
        })
    }
}

// ---------------------------------------------------------------------------
// Alternating training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlternatingConfig {
    pub rounds: usize,
    /// Predictor gradient steps per round.
    pub predictor_steps: usize,
    /// Corrector gradient steps per round.
    pub corrector_steps: usize,
}

impl Default for AlternatingConfig {
    fn default() -> Self {
        AlternatingConfig {
            rounds: 20,
            predictor_steps: 10,
            corrector_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Mean training loss of the round's predictor steps (NaN if none).
    pub predictor_loss: f64,
    pub corrector_loss: f64,
}

/// Cycles through shuffled epochs of mini-batches one batch at a time.
struct BatchCursor {
    epoch: usize,
    queue: Vec<Vec<usize>>,
}

impl BatchCursor {
    fn new() -> Self {
        BatchCursor {
            epoch: 0,
            queue: Vec::new(),
        }
    }

    fn next(&mut self, cfg: &TrainConfig, n: usize) -> (usize, usize, Vec<usize>) {
        if self.queue.is_empty() {
            self.queue = cfg.batches(n, self.epoch);
            self.queue.reverse();
            self.epoch += 1;
        }
        let k = self.queue.len() - 1;
        let batch = self.queue.pop().expect("non-empty queue");
        (self.epoch - 1, k, batch)
    }
}

/// Interleaves predictor and corrector updates; the corrector's bundles are
/// regenerated from the current predictor after every predictor phase.
pub fn train_alternating(
    predictor: NodeModel,
    corrector: CorrectorModel,
    train: &Dataset,
    predictor_cfg: &SequenceTrainConfig,
    corrector_cfg: &CorrectorTrainConfig,
    alt: &AlternatingConfig,
) -> Result<(NodeModel, CorrectorModel, Vec<RoundLog>)> {
    let mut node = NodeTrainer::new(predictor, train, predictor_cfg)?;
    let horizon = corrector_cfg.train_horizon;
    let bundles = extract_forecast_bundles(&node.model, train, horizon)?;
    let mut corr = CorrectorTrainer::new(corrector, &bundles, corrector_cfg)?;
    let (mut pc, mut cc) = (BatchCursor::new(), BatchCursor::new());
    let mut logs = Vec::with_capacity(alt.rounds);
    for round in 0..alt.rounds {
        let mut p_loss = Vec::new();
        for _ in 0..alt.predictor_steps {
            let (epoch, k, batch) = pc.next(&predictor_cfg.train, node.train_len());
            p_loss.push(node.step(epoch, k, &batch)?.0);
        }
        let mut c_loss = Vec::new();
        if alt.corrector_steps > 0 {
            if alt.predictor_steps > 0 {
                corr.set_bundles(&extract_forecast_bundles(&node.model, train, horizon)?)?;
            }
            for _ in 0..alt.corrector_steps {
                let (epoch, k, batch) = cc.next(&corrector_cfg.train, corr.train_len());
                c_loss.push(corr.step(epoch, k, &batch)?.0);
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        logs.push(RoundLog {
            round,
            predictor_loss: mean(&p_loss),
            corrector_loss: mean(&c_loss),
        });
    }
    Ok((node.model, corr.model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::ode::Method;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> CorrectorConfig {
        CorrectorConfig {
            hidden: 3,
            init: Fc::new(6, 1),
            field: Fc::new(8, 2),
            decoder: Fc::new(8, 1),
            ..Default::default()
        }
    }

    fn tiny(dim: usize, seed: u64) -> CorrectorModel {
        CorrectorModel::new(dim, &tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_bundle(rng: &mut ChaCha8Rng, times: &[f64], dim: usize) -> ForecastBundle {
        let n = times.len() * dim;
        let f = Tensor::new(vec![times.len(), dim], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::new(vec![times.len(), dim], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        ForecastBundle::new(times.to_vec(), f, x).unwrap()
    }

    fn manual_mlp(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = p.layers().len() - 1;
        for (k, l) in p.layers().iter().enumerate() {
            let (o, i) = (l.weight.rows(), l.weight.cols());
            h = (0..o)
                .map(|r| {
                    let s = l.bias.data()[r] + (0..i).map(|c| l.weight.data()[r * i + c] * h[c]).sum::<f64>();
                    if k < last {
                        s.tanh()
                    } else {
                        s
                    }
                })
                .collect();
        }
        h
    }

    #[test]
    fn fc_notation_round_trips() {
        let fc: Fc = "FC(400)_4".parse().unwrap();
        assert_eq!(fc, Fc::new(400, 4));
        assert_eq!(fc.to_string(), "FC(400)_4");
        assert_eq!(serde_json::to_string(&Fc::new(20, 1)).unwrap(), "\"FC(20)_1\"");
        assert!("FC(0)_1".parse::<Fc>().is_err());
        assert!("400x4".parse::<Fc>().is_err());
    }

    #[test]
    fn shapes_follow_hidden_width() {
        let m = tiny(2, 0);
        assert_eq!(m.field.output_size(), 3 * 3);
        assert_eq!(m.decoder.output_size(), 2);
        assert_eq!(m.zeta.input_size(), 3);
        let mut bad = m.clone();
        bad.decoder = MlpParams::zeros(&[3, 4], Activation::Tanh).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_hidden_zero_weights_and_oracle() {
        let mut m = tiny(2, 1);
        let e = Eager;
        let x0 = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
        let z = init_hidden(&e, &m, &m.bind(&e), &x0, 0.5).unwrap();
        let oracle = manual_mlp(&m.zeta, &[0.3, -0.8, 0.5]);
        for (a, b) in z.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
        let again = init_hidden(&e, &m, &m.bind(&e), &x0, 0.5).unwrap();
        assert_eq!(z, again);
        for l in m.zeta.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = init_hidden(&e, &m, &m.bind(&e), &x0, 0.5).unwrap();
        assert_eq!(z.data(), m.zeta.layers().last().unwrap().bias.data());
        assert!(init_hidden(&e, &m, &m.bind(&e), &Tensor::zeros(&[1, 3]), 0.0).is_err());
    }

    #[test]
    fn zero_field_keeps_hidden_constant() {
        let mut m = tiny(2, 2);
        m.field.zero_out();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let b = random_bundle(&mut rng, &times, 2);
        let e = Eager;
        let nets = m.bind(&e);
        let path = ControlPath::fit(&times, &b.forecast, m.interpolation).unwrap();
        let z0 = init_hidden(&e, &m, &nets, &b.forecast.slice_rows(0, 1), 0.0).unwrap();
        let sol = cde_integrate(&e, &m, &nets, &path, &z0, &times).unwrap();
        assert!(sol.states.iter().all(|z| **z == *z0));
    }

    /// `f_θ(z) = [1]` on a time-only path gives `z(t) = z₀ + (t − t₀)`.
    #[test]
    fn unit_field_on_time_path_integrates_time() {
        let big = 20.0; // tanh(20) rounds to 1
        let m = CorrectorModel {
            dim: 0,
            hidden: 1,
            interpolation: Scheme::Linear,
            solver: SolverConfig::default(),
            zeta: MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap(),
            field: MlpParams::new(
                vec![crate::mlp::Layer {
                    weight: Tensor::zeros(&[1, 1]),
                    bias: Tensor::vector(vec![big]),
                }],
                Activation::Identity,
            )
            .unwrap(),
            decoder: MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap(),
        };
        let times = [1.0, 1.5, 3.0, 4.25];
        let values = Tensor::zeros(&[4, 0]);
        let path = ControlPath::fit(&times, &values, Scheme::Linear).unwrap();
        let e = Eager;
        let nets = m.bind(&e);
        let z0 = e.constant(Tensor::matrix(1, 1, vec![0.7]).unwrap());
        let sol = cde_integrate(&e, &m, &nets, &path, &z0, &times).unwrap();
        for (z, t) in sol.states.iter().zip(times) {
            assert!((z.data()[0] - (0.7 + t - 1.0)).abs() < 1e-12);
        }
    }

    /// Constant matrix `M` on a linear path with slope `v`: `dz/ds = M v`,
    /// compared against a fine fixed-step Euler oracle of the same ODE.
    #[test]
    fn constant_matrix_field_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = tiny(1, 5);
        m.interpolation = Scheme::Linear;
        m.solver = SolverConfig::default().tolerances(1e-9, 1e-12);
        let last = m.field.layers().len() - 1;
        for (k, l) in m.field.layers_mut().iter_mut().enumerate() {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            if k == last {
                l.bias.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.9..0.9));
            }
        }
        let mb: Vec<f64> = m.field.layers()[last].bias.data().iter().map(|v| v.tanh()).collect();
        let slope = 0.6;
        let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.25).collect();
        let values = Tensor::new(vec![5, 1], times.iter().map(|t| 0.2 + slope * t).collect()).unwrap();
        let path = ControlPath::fit(&times, &values, Scheme::Linear).unwrap();
        let e = Eager;
        let nets = m.bind(&e);
        let z0v = [0.1, -0.3, 0.5];
        let z0 = e.constant(Tensor::matrix(1, 3, z0v.to_vec()).unwrap());
        let sol = cde_integrate(&e, &m, &nets, &path, &z0, &times).unwrap();
        let dz: Vec<f64> = (0..3).map(|c| mb[c * 2] * slope + mb[c * 2 + 1]).collect();
        let (mut z, n) = (z0v, 100_000);
        let h = 1.0 / n as f64;
        for _ in 0..n {
            for c in 0..3 {
                z[c] += h * dz[c];
            }
        }
        for c in 0..3 {
            assert!((sol.states[4].data()[c] - z[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn decoding_and_forward_composition() {
        let m = tiny(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let times: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let b = random_bundle(&mut rng, &times, 2);
        let ehat = m.forward(&times, &b.forecast).unwrap();
        assert_eq!(ehat.shape(), &[5, 2]);
        assert!(ehat.row(0).iter().all(|v| *v == 0.0));

        let e = Eager;
        let nets = m.bind(&e);
        let path = ControlPath::fit(&times, &b.forecast, m.interpolation).unwrap();
        let z0 = init_hidden(&e, &m, &nets, &b.forecast.slice_rows(0, 1), times[0]).unwrap();
        let sol = cde_integrate(&e, &m, &nets, &path, &z0, &times).unwrap();
        let dec = decode_errors(&e, &m, &nets, &sol.states).unwrap();
        for i in 0..5 {
            assert_eq!(dec[i].data(), ehat.row(i));
        }
        for i in 1..5 {
            let oracle = manual_mlp(&m.decoder, sol.states[i].data());
            for (a, b) in dec[i].data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let mut z = m.clone();
        z.decoder.zero_out();
        assert!(z.forward(&times, &b.forecast).unwrap().max_abs() == 0.0);
        assert_eq!(m.forward(&times, &b.forecast).unwrap(), ehat);
    }

    #[test]
    fn batched_prediction_matches_single() {
        let mut m = tiny(2, 8);
        m.solver = m.solver.clone().tolerances(1e-10, 1e-12);
        let m = Corrector::Ncde(m);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let times: Vec<f64> = (0..7).map(|i| i as f64 * 0.5).collect();
        let bundles: Vec<_> = (0..3).map(|_| random_bundle(&mut rng, &times, 2)).collect();
        let (all, _) = m.predict(&bundles).unwrap();
        for (b, e) in bundles.iter().zip(&all) {
            let (single, _) = m.predict(std::slice::from_ref(b)).unwrap();
            assert!(single[0].sub(e).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn residual_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let times: Vec<f64> = (0..20).map(|i| i as f64).collect();
        for _ in 0..50 {
            let b = random_bundle(&mut rng, &times, 3);
            assert_eq!(correct(&b.forecast, &b.error).unwrap(), b.truth);
            assert_eq!(correct(&b.forecast, &Tensor::zeros(&[20, 3])).unwrap(), b.forecast);
        }
        assert!(correct(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn tail_drop_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!((0..1000).all(|_| sample_tail_drop(0, 50, &mut rng).unwrap() == 0));
        let n = 100_000;
        let mut counts = [0usize; 11];
        for _ in 0..n {
            counts[sample_tail_drop(10, 50, &mut rng).unwrap()] += 1;
        }
        let expected = n as f64 / 11.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of χ² with 10 degrees of freedom.
        assert!(chi2 < 29.59, "χ² = {chi2}");
        assert!(sample_tail_drop(47, 50, &mut rng).is_err());
    }

    #[test]
    fn sparsify_counts_and_variety() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(sparsify_path(30, 1.0, &mut rng).unwrap(), (0..30).collect::<Vec<_>>());
        let a = sparsify_path(100, 0.5, &mut rng).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a[0], 0);
        let draws: Vec<_> = (0..20).map(|_| sparsify_path(100, 0.5, &mut rng).unwrap()).collect();
        let distinct: std::collections::HashSet<_> = draws.iter().collect();
        assert_eq!(distinct.len(), draws.len());
        assert!(sparsify_path(6, 0.5, &mut rng).is_err());
        assert!(sparsify_path(10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn pass_indices_respect_tail_drop() {
        let cfg = CorrectorTrainConfig {
            train_horizon: 30,
            observed_fraction: 0.8,
            reg: RegularizationConfig { kappa: 0.5, eta: 6 },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let idx = cfg.pass_indices(&mut rng).unwrap();
            assert_eq!(idx[0], 0);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(*idx.last().unwrap() < 30);
            assert!(idx.len() >= 4);
        }
        let bad = CorrectorTrainConfig {
            reg: RegularizationConfig { kappa: 1.0, eta: 27 },
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    fn loss_and_grads(
        m: &CorrectorModel,
        data: &ErrorData,
        idx: &[usize],
    ) -> (f64, Vec<Vec<Tensor>>, Vec<ode::Step>) {
        let tape = Tape::new();
        let nets = m.bind(&tape);
        let times: Vec<f64> = idx.iter().map(|&i| data.times[i]).collect();
        let batch: Vec<usize> = (0..data.len()).collect();
        let knots: Vec<Tensor> = idx.iter().map(|&i| gather(&data.forecast, &batch, i)).collect();
        let targets: Vec<Tensor> = idx.iter().map(|&i| gather(&data.error, &batch, i)).collect();
        let path = ControlPath::fit_batch(&times, &knots, m.interpolation).unwrap();
        let z0 = init_hidden(&tape, m, &nets, &knots[0], times[0]).unwrap();
        let sol = cde_integrate(&tape, m, &nets, &path, &z0, &times).unwrap();
        let pred = decode_errors(&tape, m, &nets, &sol.states).unwrap();
        let loss = sequence_loss(&tape, &pred, &targets).unwrap();
        let lv = tape.value(&loss).data()[0];
        let g = tape.backward(loss).unwrap();
        (lv, nets.grads(&g).unwrap(), sol.schedule())
    }

    fn replay_loss(m: &CorrectorModel, data: &ErrorData, schedule: &[ode::Step]) -> f64 {
        let e = Eager;
        let nets = m.bind(&e);
        let batch: Vec<usize> = (0..data.len()).collect();
        let n = data.times.len();
        let knots: Vec<Tensor> = (0..n).map(|i| gather(&data.forecast, &batch, i)).collect();
        let targets: Vec<Tensor> = (0..n).map(|i| gather(&data.error, &batch, i)).collect();
        let path = ControlPath::fit_batch(&data.times, &knots, m.interpolation).unwrap();
        let z0 = init_hidden(&e, m, &nets, &knots[0], data.times[0]).unwrap();
        let field = CdeField { net: &nets.field, path: &path };
        let tab = m.solver.solver.tableau();
        let sol = ode::integrate_schedule(&e, &tab, &field, &z0, schedule).unwrap();
        let pred = decode_errors(&e, m, &nets, &sol.states).unwrap();
        sequence_loss(&e, &pred, &targets).unwrap().data()[0]
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for scheme in [Scheme::Hermite, Scheme::Linear] {
            let mut m = tiny(2, 14);
            m.interpolation = scheme;
            m.solver = SolverConfig::with_method(Method::Tsit5);
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let times = [0.0, 0.4, 1.0, 1.3];
            let bundles: Vec<_> = (0..2).map(|_| random_bundle(&mut rng, &times, 2)).collect();
            let data = ErrorData::new(&bundles, 4).unwrap();
            let (_, grads, schedule) = loss_and_grads(&m, &data, &[0, 1, 2, 3]);
            for (net, g) in grads.iter().enumerate() {
                for (ti, gt) in g.iter().enumerate() {
                    let base = m.params_mut()[net].tensors()[ti].data().to_vec();
                    let fd = finite_difference(&base, 1e-6, |p| {
                        let mut mm = m.clone();
                        mm.params_mut()[net].tensors_mut()[ti].data_mut().copy_from_slice(p);
                        replay_loss(&mm, &data, &schedule)
                    });
                    let err = max_relative_error(gt.data(), &fd, 1e-7);
                    assert!(err < 1e-3, "{scheme} net {net} tensor {ti}: {err}");
                }
            }
        }
    }

    fn zero_error_bundles(n: usize, len: usize, seed: u64) -> Vec<ForecastBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..len).map(|i| i as f64 * 0.2).collect();
        (0..n)
            .map(|_| {
                let (a, w) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..2.0));
                let f = Tensor::new(
                    vec![len, 2],
                    times.iter().flat_map(|t| [a * (w * t).sin(), a * (w * t).cos()]).collect(),
                )
                .unwrap();
                ForecastBundle::new(times.clone(), f.clone(), f).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_errors_train_to_zero() {
        let bundles = zero_error_bundles(24, 12, 16);
        let cfg = CorrectorTrainConfig {
            train_horizon: 12,
            train: TrainConfig {
                max_epochs: 150,
                batch_size: 8,
                lr: 3e-3,
                patience: 150,
                ..Default::default()
            },
            ..Default::default()
        };
        let init = CorrectorModel::new(2, &tiny_cfg(), &mut stream_rng(cfg.train.seed, u64::MAX)).unwrap();
        let scale = Corrector::Ncde(init).predict(&bundles).unwrap().0[0].max_abs();
        let (m, log) = train_corrector(&bundles, &tiny_cfg(), &cfg).unwrap();
        assert!(log.final_train_loss() < 1e-5, "loss {}", log.final_train_loss());
        let after = Corrector::Ncde(m).predict(&bundles).unwrap().0[0].max_abs();
        assert!(after < 0.1 * scale, "{after} vs {scale}");
    }

    #[test]
    fn kappa_lowers_pass_nfe() {
        let bundles = zero_error_bundles(16, 30, 17);
        let base = CorrectorTrainConfig {
            train_horizon: 30,
            train: TrainConfig {
                max_epochs: 20,
                batch_size: 8,
                patience: 100,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut model_cfg = tiny_cfg();
        model_cfg.interpolation = Scheme::Linear;
        let run = |kappa: f64| {
            let cfg = CorrectorTrainConfig {
                reg: RegularizationConfig { kappa, eta: 0 },
                ..base.clone()
            };
            train_corrector(&bundles, &model_cfg, &cfg).unwrap().1.median_epoch_nfe()
        };
        assert!(run(0.5) < run(1.0));
    }

    #[test]
    fn mlp_corrector_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let m = MlpCorrector::new(2, Fc::new(8, 1), &mut rng).unwrap();
        let times: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let f = Tensor::new(vec![6, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = m.predict_points(&f, &times).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pt: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
        let permuted = m.predict_points(&f.select_rows(&perm), &pt).unwrap();
        assert_eq!(permuted, out.select_rows(&perm));
        assert!(m.forward(&times, &f).unwrap().row(0).iter().all(|v| *v == 0.0));

        let mut bundles = zero_error_bundles(16, 8, 19);
        let cfg = TrainConfig {
            max_epochs: 10_000,
            batch_size: 16,
            lr: 1e-2,
            patience: 10_000,
            ..Default::default()
        };
        let (z, zl) = train_mlp_corrector(&bundles, Fc::new(8, 1), 8, &cfg).unwrap();
        let out = z.forward(&bundles[0].times, &bundles[0].forecast).unwrap().max_abs();
        assert!(out < 1e-2, "max |ê| {out}, loss {}", zl.best_val);

        for b in &mut bundles {
            let truth = b.forecast.map(|v| v + 0.3);
            *b = ForecastBundle::new(b.times.clone(), b.forecast.clone(), truth).unwrap();
        }
        let (_, log) = train_mlp_corrector(&bundles, Fc::new(8, 1), 8, &cfg).unwrap();
        assert!(log.best_val < 1e-6, "loss {}", log.best_val);
    }

    #[test]
    fn checkpoints_round_trip() {
        for c in [
            Corrector::Ncde(tiny(2, 20)),
            Corrector::Mlp(MlpCorrector::new(2, Fc::new(4, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()),
        ] {
            let json = serde_json::to_string(&c.to_checkpoint()).unwrap();
            assert!(json.contains(&format!("\"kind\":\"{}\"", c.kind())));
            let back = Corrector::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }
}
