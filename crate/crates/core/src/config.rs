//! Run configuration shared by every command, plus named presets.
//!
//! A run is resolved in layers: defaults, then presets in order, then the
//! keys of a JSON config file, then dotted `key=value` overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corrector::{AlternatingConfig, CorrectorConfig, CorrectorTrainConfig, Fc, RegularizationConfig};
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::ode::SolverConfig;
use crate::path::Scheme;
use crate::predictors::{DLinearConfig, NodeConfig, RnnConfig, SequenceTrainConfig};
use crate::systems::{SystemKind, SystemSpec};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Node,
    Dlinear,
    Rnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorKind {
    Ncde,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Presets applied before the remaining keys.
    pub presets: Vec<String>,

    // Data source: a generated system, a dataset directory or a long CSV.
    pub system: Option<SystemKind>,
    pub trajectories: Option<usize>,
    pub timesteps: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub train_ratio: f64,
    /// Fraction of training time points with half their features hidden.
    pub mask_fraction: f64,
    pub lookback: usize,
    pub forecast_horizon: usize,
    /// Stride between consecutive CSV windows.
    pub window_stride: usize,

    pub predictor: PredictorKind,
    pub predictor_train_horizon: usize,
    pub observed_fraction: f64,
    pub node: NodeConfig,
    pub rnn: RnnConfig,
    pub dlinear_kernel: usize,
    pub predictor_training: TrainConfig,
    pub predictor_checkpoint: Option<PathBuf>,

    pub corrector: CorrectorKind,
    pub hidden: usize,
    pub init: Fc,
    pub field: Fc,
    pub decoder: Fc,
    pub activation: Activation,
    pub interpolation: Scheme,
    pub solver: SolverConfig,
    /// Hidden layers of the pointwise MLP corrector.
    pub mlp_hidden: Fc,
    pub kappa: f64,
    pub eta: usize,
    pub train_horizon: usize,
    pub corrector_training: TrainConfig,
    pub corrector_checkpoint: Option<PathBuf>,
    /// Alternate predictor and corrector updates instead of two stages.
    pub alternating: Option<AlternatingConfig>,

    /// Points of each test forecast; `None` uses the full trajectory.
    pub eval_horizon: Option<usize>,
    pub interpolation_cutoff: usize,
    pub cutoff_step: usize,
    pub threshold: f64,
    /// Longest cutoff of the log-MSE stress curves.
    pub stress: Option<usize>,
    /// Ablation sweep, e.g. `kappa 0.5:1.0:0.1` or `solver`.
    pub sweep: Option<String>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            presets: Vec::new(),
            system: None,
            trajectories: None,
            timesteps: None,
            data_dir: None,
            csv: None,
            train_ratio: 0.8,
            mask_fraction: 0.0,
            lookback: 336,
            forecast_horizon: 96,
            window_stride: 1,
            predictor: PredictorKind::Node,
            predictor_train_horizon: 40,
            observed_fraction: 1.0,
            node: NodeConfig::default(),
            rnn: RnnConfig::default(),
            dlinear_kernel: 25,
            predictor_training: TrainConfig::default(),
            predictor_checkpoint: None,
            corrector: CorrectorKind::Ncde,
            hidden: 11,
            init: Fc::new(50, 1),
            field: Fc::new(400, 4),
            decoder: Fc::new(400, 4),
            activation: Activation::Tanh,
            interpolation: Scheme::Hermite,
            solver: SolverConfig::default(),
            mlp_hidden: Fc::new(100, 2),
            kappa: 1.0,
            eta: 0,
            train_horizon: 50,
            corrector_training: TrainConfig {
                batch_size: 256,
                ..TrainConfig::default()
            },
            corrector_checkpoint: None,
            alternating: None,
            eval_horizon: None,
            interpolation_cutoff: 50,
            cutoff_step: 5,
            threshold: 3.0,
            stress: None,
            sweep: None,
            output: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Layers presets, a config file and `key=value` overrides on top of the
    /// defaults. Presets named in the file or passed directly are applied
    /// first, so explicit keys always win.
    pub fn resolve(file: Option<&Value>, presets: &[String], overrides: &[(String, Value)]) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        if let Some(list) = file.and_then(|f| f.get("presets")) {
            let list: Vec<String> = serde_json::from_value(list.clone())
                .map_err(|e| Error::invalid("presets", e.to_string()))?;
            names.extend(list);
        }
        names.extend(presets.iter().cloned());
        for (k, v) in overrides {
            if k == "presets" {
                let list: Vec<String> = match v {
                    Value::String(s) => s.split(',').map(str::to_string).collect(),
                    other => serde_json::from_value(other.clone()).map_err(|e| Error::invalid("presets", e.to_string()))?,
                };
                names.extend(list);
            }
        }
        let mut base = RunConfig::default();
        for name in &names {
            apply_preset(&mut base, name)?;
        }
        base.presets = names;
        let mut value = serde_json::to_value(&base)?;
        if let Some(f) = file {
            if !f.is_object() {
                return Err(Error::invalid("config", "must be a JSON object"));
            }
            let mut f = f.clone();
            f.as_object_mut().expect("object").remove("presets");
            merge(&mut value, &f);
        }
        for (k, v) in overrides {
            if k != "presets" {
                set_path(&mut value, k, v.clone())?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::invalid("train_ratio", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::invalid("mask_fraction", "must lie in [0, 1]"));
        }
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(Error::invalid("observed_fraction", "must lie in (0, 1]"));
        }
        if self.window_stride == 0 {
            return Err(Error::invalid("window_stride", "must be positive"));
        }
        if self.cutoff_step == 0 {
            return Err(Error::invalid("cutoff_step", "must be positive"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold", "must be finite"));
        }
        if self.trajectories == Some(0) {
            return Err(Error::invalid("trajectories", "must be positive"));
        }
        if self.timesteps.is_some_and(|t| t < 2) {
            return Err(Error::invalid("timesteps", "need at least two samples"));
        }
        let sources = [self.system.is_some(), self.data_dir.is_some(), self.csv.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 && self.csv.is_some() {
            return Err(Error::invalid("csv", "cannot be combined with system or data_dir"));
        }
        match self.predictor {
            PredictorKind::Dlinear => {
                if self.system.is_some() || self.data_dir.is_some() {
                    return Err(Error::invalid("predictor", "dlinear forecasts CSV windows; set csv"));
                }
                self.dlinear_config().validate()?;
            }
            PredictorKind::Node | PredictorKind::Rnn => {
                if self.csv.is_some() {
                    return Err(Error::invalid("predictor", "CSV windows need the dlinear predictor"));
                }
                self.sequence_config().validate()?;
                self.node.solver.validate()?;
            }
        }
        if self.predictor == PredictorKind::Rnn && self.observed_fraction != 1.0 {
            return Err(Error::invalid("observed_fraction", "the rnn predictor needs regular samples"));
        }
        if self.alternating.is_some() && self.predictor != PredictorKind::Node {
            return Err(Error::invalid("alternating", "needs the node predictor"));
        }
        self.corrector_config().validate()?;
        self.corrector_train_config().validate()?;
        self.corrector_training.validate()?;
        if self.interpolation_cutoff == 0 {
            return Err(Error::invalid("interpolation_cutoff", "must be positive"));
        }
        if self.eval_horizon.is_some_and(|h| h <= self.interpolation_cutoff) {
            return Err(Error::invalid("eval_horizon", "must exceed interpolation_cutoff"));
        }
        if let Some(sweep) = &self.sweep {
            Sweep::parse(sweep)?;
        }
        if let Some(spec) = self.system_spec() {
            spec.validate()?;
            let n = spec.timesteps;
            let longer = |field: &str, v: usize| {
                if v > n {
                    Err(Error::invalid(field, format!("{v} points requested, trajectories have {n}")))
                } else {
                    Ok(())
                }
            };
            longer("predictor_train_horizon", self.predictor_train_horizon)?;
            longer("train_horizon", self.train_horizon)?;
            longer("eval_horizon", self.eval_horizon.unwrap_or(n))?;
            if self.stress.is_some_and(|s| s >= self.eval_horizon.unwrap_or(n)) {
                return Err(Error::invalid("stress", "cutoff must lie inside the evaluated forecasts"));
            }
        }
        Ok(())
    }

    pub fn system_spec(&self) -> Option<SystemSpec> {
        self.system.map(|kind| {
            let mut spec = SystemSpec::preset(kind);
            if let Some(n) = self.trajectories {
                spec.trajectories = n;
            }
            if let Some(t) = self.timesteps {
                spec.timesteps = t;
            }
            spec
        })
    }

    pub fn sequence_config(&self) -> SequenceTrainConfig {
        SequenceTrainConfig {
            train_horizon: self.predictor_train_horizon,
            observed_fraction: self.observed_fraction,
            train: self.seeded(&self.predictor_training),
        }
    }

    pub fn dlinear_config(&self) -> DLinearConfig {
        DLinearConfig {
            lookback: self.lookback,
            horizon: self.forecast_horizon,
            kernel: self.dlinear_kernel,
        }
    }

    pub fn corrector_config(&self) -> CorrectorConfig {
        CorrectorConfig {
            hidden: self.hidden,
            init: self.init,
            field: self.field,
            decoder: self.decoder,
            activation: self.activation,
            interpolation: self.interpolation,
            solver: self.solver.clone(),
        }
    }

    pub fn corrector_train_config(&self) -> CorrectorTrainConfig {
        CorrectorTrainConfig {
            train_horizon: self.train_horizon,
            observed_fraction: self.observed_fraction,
            reg: RegularizationConfig {
                kappa: self.kappa,
                eta: self.eta,
            },
            train: self.seeded(&self.corrector_training),
        }
    }

    /// Training settings carrying the run seed.
    pub fn seeded(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..t.clone()
        }
    }
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Sets a dotted key such as `solver.rtol`; intermediate objects must exist
/// unless the parent is `null`.
fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::invalid(key, format!("{} is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*p) {
            return Err(Error::invalid(key, "unknown key"));
        }
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = obj.get_mut(*p).expect("checked");
    }
    unreachable!("split yields at least one part")
}

/// Parses an override value as JSON, falling back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid("set", format!("{s:?} is not key=value")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), v))
}

// ---------------------------------------------------------------------------
// Presets

/// Per-system `(observed %, κ)`; η is zero throughout.
const SYNTHETIC_KAPPA: [(&str, SystemKind, [f64; 4]); 4] = [
    ("lorenz", SystemKind::Lorenz, [1.0, 0.8, 1.0, 1.0]),
    ("lv", SystemKind::LotkaVolterra, [1.0, 0.5, 1.0, 0.6]),
    ("fhn", SystemKind::Fhn, [1.0, 0.4, 0.7, 0.6]),
    ("glyco", SystemKind::Glycolytic, [1.0, 1.0, 0.5, 0.5]),
];
const OBSERVED: [u32; 4] = [20, 50, 80, 100];

const LINEAR: [(&str, SystemKind); 3] = [
    ("linear2", SystemKind::Linear2),
    ("linear3", SystemKind::Linear3),
    ("linear4", SystemKind::Linear4),
];
const MASKED: [u32; 3] = [0, 30, 60];

/// `(dataset, [(T, corrector horizon, κ, η)])`.
type LtsfRow = (&'static str, [(usize, usize, f64, usize); 4]);
const LTSF: [LtsfRow; 5] = [
    ("exchange", [(96, 50, 0.7, 10), (192, 100, 0.7, 10), (336, 150, 0.7, 10), (720, 300, 0.7, 10)]),
    ("ettm2", [(96, 50, 0.7, 10), (192, 100, 0.7, 10), (336, 150, 0.7, 10), (720, 300, 0.7, 10)]),
    ("etth2", [(96, 50, 0.7, 10), (192, 100, 0.7, 10), (336, 150, 0.7, 10), (720, 300, 0.7, 10)]),
    ("weather", [(96, 50, 1.0, 0), (192, 100, 0.7, 50), (336, 150, 1.0, 50), (720, 300, 1.0, 0)]),
    ("ili", [(24, 25, 0.7, 10), (36, 37, 0.7, 10), (48, 49, 0.7, 10), (60, 61, 0.7, 10)]),
];

/// Every preset name.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for (name, _, _) in SYNTHETIC_KAPPA {
        out.extend(OBSERVED.iter().map(|p| format!("{name}-{p}")));
    }
    for (name, _) in LINEAR {
        out.extend(MASKED.iter().map(|p| format!("{name}-{p}")));
    }
    for (name, rows) in LTSF {
        out.extend(rows.iter().map(|r| format!("{name}-{}", r.0)));
    }
    out.push("desk".to_string());
    out
}

pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let unknown = || Error::invalid("preset", format!("unknown preset {name:?}"));
    if name == "desk" {
        apply_desk(cfg);
        return Ok(());
    }
    let (stem, level) = name.rsplit_once('-').ok_or_else(unknown)?;
    let level: usize = level.parse().map_err(|_| unknown())?;
    if let Some((_, kind, kappas)) = SYNTHETIC_KAPPA.iter().find(|r| r.0 == stem) {
        let i = OBSERVED.iter().position(|&p| p as usize == level).ok_or_else(unknown)?;
        cfg.system = Some(*kind);
        cfg.predictor = PredictorKind::Node;
        cfg.observed_fraction = level as f64 / 100.0;
        cfg.kappa = kappas[i];
        cfg.eta = 0;
        return Ok(());
    }
    if let Some((_, kind)) = LINEAR.iter().find(|r| r.0 == stem) {
        if !MASKED.contains(&(level as u32)) {
            return Err(unknown());
        }
        cfg.system = Some(*kind);
        cfg.predictor = PredictorKind::Node;
        cfg.observed_fraction = 1.0;
        cfg.mask_fraction = level as f64 / 100.0;
        cfg.kappa = 1.0;
        cfg.eta = 0;
        return Ok(());
    }
    if let Some((_, rows)) = LTSF.iter().find(|r| r.0 == stem) {
        let &(t, th, kappa, eta) = rows.iter().find(|r| r.0 == level).ok_or_else(unknown)?;
        cfg.system = None;
        cfg.data_dir = None;
        cfg.predictor = PredictorKind::Dlinear;
        cfg.forecast_horizon = t;
        cfg.train_horizon = th;
        cfg.kappa = kappa;
        cfg.eta = eta;
        cfg.observed_fraction = 1.0;
        cfg.interpolation_cutoff = th.min(t);
        return Ok(());
    }
    Err(unknown())
}

/// Scaled-down networks, batches and epoch budgets for a single CPU core.
fn apply_desk(cfg: &mut RunConfig) {
    cfg.field = Fc::new(64, 2);
    cfg.decoder = Fc::new(20, 1);
    cfg.corrector_training.batch_size = 32;
    cfg.corrector_training.max_epochs = 200;
    cfg.predictor_training.max_epochs = 200;
    cfg.predictor_training.clip_norm = Some(1.0);
}

// ---------------------------------------------------------------------------
// Ablation sweeps

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Kappa,
    Eta,
    Solver,
    Interpolation,
    Decoder,
    TrainHorizon,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Kappa => "kappa",
            SweepParam::Eta => "eta",
            SweepParam::Solver => "solver",
            SweepParam::Interpolation => "interpolation",
            SweepParam::Decoder => "decoder",
            SweepParam::TrainHorizon => "train_horizon",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "kappa" => SweepParam::Kappa,
            "eta" => SweepParam::Eta,
            "solver" => SweepParam::Solver,
            "interpolation" => SweepParam::Interpolation,
            "decoder" => SweepParam::Decoder,
            "train_horizon" => SweepParam::TrainHorizon,
            other => return Err(Error::invalid("sweep", format!("unknown parameter {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    /// Values as JSON, ready to override the config key.
    pub values: Vec<Value>,
}

impl Sweep {
    /// `param` alone uses the default value set; otherwise values are a
    /// comma list or a numeric `start:stop:step` range.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let param: SweepParam = parts.next().ok_or_else(|| Error::invalid("sweep", "empty"))?.parse()?;
        let rest: Vec<&str> = parts.collect();
        let spec = rest.join("");
        let values: Vec<Value> = if spec.is_empty() {
            default_values(param)?
        } else if spec.contains(':') {
            range_values(param, &spec)?
        } else {
            spec.split(',').map(|v| typed_value(param, v)).collect::<Result<_>>()?
        };
        if values.is_empty() {
            return Err(Error::invalid("sweep", "no values"));
        }
        Ok(Sweep { param, values })
    }

    /// Display label of value `i`.
    pub fn label(&self, i: usize) -> String {
        match &self.values[i] {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        }
    }
}

fn default_values(param: SweepParam) -> Result<Vec<Value>> {
    Ok(match param {
        SweepParam::Kappa => range_values(param, "0.5:1.0:0.1")?,
        SweepParam::Eta => [0, 5, 10, 20].iter().map(|&v| Value::from(v)).collect(),
        SweepParam::Solver => ["euler", "heun", "dopri5", "tsit5"].iter().map(|&v| Value::from(v)).collect(),
        SweepParam::Interpolation => ["linear", "hermite"].iter().map(|&v| Value::from(v)).collect(),
        SweepParam::Decoder => ["FC(20)_1", "FC(100)_2", "FC(400)_4"].iter().map(|&v| Value::from(v)).collect(),
        SweepParam::TrainHorizon => [30, 50, 70, 100].iter().map(|&v| Value::from(v)).collect(),
    })
}

fn range_values(param: SweepParam, spec: &str) -> Result<Vec<Value>> {
    let bad = || Error::invalid("sweep", format!("range {spec:?} is not start:stop:step"));
    let p: Vec<f64> = spec
        .split(':')
        .map(|x| x.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = p[..] else { return Err(bad()) };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            // Round to the step's decimal places so 0.1 steps print cleanly.
            let x = start + i as f64 * step;
            let x = (x * 1e9).round() / 1e9;
            typed_value(param, &x.to_string())
        })
        .collect()
}

fn typed_value(param: SweepParam, v: &str) -> Result<Value> {
    let bad = |why: &str| Error::invalid("sweep", format!("{param} value {v:?}: {why}"));
    Ok(match param {
        SweepParam::Kappa => Value::from(v.parse::<f64>().map_err(|_| bad("not a number"))?),
        SweepParam::Eta | SweepParam::TrainHorizon => {
            Value::from(v.parse::<usize>().map_err(|_| bad("not a non-negative integer"))?)
        }
        SweepParam::Solver => Value::from(v.parse::<crate::ode::Method>()?.name()),
        SweepParam::Interpolation => Value::from(v.parse::<Scheme>()?.to_string()),
        SweepParam::Decoder => Value::from(v.parse::<Fc>()?.to_string()),
    })
}

impl Sweep {
    /// Config overrides realising value `i`.
    pub fn overrides(&self, i: usize) -> Vec<(String, Value)> {
        let key = match self.param {
            SweepParam::Solver => "solver.solver",
            p => p.key(),
        };
        vec![(key.to_string(), self.values[i].clone())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn fhn_100_preset_sets_regularization() {
        let cfg = RunConfig::resolve(None, &["fhn-100".into()], &[]).unwrap();
        assert_eq!(cfg.system, Some(SystemKind::Fhn));
        assert_eq!((cfg.kappa, cfg.eta, cfg.observed_fraction), (0.6, 0, 1.0));
        let cfg = RunConfig::resolve(None, &["lv-50".into()], &[]).unwrap();
        assert_eq!((cfg.kappa, cfg.observed_fraction), (0.5, 0.5));
    }

    #[test]
    fn every_preset_resolves() {
        for name in preset_names() {
            let cfg = RunConfig::resolve(None, &[name.clone()], &[]);
            assert!(cfg.is_ok(), "{name}: {cfg:?}");
        }
        assert!(RunConfig::resolve(None, &["fhn-30".into()], &[]).is_err());
        assert!(RunConfig::resolve(None, &["nope".into()], &[]).is_err());
    }

    #[test]
    fn ltsf_presets_follow_horizon_table() {
        let cfg = RunConfig::resolve(None, &["weather-192".into()], &[]).unwrap();
        assert_eq!(cfg.predictor, PredictorKind::Dlinear);
        assert_eq!((cfg.forecast_horizon, cfg.train_horizon, cfg.kappa, cfg.eta), (192, 100, 0.7, 50));
        let cfg = RunConfig::resolve(None, &["exchange-720".into()], &[]).unwrap();
        assert_eq!((cfg.train_horizon, cfg.kappa, cfg.eta), (300, 0.7, 10));
    }

    #[test]
    fn layering_order_is_preset_file_override() {
        let file = json!({"presets": ["fhn-100"], "kappa": 0.9, "solver": {"rtol": 1e-4}});
        let cfg = RunConfig::resolve(Some(&file), &[], &[("eta".into(), json!(10))]).unwrap();
        assert_eq!((cfg.kappa, cfg.eta), (0.9, 10));
        assert_eq!(cfg.solver.rtol, 1e-4);
        assert_eq!(cfg.solver.atol, 1e-6);
        assert_eq!(cfg.presets, vec!["fhn-100".to_string()]);
        let cfg = RunConfig::resolve(None, &[], &[parse_override("solver.solver=dopri5").unwrap()]).unwrap();
        assert_eq!(cfg.solver.solver, crate::ode::Method::Dopri5);
    }

    #[test]
    fn invalid_fields_are_named() {
        let field = |r: Result<RunConfig>| match r {
            Err(Error::Invalid { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(RunConfig::resolve(None, &[], &[("kappa".into(), json!(0.0))])), "kappa");
        assert_eq!(field(RunConfig::resolve(None, &[], &[("train_ratio".into(), json!(1.5))])), "train_ratio");
        assert_eq!(field(RunConfig::resolve(None, &[], &[("bogus".into(), json!(1))])), "bogus");
        let rnn = [("predictor".into(), json!("rnn")), ("observed_fraction".into(), json!(0.5))];
        assert_eq!(field(RunConfig::resolve(None, &[], &rnn)), "observed_fraction");
        let file = json!({"kapa": 1.0});
        assert_eq!(field(RunConfig::resolve(Some(&file), &[], &[])), "config");
    }

    #[test]
    fn sweeps_parse() {
        let s = Sweep::parse("kappa 0.5:1.0:0.1").unwrap();
        assert_eq!(s.values, vec![json!(0.5), json!(0.6), json!(0.7), json!(0.8), json!(0.9), json!(1.0)]);
        assert_eq!(Sweep::parse("solver").unwrap().values.len(), 4);
        let d = Sweep::parse("decoder fc(20)_1, FC(400)_4").unwrap();
        assert_eq!(d.label(0), "FC(20)_1");
        assert_eq!(d.overrides(1), vec![("decoder".to_string(), json!("FC(400)_4"))]);
        assert_eq!(Sweep::parse("solver").unwrap().overrides(0)[0].0, "solver.solver");
        assert!(Sweep::parse("kappa 1:0:0.1").is_err());
        assert!(Sweep::parse("eta -1").is_err());
        assert!(Sweep::parse("colour").is_err());
    }
}
