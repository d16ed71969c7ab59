//! The command implementations behind the CLI. Each one resolves its
//! inputs from a [`RunConfig`], writes deterministic CSV/JSON outputs under
//! `output`, and keeps wall-clock figures in separate `*_timing.csv` files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::Serialize;

use crate::config::{CorrectorKind, PredictorKind, RunConfig, Sweep};
use crate::corrector::{
    correct, train_alternating, train_corrector, train_mlp_corrector, Corrector, CorrectorCheckpoint, CorrectorModel,
    RoundLog,
};
use crate::data::{
    load_csv_dataset, mask_features, read_dataset_dir, split_train_test, stream_rng, write_dataset_dir, Dataset,
    Manifest, SeriesDataset, Split, Trajectory, Window,
};
use crate::error::{Error, Result};
use crate::eval::{
    cutoff_grid, line_plot_svg, pareto_points, stress_curve, write_file, EvalInput, EvalReport, ParetoRun, Series,
};
use crate::predictors::{
    dlinear_bundles, extract_forecast_bundles, train_dlinear, train_node, train_rnn, ForecastBundle, Predictor,
    PredictorCheckpoint,
};
use crate::systems::generate_dataset;
use crate::tensor::Tensor;
use crate::train::TrainLog;

/// Loaded inputs of a run.
#[derive(Clone, Debug)]
pub enum Data {
    Trajectories { train: Dataset, test: Dataset },
    Windows(SeriesDataset),
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    if let Some(csv) = &cfg.csv {
        return Ok(Data::Windows(load_csv_dataset(csv, cfg.lookback, cfg.forecast_horizon)?));
    }
    let (train, test) = if let Some(dir) = &cfg.data_dir {
        let (train, test, _) = read_dataset_dir(dir)?;
        (train, test)
    } else if let Some(spec) = cfg.system_spec() {
        let ds = generate_dataset(&spec, cfg.seed)?;
        split_train_test(&ds, cfg.train_ratio, cfg.seed)?
    } else {
        return Err(Error::invalid("system", "no data source; set system, data_dir or csv"));
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("train_ratio", "leaves an empty split"));
    }
    let train = if cfg.mask_fraction > 0.0 {
        let mut t = train.clone();
        for (i, traj) in t.trajectories.iter_mut().enumerate() {
            *traj = mask_features(traj, cfg.mask_fraction, stream_rng(cfg.seed ^ 0x3a5c, i as u64).next_u64())?;
        }
        t
    } else {
        train
    };
    Ok(Data::Trajectories { train, test })
}

/// Masked entries replaced by their last observed value.
fn imputed(ds: &Dataset) -> Dataset {
    ds.map(|t| Trajectory {
        times: t.times.clone(),
        states: t.imputed(),
        mask: None,
    })
}

fn strided(ws: Vec<Window>, stride: usize) -> Vec<Window> {
    ws.into_iter().step_by(stride).collect()
}

fn predictor_path(cfg: &RunConfig) -> PathBuf {
    cfg.predictor_checkpoint.clone().unwrap_or_else(|| cfg.output.join("predictor.json"))
}

fn corrector_path(cfg: &RunConfig) -> PathBuf {
    cfg.corrector_checkpoint.clone().unwrap_or_else(|| cfg.output.join("corrector.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_json(&cfg.output.join("config.json"), cfg)
}

pub fn load_predictor(cfg: &RunConfig) -> Result<Predictor> {
    let c: PredictorCheckpoint = read_json(&predictor_path(cfg))?;
    Predictor::from_checkpoint(&c)
}

pub fn load_corrector(cfg: &RunConfig) -> Result<Corrector> {
    let c: CorrectorCheckpoint = read_json(&corrector_path(cfg))?;
    Corrector::from_checkpoint(&c)
}

// ---------------------------------------------------------------------------
// generate

pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    let spec = cfg
        .system_spec()
        .ok_or_else(|| Error::invalid("system", "generate needs a system"))?;
    spec.validate()?;
    prepare_output(cfg)?;
    let ds = generate_dataset(&spec, cfg.seed)?;
    let (train, test) = split_train_test(&ds, cfg.train_ratio, cfg.seed)?;
    let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.output.join("data"));
    write_dataset_dir(&dir, &train, &test, spec.dt, cfg.seed)
}

// ---------------------------------------------------------------------------
// train-predictor

fn train_predictor_on(cfg: &RunConfig, data: &Data) -> Result<(Predictor, TrainLog)> {
    match (cfg.predictor, data) {
        (PredictorKind::Node, Data::Trajectories { train, .. }) => {
            let (m, log) = train_node(train, &cfg.node, &cfg.sequence_config())?;
            Ok((Predictor::Node(m), log))
        }
        (PredictorKind::Rnn, Data::Trajectories { train, .. }) => {
            let (m, log) = train_rnn(train, &cfg.rnn, &cfg.sequence_config())?;
            Ok((Predictor::Rnn(m), log))
        }
        (PredictorKind::Dlinear, Data::Windows(series)) => {
            let train = strided(series.split_windows(0), cfg.window_stride);
            let val = strided(series.split_windows(1), cfg.window_stride);
            let (m, log) = train_dlinear(&train, &val, &cfg.dlinear_config(), &cfg.seeded(&cfg.predictor_training))?;
            Ok((Predictor::DLinear(m), log))
        }
        (kind, _) => Err(Error::invalid("predictor", format!("{kind:?} does not match the data source"))),
    }
}

pub fn cmd_train_predictor(cfg: &RunConfig) -> Result<TrainLog> {
    let data = load_data(cfg)?;
    prepare_output(cfg)?;
    let (predictor, log) = train_predictor_on(cfg, &data)?;
    write_json(&cfg.output.join("predictor.json"), &predictor.to_checkpoint())?;
    write_train_log(&cfg.output, "predictor", &log)?;
    Ok(log)
}

/// `epoch,train_loss,val_loss,nfe,median_pass_nfe` plus `epoch,seconds`.
pub fn write_train_log(dir: &Path, stem: &str, log: &TrainLog) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,nfe,median_pass_nfe\n");
    let mut t = String::from("epoch,seconds\n");
    for e in &log.epochs {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.nfe, e.median_pass_nfe);
        let _ = writeln!(t, "{},{}", e.epoch, e.seconds);
    }
    write_file(&dir.join(format!("{stem}_log.csv")), &s)?;
    write_file(&dir.join(format!("{stem}_timing.csv")), &t)
}

// ---------------------------------------------------------------------------
// Forecast bundles

/// Forecast bundles of the train or test split, truncated to `horizon`
/// points when given.
pub fn bundles(predictor: &Predictor, data: &Data, split: Split, stride: usize, horizon: Option<usize>) -> Result<Vec<ForecastBundle>> {
    let out = match data {
        Data::Trajectories { train, test } => {
            let f = predictor
                .as_forecaster()
                .ok_or_else(|| Error::invalid("predictor", "cannot forecast trajectories"))?;
            let ds = match split {
                Split::Train => imputed(train),
                Split::Test => test.clone(),
            };
            let h = horizon.unwrap_or(ds.min_len());
            if h > ds.min_len() {
                return Err(Error::invalid(
                    "eval_horizon",
                    format!("{h} points requested, trajectories have {}", ds.min_len()),
                ));
            }
            extract_forecast_bundles(f, &ds, h)?
        }
        Data::Windows(series) => {
            let Predictor::DLinear(m) = predictor else {
                return Err(Error::invalid("predictor", "CSV windows need the dlinear predictor"));
            };
            let ws = strided(series.split_windows(if split == Split::Train { 0 } else { 2 }), stride);
            if ws.is_empty() {
                return Err(Error::invalid("csv", "split has no complete window"));
            }
            let b = dlinear_bundles(m, &ws)?;
            match horizon {
                Some(h) if h > b[0].len() => {
                    return Err(Error::invalid("eval_horizon", format!("{h} exceeds the {}-point window", b[0].len())))
                }
                Some(h) => b.iter().map(|x| x.head(h)).collect(),
                None => b,
            }
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// train-corrector

#[derive(Clone, Debug, Default)]
pub struct CorrectorRun {
    pub log: TrainLog,
    /// Per-round losses of alternating training.
    pub rounds: Vec<RoundLog>,
}

fn fit_corrector(cfg: &RunConfig, train: &[ForecastBundle]) -> Result<(Corrector, TrainLog)> {
    match cfg.corrector {
        CorrectorKind::Ncde => {
            let (m, log) = train_corrector(train, &cfg.corrector_config(), &cfg.corrector_train_config())?;
            Ok((Corrector::Ncde(m), log))
        }
        CorrectorKind::Mlp => {
            let (m, log) = train_mlp_corrector(train, cfg.mlp_hidden, cfg.train_horizon, &cfg.seeded(&cfg.corrector_training))?;
            Ok((Corrector::Mlp(m), log))
        }
    }
}

pub fn cmd_train_corrector(cfg: &RunConfig) -> Result<CorrectorRun> {
    let data = load_data(cfg)?;
    let predictor = load_predictor(cfg)?;
    prepare_output(cfg)?;
    if let Some(alt) = &cfg.alternating {
        let (Predictor::Node(node), Data::Trajectories { train, .. }) = (predictor, &data) else {
            return Err(Error::invalid("alternating", "needs a node predictor on trajectories"));
        };
        if cfg.corrector != CorrectorKind::Ncde {
            return Err(Error::invalid("alternating", "needs the ncde corrector"));
        }
        let init = CorrectorModel::new(train.dim, &cfg.corrector_config(), &mut stream_rng(cfg.seed, u64::MAX))?;
        let (node, corr, rounds) = train_alternating(
            node,
            init,
            &imputed(train),
            &cfg.sequence_config(),
            &cfg.corrector_train_config(),
            alt,
        )?;
        write_json(&cfg.output.join("predictor.json"), &Predictor::Node(node).to_checkpoint())?;
        write_json(&cfg.output.join("corrector.json"), &Corrector::Ncde(corr).to_checkpoint())?;
        let mut s = String::from("round,predictor_loss,corrector_loss\n");
        for r in &rounds {
            let _ = writeln!(s, "{},{},{}", r.round, r.predictor_loss, r.corrector_loss);
        }
        write_file(&cfg.output.join("alternating_log.csv"), &s)?;
        return Ok(CorrectorRun {
            log: TrainLog::default(),
            rounds,
        });
    }
    let train = bundles(&predictor, &data, Split::Train, cfg.window_stride, Some(cfg.train_horizon))?;
    let (corrector, log) = fit_corrector(cfg, &train)?;
    write_json(&cfg.output.join("corrector.json"), &corrector.to_checkpoint())?;
    write_train_log(&cfg.output, "corrector", &log)?;
    let xs: Vec<f64> = log.epochs.iter().map(|e| e.epoch as f64).collect();
    let ys: Vec<f64> = log.epochs.iter().map(|e| e.median_pass_nfe).collect();
    write_file(
        &cfg.output.join("corrector_nfe.svg"),
        &line_plot_svg("Corrector NFE", "epoch", "median NFE per pass", &[Series::new("NFE", &xs, &ys)]),
    )?;
    Ok(CorrectorRun { log, rounds: Vec::new() })
}

// ---------------------------------------------------------------------------
// evaluate

fn evaluate_on(cfg: &RunConfig, corrector: &Corrector, test: &[ForecastBundle]) -> Result<EvalReport> {
    let len = test.first().map_or(0, ForecastBundle::len);
    if cfg.interpolation_cutoff >= len {
        return Err(Error::invalid(
            "interpolation_cutoff",
            format!("{} is beyond the {len}-point forecasts", cfg.interpolation_cutoff),
        ));
    }
    let (errors, nfe) = corrector.predict(test)?;
    let forecast: Vec<Tensor> = test.iter().map(|b| b.forecast.clone()).collect();
    let truth: Vec<Tensor> = test.iter().map(|b| b.truth.clone()).collect();
    let corrected: Vec<Tensor> = forecast
        .iter()
        .zip(&errors)
        .map(|(f, e)| correct(f, e))
        .collect::<Result<_>>()?;
    let input = EvalInput {
        forecast: &forecast,
        corrected: &corrected,
        truth: &truth,
    };
    let mut report = EvalReport::compute(&input, cfg.interpolation_cutoff, &cutoff_grid(len - 1, cfg.cutoff_step)?, cfg.threshold)?;
    report.inference_nfe = nfe;
    if let Some(s) = cfg.stress {
        if s >= len {
            return Err(Error::invalid("stress", format!("cutoff {s} needs more than the {len}-point forecasts")));
        }
        report.stress = Some(stress_curve(&corrected, &forecast, &truth, &cutoff_grid(s, cfg.cutoff_step)?)?);
    }
    report.config = serde_json::to_value(cfg)?;
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let data = load_data(cfg)?;
    let predictor = load_predictor(cfg)?;
    let corrector = load_corrector(cfg)?;
    if corrector.dim() != data_dim(&data) {
        return Err(Error::invalid("corrector", "dimension differs from the data"));
    }
    prepare_output(cfg)?;
    let test = bundles(&predictor, &data, Split::Test, cfg.window_stride, cfg.eval_horizon)?;
    let report = evaluate_on(cfg, &corrector, &test)?;
    report.write(&cfg.output)?;
    Ok(report)
}

fn data_dim(data: &Data) -> usize {
    match data {
        Data::Trajectories { train, .. } => train.dim,
        Data::Windows(s) => s.dim(),
    }
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub best_val: f64,
    pub epochs: usize,
    pub median_epoch_nfe: f64,
    pub median_pass_nfe: f64,
    pub inference_nfe: usize,
    pub interpolation_reduction: f64,
    pub extrapolation_horizon: Option<usize>,
    pub pareto: bool,
    /// Excluded from the numeric CSV.
    #[serde(skip)]
    pub median_epoch_seconds: f64,
    #[serde(skip)]
    pub nfe_per_epoch: Vec<usize>,
}

/// Uses the checkpoint when it exists, otherwise trains and saves one.
fn obtain_predictor(cfg: &RunConfig, data: &Data) -> Result<Predictor> {
    let path = predictor_path(cfg);
    if path.exists() {
        return load_predictor(cfg);
    }
    let (p, log) = train_predictor_on(cfg, data)?;
    write_json(&cfg.output.join("predictor.json"), &p.to_checkpoint())?;
    write_train_log(&cfg.output, "predictor", &log)?;
    Ok(p)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let sweep = Sweep::parse(cfg.sweep.as_deref().ok_or_else(|| Error::invalid("sweep", "ablate needs a sweep"))?)?;
    let base = serde_json::to_value(cfg)?;
    let variants: Vec<RunConfig> = (0..sweep.values.len())
        .map(|i| RunConfig::resolve(Some(&base), &[], &sweep.overrides(i)))
        .collect::<Result<_>>()?;
    let data = load_data(cfg)?;
    prepare_output(cfg)?;
    let predictor = obtain_predictor(cfg, &data)?;
    let max_train = variants.iter().map(|v| v.train_horizon).max().unwrap_or(cfg.train_horizon);
    let train = bundles(&predictor, &data, Split::Train, cfg.window_stride, Some(max_train))?;
    let test = bundles(&predictor, &data, Split::Test, cfg.window_stride, cfg.eval_horizon)?;
    let mut rows = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let (corrector, log) = fit_corrector(v, &train)?;
        let report = evaluate_on(v, &corrector, &test)?;
        rows.push(AblationRow {
            value: sweep.label(i),
            best_val: log.best_val,
            epochs: log.epochs.len(),
            median_epoch_nfe: log.median_epoch_nfe(),
            median_pass_nfe: crate::train::median(&log.epochs.iter().map(|e| e.median_pass_nfe).collect::<Vec<_>>()),
            inference_nfe: report.inference_nfe,
            interpolation_reduction: report.interpolation_reduction,
            extrapolation_horizon: report.extrapolation_horizon,
            pareto: false,
            median_epoch_seconds: log.median_epoch_seconds(),
            nfe_per_epoch: log.epochs.iter().map(|e| e.nfe).collect(),
        });
    }
    let runs: Vec<ParetoRun> = rows
        .iter()
        .map(|r| ParetoRun {
            nfe: r.median_epoch_nfe,
            horizon: r.extrapolation_horizon.unwrap_or(0),
        })
        .collect();
    for i in pareto_points(&runs) {
        rows[i].pareto = true;
    }
    write_ablation(&cfg.output, &sweep, &rows)?;
    Ok(rows)
}

fn write_ablation(dir: &Path, sweep: &Sweep, rows: &[AblationRow]) -> Result<()> {
    let param = sweep.param.key();
    let mut s = format!(
        "{param},best_val,epochs,median_epoch_nfe,median_pass_nfe,inference_nfe,interpolation_reduction,extrapolation_horizon,pareto\n"
    );
    let mut p = format!("{param},median_epoch_nfe,extrapolation_horizon\n");
    let mut t = format!("{param},median_epoch_seconds\n");
    let mut n = format!("{param},epoch,nfe\n");
    for r in rows {
        let h = r.extrapolation_horizon.map_or(String::new(), |h| h.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.value, r.best_val, r.epochs, r.median_epoch_nfe, r.median_pass_nfe, r.inference_nfe, r.interpolation_reduction, h, r.pareto
        );
        if r.pareto {
            let _ = writeln!(p, "{},{},{}", r.value, r.median_epoch_nfe, h);
        }
        let _ = writeln!(t, "{},{}", r.value, r.median_epoch_seconds);
        for (e, nfe) in r.nfe_per_epoch.iter().enumerate() {
            let _ = writeln!(n, "{},{},{}", r.value, e, nfe);
        }
    }
    write_file(&dir.join("ablate.csv"), &s)?;
    write_file(&dir.join("pareto.csv"), &p)?;
    write_file(&dir.join("ablate_timing.csv"), &t)?;
    write_file(&dir.join("ablate_nfe.csv"), &n)?;
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| (0..r.nfe_per_epoch.len()).map(|e| e as f64).collect()).collect();
    let ys: Vec<Vec<f64>> = rows.iter().map(|r| r.nfe_per_epoch.iter().map(|&v| v as f64).collect()).collect();
    let labels: Vec<String> = rows.iter().map(|r| format!("{param} = {}", r.value)).collect();
    let series: Vec<Series<'_>> = (0..rows.len()).map(|i| Series::new(&labels[i], &xs[i], &ys[i])).collect();
    write_file(&dir.join("ablate_nfe.svg"), &line_plot_svg("Training NFE", "epoch", "NFE", &series))
}
