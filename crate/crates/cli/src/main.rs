use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use predcorr::commands;
use predcorr::config::{parse_override, preset_names, RunConfig};
use predcorr::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "predcorr", version, about = "Predictor-corrector forecasting with a neural CDE error model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of trajectory CSVs and a manifest.
    Generate(RunArgs),
    /// Train the NODE, RNN or DLinear predictor.
    TrainPredictor(RunArgs),
    /// Train the corrector on forecasts of a trained predictor.
    TrainCorrector(RunArgs),
    /// Report test MSE with and without correction.
    Evaluate(RunArgs),
    /// Sweep one corrector setting and report NFE, accuracy and Pareto points.
    Ablate(RunArgs),
    /// List preset names.
    Presets,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON file with run-config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named presets, applied in order before other keys.
    #[arg(long, value_delimiter = ',')]
    preset: Vec<String>,
    /// Arbitrary override, e.g. `solver.rtol=1e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    corrector: Option<String>,
    #[arg(long)]
    observed_fraction: Option<f64>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    train_horizon: Option<usize>,
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    interpolation: Option<String>,
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    predictor_epochs: Option<usize>,
    #[arg(long)]
    corrector_epochs: Option<usize>,
    #[arg(long)]
    eval_horizon: Option<usize>,
    /// Add log-MSE stress curves up to this cutoff.
    #[arg(long)]
    stress: Option<usize>,
    /// Parameter and optional values, e.g. `--sweep kappa 0.5:1.0:0.1`.
    #[arg(long, num_args = 1..=2, value_names = ["PARAM", "VALUES"])]
    sweep: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(serde_json::from_str::<Value>(&text)?)
            }
            None => None,
        };
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
        macro_rules! flag {
            ($field:ident, $key:expr) => {
                if let Some(v) = &self.$field {
                    put($key, json!(v));
                }
            };
        }
        flag!(seed, "seed");
        flag!(system, "system");
        flag!(trajectories, "trajectories");
        flag!(timesteps, "timesteps");
        flag!(data_dir, "data_dir");
        flag!(csv, "csv");
        flag!(output, "output");
        flag!(predictor, "predictor");
        flag!(corrector, "corrector");
        flag!(observed_fraction, "observed_fraction");
        flag!(mask_fraction, "mask_fraction");
        flag!(kappa, "kappa");
        flag!(eta, "eta");
        flag!(train_horizon, "train_horizon");
        flag!(decoder, "decoder");
        flag!(interpolation, "interpolation");
        flag!(solver, "solver.solver");
        flag!(predictor_epochs, "predictor_training.max_epochs");
        flag!(corrector_epochs, "corrector_training.max_epochs");
        flag!(eval_horizon, "eval_horizon");
        flag!(stress, "stress");
        if !self.sweep.is_empty() {
            put("sweep", json!(self.sweep.join(" ")));
        }
        for s in &self.set {
            o.push(parse_override(s)?);
        }
        RunConfig::resolve(file.as_ref(), &self.preset, &o)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
        }
        Command::Generate(a) => {
            let cfg = a.resolve()?;
            let m = commands::cmd_generate(&cfg)?;
            println!("wrote {} trajectories (D = {}, dt = {})", m.files.len(), m.dim, m.dt);
        }
        Command::TrainPredictor(a) => {
            let cfg = a.resolve()?;
            let log = commands::cmd_train_predictor(&cfg)?;
            println!(
                "predictor: {} epochs, best validation loss {} at epoch {}",
                log.epochs.len(),
                log.best_val,
                log.best_epoch
            );
        }
        Command::TrainCorrector(a) => {
            let cfg = a.resolve()?;
            let run = commands::cmd_train_corrector(&cfg)?;
            if run.rounds.is_empty() {
                println!(
                    "corrector: {} epochs, best validation loss {}, median epoch NFE {}",
                    run.log.epochs.len(),
                    run.log.best_val,
                    run.log.median_epoch_nfe()
                );
            } else {
                println!("alternating: {} rounds", run.rounds.len());
            }
        }
        Command::Evaluate(a) => {
            let cfg = a.resolve()?;
            let r = commands::cmd_evaluate(&cfg)?;
            let horizon = r.extrapolation_horizon.map_or("none".to_string(), |h| h.to_string());
            println!(
                "0-{} reduction {:.2}%, extrapolation horizon {} at {}%",
                r.interpolation_cutoff, r.interpolation_reduction, horizon, r.threshold_percent
            );
        }
        Command::Ablate(a) => {
            let cfg = a.resolve()?;
            for r in commands::cmd_ablate(&cfg)? {
                let horizon = r.extrapolation_horizon.map_or("none".to_string(), |h| h.to_string());
                println!(
                    "{}: median epoch NFE {}, reduction {:.2}%, horizon {}{}",
                    r.value,
                    r.median_epoch_nfe,
                    r.interpolation_reduction,
                    horizon,
                    if r.pareto { " (pareto)" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
