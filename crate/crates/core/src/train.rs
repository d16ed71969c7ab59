//! Training loop plumbing shared by predictors and correctors.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Global gradient-norm clipping; `None` leaves gradients untouched.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            patience: 20,
            val_fraction: 0.1,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction", "must lie in [0, 1)"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::invalid("clip_norm", "must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self, params: &[&Tensor]) -> Adam {
        let mut opt = Adam::new(self.lr, params);
        opt.clip_norm = self.clip_norm;
        opt
    }

    /// Train/validation index sets for `n` items; validation is empty when
    /// the carve-out would leave the training side empty.
    pub fn carve_validation(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let n_val = (self.val_fraction * n as f64).round() as usize;
        if n_val == 0 || n_val >= n {
            return ((0..n).collect(), Vec::new());
        }
        crate::data::split_indices(n, n - n_val, self.seed ^ 0x5eed_0f_ba1)
    }

    /// Shuffled mini-batches of `0..n` for `epoch`.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(self.seed, epoch as u64));
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Vector-field evaluations of all training forward passes.
    pub nfe: usize,
    /// Median NFE of a single forward pass.
    pub median_pass_nfe: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Best validation loss after each epoch.
    pub best_so_far: Vec<f64>,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn median_epoch_nfe(&self) -> f64 {
        median(&self.epochs.iter().map(|e| e.nfe as f64).collect::<Vec<_>>())
    }

    pub fn median_epoch_seconds(&self) -> f64 {
        median(&self.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>())
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Tracks the best validation loss and signals when patience runs out.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val: f64) -> Progress {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.waited = 0;
            Progress::Improved
        } else {
            self.waited += 1;
            if self.waited >= self.patience {
                Progress::Stop
            } else {
                Progress::Waiting
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Runs epochs until patience or `max_epochs` ends training. `epoch_fn`
/// returns `(train_loss, val_loss, nfe, pass_nfes)`; `on_improve` snapshots
/// the current parameters.
pub fn run_epochs(
    cfg: &TrainConfig,
    mut epoch_fn: impl FnMut(usize) -> Result<(f64, f64, usize, Vec<usize>)>,
    mut on_improve: impl FnMut(),
) -> Result<TrainLog> {
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let (train_loss, val_loss, nfe, passes) = epoch_fn(epoch)?;
        let seconds = start.elapsed().as_secs_f64();
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: train loss {train_loss}, validation loss {val_loss}"
            )));
        }
        let progress = stop.update(epoch, val_loss);
        if progress == Progress::Improved {
            on_improve();
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            nfe,
            median_pass_nfe: median(&passes.iter().map(|&n| n as f64).collect::<Vec<_>>()),
            seconds,
        });
        log.best_so_far.push(stop.best());
        if progress == Progress::Stop {
            break;
        }
    }
    log.best_epoch = stop.best_epoch();
    log.best_val = stop.best();
    Ok(log)
}
