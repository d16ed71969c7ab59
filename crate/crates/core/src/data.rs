//! Trajectories, datasets, sampling transforms and CSV I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `[T, D]`
    pub states: Tensor,
    /// Row-major `[T, D]` observed flags.
    pub mask: Option<Vec<bool>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Tensor) -> Result<Self> {
        let t = Trajectory {
            times,
            states,
            mask: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.shape().len() != 2 || self.states.rows() != self.times.len() {
            return Err(Error::shape(
                "Trajectory",
                format!("{} times but states {:?}", self.times.len(), self.states.shape()),
            ));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times", "trajectory times must be strictly increasing"));
        }
        if !self.states.is_finite() {
            return Err(Error::NonFinite { op: "Trajectory" });
        }
        if let Some(m) = &self.mask {
            let d = self.dim();
            if m.len() != self.states.len() {
                return Err(Error::shape("Trajectory", "mask size differs from states"));
            }
            if d > 0 && m.chunks(d).any(|row| !row.iter().any(|&o| o)) {
                return Err(Error::invalid("mask", "every point needs one observed feature"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Trajectory {
        let d = self.dim();
        Trajectory {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            states: self.states.select_rows(idx),
            mask: self
                .mask
                .as_ref()
                .map(|m| idx.iter().flat_map(|&i| m[i * d..(i + 1) * d].iter().copied()).collect()),
        }
    }

    pub fn head(&self, n: usize) -> Trajectory {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// States with unobserved entries replaced by the last observed value of
    /// the same feature; a leading gap takes the first observed value.
    pub fn imputed(&self) -> Tensor {
        let Some(mask) = &self.mask else {
            return self.states.clone();
        };
        let (n, d) = (self.len(), self.dim());
        let mut out = self.states.clone();
        for j in 0..d {
            let first = (0..n).find(|&i| mask[i * d + j]);
            let mut last = first.map(|i| self.states.row(i)[j]);
            for i in 0..n {
                if mask[i * d + j] {
                    last = Some(self.states.row(i)[j]);
                } else if let Some(v) = last {
                    out.row_mut(i)[j] = v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    System(crate::systems::SystemSpec),
    Csv(PathBuf),
    Derived(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub dim: usize,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, provenance: Provenance) -> Result<Self> {
        let dim = trajectories.first().map(Trajectory::dim).unwrap_or(0);
        if trajectories.iter().any(|t| t.dim() != dim) {
            return Err(Error::invalid("dataset", "trajectories differ in dimension"));
        }
        Ok(Dataset {
            trajectories,
            dim,
            split: None,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            trajectories: idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            dim: self.dim,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(&Trajectory) -> Trajectory) -> Dataset {
        Dataset {
            trajectories: self.trajectories.iter().map(f).collect(),
            ..self.clone()
        }
    }

    /// Shortest trajectory length.
    pub fn min_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).min().unwrap_or(0)
    }
}

/// Deterministic RNG for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Disjoint shuffled partition with `round(ratio · N)` training items.
pub fn split_train_test(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset", "cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    let n = ds.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid("ratio", format!("{ratio} of {n} leaves an empty split")));
    }
    let (train_idx, test_idx) = split_indices(n, n_train, seed);
    let mut train = ds.subset(&train_idx);
    let mut test = ds.subset(&test_idx);
    train.split = Some(Split::Train);
    test.split = Some(Split::Test);
    Ok((train, test))
}

/// Sorted index sets of a random `n_train` / `n - n_train` partition.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<usize> = sample(&mut rng, n, n_train).into_vec();
    train.sort_unstable();
    let mut is_train = vec![false; n];
    train.iter().for_each(|&i| is_train[i] = true);
    let test = (0..n).filter(|&i| !is_train[i]).collect();
    (train, test)
}

/// `⌈fraction · len⌉` without being pushed up by rounding noise.
pub fn retained_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Sorted indices of a random subset of `0..len` of size
/// `⌈fraction · len⌉`, index 0 always included.
pub fn sample_indices(len: usize, fraction: f64, min_points: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("must lie in (0, 1], got {fraction}")));
    }
    let k = retained_count(len, fraction).min(len);
    if k < min_points {
        return Err(Error::invalid(
            "fraction",
            format!("{fraction} of {len} points keeps {k}, fewer than {min_points}"),
        ));
    }
    if k == len {
        return Ok((0..len).collect());
    }
    let mut idx: Vec<usize> = sample(rng, len - 1, k - 1).into_iter().map(|i| i + 1).collect();
    idx.push(0);
    idx.sort_unstable();
    Ok(idx)
}

/// Simulated irregular sampling of one trajectory.
pub fn subsample_irregular(traj: &Trajectory, fraction: f64, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_indices(traj.len(), fraction, 2, &mut rng)?;
    Ok(traj.select(&idx))
}

/// Marks `⌊D/2⌋` random features unobserved on `⌈point_fraction · T⌉`
/// random points. States are left untouched; see [`Trajectory::imputed`].
pub fn mask_features(traj: &Trajectory, point_fraction: f64, seed: u64) -> Result<Trajectory> {
    let d = traj.dim();
    if d < 2 {
        return Err(Error::invalid("dimension", "masking needs at least two features"));
    }
    if !(0.0..=1.0).contains(&point_fraction) {
        return Err(Error::invalid("point_fraction", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = traj.len();
    let mut mask = traj.mask.clone().unwrap_or_else(|| vec![true; n * d]);
    let points = sample(&mut rng, n, retained_count(n, point_fraction).min(n)).into_vec();
    for i in points {
        for j in sample(&mut rng, d, d / 2) {
            mask[i * d + j] = false;
        }
    }
    let mut out = traj.clone();
    out.mask = Some(mask);
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectory CSV files and manifests

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = traj.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    if traj.mask.is_some() {
        header.extend((0..d).map(|j| format!("m{j}")));
    }
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut rec = vec![traj.times[i].to_string()];
        rec.extend(traj.states.row(i).iter().map(f64::to_string));
        if let Some(m) = &traj.mask {
            rec.extend(m[i * d..(i + 1) * d].iter().map(|&o| u8::from(o).to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_cell(cell: &str, path: &Path, line: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::invalid(
            "csv",
            format!("{}: line {line}: non-numeric cell {cell:?}", path.display()),
        )
    })
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let masked = headers.iter().any(|h| h.starts_with('m'));
    let cols = headers.len();
    let d = if masked { (cols - 1) / 2 } else { cols - 1 };
    if d == 0 || (masked && cols != 1 + 2 * d) {
        return Err(Error::invalid("csv", format!("{}: unexpected header", path.display())));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut mask = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        times.push(parse_cell(&rec[0], path, line + 2)?);
        for j in 0..d {
            states.push(parse_cell(&rec[1 + j], path, line + 2)?);
        }
        if masked {
            for j in 0..d {
                mask.push(parse_cell(&rec[1 + d + j], path, line + 2)? != 0.0);
            }
        }
    }
    let n = times.len();
    let mut t = Trajectory::new(times, Tensor::new(vec![n, d], states)?)?;
    if masked {
        t.mask = Some(mask);
        t.validate()?;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub dim: usize,
    pub dt: f64,
    pub timesteps: usize,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Writes one CSV per trajectory plus `manifest.json` into `dir`.
pub fn write_dataset_dir(
    dir: &Path,
    train: &Dataset,
    test: &Dataset,
    dt: f64,
    seed: u64,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (split, ds) in [(Split::Train, train), (Split::Test, test)] {
        for traj in &ds.trajectories {
            let name = format!("traj_{:05}.csv", files.len());
            write_trajectory_csv(&dir.join(&name), traj)?;
            files.push(ManifestEntry { file: name, split });
        }
    }
    let manifest = Manifest {
        provenance: train.provenance.clone(),
        dim: train.dim,
        dt,
        timesteps: train.min_len(),
        seed,
        files,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Reads the train and test splits listed in `dir/manifest.json`.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset, Manifest)> {
    let manifest = Manifest::read(dir)?;
    let mut parts = [Vec::new(), Vec::new()];
    for entry in &manifest.files {
        let t = read_trajectory_csv(&dir.join(&entry.file))?;
        if t.dim() != manifest.dim {
            return Err(Error::invalid("manifest", format!("{} has dimension {}", entry.file, t.dim())));
        }
        parts[usize::from(entry.split == Split::Test)].push(t);
    }
    let [train, test] = parts;
    let mut a = Dataset::new(train, manifest.provenance.clone())?;
    let mut b = Dataset::new(test, manifest.provenance.clone())?;
    a.dim = manifest.dim;
    b.dim = manifest.dim;
    a.split = Some(Split::Train);
    b.split = Some(Split::Test);
    Ok((a, b, manifest))
}

// ---------------------------------------------------------------------------
// Long-series CSV ingestion for direct multi-step forecasting

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[lookback, D]`
    pub input: Tensor,
    /// `[horizon, D]`
    pub target: Tensor,
}

/// A normalised multivariate series with chronological train/val/test
/// borders (70/10/20, each later split starting `lookback` rows early).
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub columns: Vec<String>,
    /// `[len, D]`, standardised with the train statistics.
    pub series: Tensor,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub lookback: usize,
    pub horizon: usize,
    pub borders: [(usize, usize); 3],
}

impl SeriesDataset {
    pub fn from_series(columns: Vec<String>, raw: &Tensor, lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::invalid("window", "lookback and horizon must be positive"));
        }
        let len = raw.rows();
        if len < lookback + horizon {
            return Err(Error::invalid(
                "csv",
                format!("series of {len} rows is shorter than lookback + horizon = {}", lookback + horizon),
            ));
        }
        let n_train = (len as f64 * 0.7) as usize;
        let n_test = (len as f64 * 0.2) as usize;
        let n_val = len - n_train - n_test;
        let borders = [
            (0, n_train),
            (n_train.saturating_sub(lookback), n_train + n_val),
            ((len - n_test).saturating_sub(lookback), len),
        ];
        let d = raw.cols();
        let stats_rows = n_train.max(1);
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = (0..stats_rows).map(|i| raw.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / stats_rows as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / stats_rows as f64;
            mean[j] = m;
            std[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        let mut series = raw.clone();
        for i in 0..len {
            for (j, x) in series.row_mut(i).iter_mut().enumerate() {
                *x = (*x - mean[j]) / std[j];
            }
        }
        Ok(SeriesDataset {
            columns,
            series,
            mean,
            std,
            lookback,
            horizon,
            borders,
        })
    }

    pub fn dim(&self) -> usize {
        self.series.cols()
    }

    fn windows_in(&self, lo: usize, hi: usize) -> Vec<Window> {
        let span = self.lookback + self.horizon;
        if hi < lo + span {
            return Vec::new();
        }
        (lo..=hi - span)
            .map(|s| Window {
                input: self.series.slice_rows(s, s + self.lookback),
                target: self.series.slice_rows(s + self.lookback, s + span),
            })
            .collect()
    }

    /// Stride-1 windows over the whole series.
    pub fn all_windows(&self) -> Vec<Window> {
        self.windows_in(0, self.series.rows())
    }

    /// Windows of split 0 (train), 1 (validation) or 2 (test).
    pub fn split_windows(&self, split: usize) -> Vec<Window> {
        let (lo, hi) = self.borders[split];
        self.windows_in(lo, hi)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = self.dim();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }
}

/// Reads a header-row CSV whose first column is a time stamp (kept only as
/// the row order) followed by numeric columns.
pub fn load_csv_dataset(path: &Path, lookback: usize, horizon: usize) -> Result<SeriesDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::invalid("csv", format!("{}: needs a time column and data", path.display())));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let d = columns.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::invalid("csv", format!("{}: line {} has {} cells", path.display(), line + 2, rec.len())));
        }
        for cell in rec.iter().skip(1) {
            data.push(parse_cell(cell, path, line + 2)?);
        }
        rows += 1;
    }
    let raw = Tensor::new(vec![rows, d], data)?;
    SeriesDataset::from_series(columns, &raw, lookback, horizon)
}
