//! Benchmark dynamical systems and synthetic trajectory generation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::data::{stream_rng, Dataset, Provenance, Trajectory};
use crate::error::{Error, Result};
use crate::ode::{self, Method, SolverConfig, VectorField};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Lorenz,
    #[serde(alias = "lv")]
    LotkaVolterra,
    Fhn,
    #[serde(alias = "glyco")]
    Glycolytic,
    Linear2,
    Linear3,
    Linear4,
}

impl SystemKind {
    pub const ALL: [SystemKind; 7] = [
        SystemKind::Lorenz,
        SystemKind::LotkaVolterra,
        SystemKind::Fhn,
        SystemKind::Glycolytic,
        SystemKind::Linear2,
        SystemKind::Linear3,
        SystemKind::Linear4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Lorenz => "lorenz",
            SystemKind::LotkaVolterra => "lotka_volterra",
            SystemKind::Fhn => "fhn",
            SystemKind::Glycolytic => "glycolytic",
            SystemKind::Linear2 => "linear2",
            SystemKind::Linear3 => "linear3",
            SystemKind::Linear4 => "linear4",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            SystemKind::Lorenz => 3,
            SystemKind::LotkaVolterra | SystemKind::Fhn | SystemKind::Linear2 => 2,
            SystemKind::Glycolytic => 7,
            SystemKind::Linear3 => 3,
            SystemKind::Linear4 => 4,
        }
    }

    /// Named constants of the right-hand side.
    pub fn parameters(self) -> Vec<(&'static str, f64)> {
        match self {
            SystemKind::Lorenz => vec![("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)],
            SystemKind::LotkaVolterra => {
                vec![("alpha", 1.1), ("beta", 0.4), ("gamma", 0.4), ("delta", 0.1)]
            }
            SystemKind::Fhn => vec![("a", 0.7), ("b", 0.8), ("epsilon", 0.08), ("I", 0.5)],
            SystemKind::Glycolytic => vec![
                ("J0", glyco::J0),
                ("k1", glyco::K1R),
                ("k2", glyco::K2),
                ("k3", glyco::K3),
                ("k4", glyco::K4),
                ("k5", glyco::K5),
                ("k6", glyco::K6),
                ("k", glyco::K),
                ("kappa", glyco::KAPPA),
                ("q", glyco::Q),
                ("K1", glyco::K1),
                ("psi", glyco::PSI),
                ("N", glyco::N),
                ("A", glyco::A),
            ],
            SystemKind::Linear2 => vec![("c0", 1.0), ("c1", 0.3)],
            SystemKind::Linear3 => vec![("c0", 1.0), ("c1", 0.3), ("c2", 0.4)],
            SystemKind::Linear4 => vec![("c0", 1.0), ("c1", 0.3), ("c2", 0.5), ("c3", 0.3)],
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = match s.replace('-', "_").as_str() {
            "lv" => "lotka_volterra".to_string(),
            "glyco" => "glycolytic".to_string(),
            other => other.to_string(),
        };
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("system", format!("unknown system {s:?}")))
    }
}

mod glyco {
    pub const J0: f64 = 2.5;
    pub const K1R: f64 = 100.0;
    pub const K2: f64 = 6.0;
    pub const K3: f64 = 16.0;
    pub const K4: f64 = 100.0;
    pub const K5: f64 = 1.28;
    pub const K6: f64 = 12.0;
    pub const K: f64 = 1.8;
    pub const KAPPA: f64 = 13.0;
    pub const Q: f64 = 4.0;
    pub const K1: f64 = 0.52;
    pub const PSI: f64 = 0.1;
    pub const N: f64 = 1.0;
    pub const A: f64 = 4.0;
}

/// Coefficients `c_j` of `x^(D) = -Σ c_j x^(j)` for the linear systems.
fn linear_coeffs(kind: SystemKind) -> Option<&'static [f64]> {
    match kind {
        SystemKind::Linear2 => Some(&[1.0, 0.3]),
        SystemKind::Linear3 => Some(&[1.0, 0.3, 0.4]),
        SystemKind::Linear4 => Some(&[1.0, 0.3, 0.5, 0.3]),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub dt: f64,
    pub timesteps: usize,
    pub trajectories: usize,
    /// Per-dimension `(low, high)` initial-condition ranges.
    pub ic_box: Vec<(f64, f64)>,
}

impl SystemSpec {
    /// Reference generation settings; the linear systems use `[-2, 2]^D`,
    /// Δt = 0.1, 300 steps and 500 trajectories.
    pub fn preset(kind: SystemKind) -> Self {
        let (dt, timesteps, trajectories, ic_box): (f64, usize, usize, Vec<(f64, f64)>) = match kind {
            SystemKind::LotkaVolterra => (0.1, 300, 500, vec![(5.0, 20.0), (5.0, 10.0)]),
            SystemKind::Lorenz => (0.01, 300, 1000, vec![(-20.0, 20.0), (-20.0, 20.0), (0.0, 50.0)]),
            SystemKind::Fhn => (0.5, 400, 350, vec![(-1.5, 1.5), (-1.5, 1.5)]),
            SystemKind::Glycolytic => (
                0.01,
                400,
                750,
                vec![
                    (0.15, 1.60),
                    (0.19, 2.16),
                    (0.04, 0.20),
                    (0.10, 0.35),
                    (0.08, 0.30),
                    (0.14, 2.67),
                    (0.05, 0.10),
                ],
            ),
            k => (0.1, 300, 500, vec![(-2.0, 2.0); k.dim()]),
        };
        SystemSpec {
            kind,
            dt,
            timesteps,
            trajectories,
            ic_box,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if self.timesteps < 2 {
            return Err(Error::invalid("timesteps", "need at least two samples"));
        }
        if self.trajectories == 0 {
            return Err(Error::invalid("trajectories", "must be positive"));
        }
        if self.ic_box.len() != self.dim() {
            return Err(Error::invalid(
                "ic_box",
                format!("{} ranges for a {}-dimensional system", self.ic_box.len(), self.dim()),
            ));
        }
        if self.ic_box.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("ic_box", "each range needs finite low <= high"));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.timesteps).map(|i| i as f64 * self.dt).collect()
    }
}

/// `dx/dt` of one state.
pub fn vector_field(kind: SystemKind, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != kind.dim() {
        return Err(Error::shape(
            "vector_field",
            format!("{kind} has dimension {}, got {}", kind.dim(), x.len()),
        ));
    }
    let mut out = vec![0.0; x.len()];
    field_into(kind, x, &mut out);
    Ok(out)
}

fn field_into(kind: SystemKind, x: &[f64], out: &mut [f64]) {
    match kind {
        SystemKind::Lorenz => {
            let (s, r, b) = (10.0, 28.0, 8.0 / 3.0);
            out[0] = s * (x[1] - x[0]);
            out[1] = x[0] * (r - x[2]) - x[1];
            out[2] = x[0] * x[1] - b * x[2];
        }
        SystemKind::LotkaVolterra => {
            let (a, b, g, d) = (1.1, 0.4, 0.4, 0.1);
            out[0] = a * x[0] - b * x[0] * x[1];
            out[1] = d * x[0] * x[1] - g * x[1];
        }
        SystemKind::Fhn => {
            let (a, b, eps, i) = (0.7, 0.8, 0.08, 0.5);
            out[0] = x[0] - x[0].powi(3) / 3.0 - x[1] + i;
            out[1] = eps * (x[0] + a - b * x[1]);
        }
        SystemKind::Glycolytic => {
            use glyco::*;
            let [s1, s2, s3, s4, s5, s6, s7] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
            let v1 = K1R * s1 * s6 / (1.0 + (s6 / K1).powf(Q));
            let v2 = K2 * s2 * (N - s5);
            let v3 = K3 * s3 * (A - s6);
            let v4 = K4 * s4 * s5;
            let v6 = K6 * s2 * s5;
            let leak = KAPPA * (s4 - s7);
            out[0] = J0 - v1;
            out[1] = 2.0 * v1 - v2 - v6;
            out[2] = v2 - v3;
            out[3] = v3 - v4 - leak;
            out[4] = v2 - v4 - v6;
            out[5] = -2.0 * v1 + 2.0 * v3 - K5 * s6;
            out[6] = PSI * leak - K * s7;
        }
        k => {
            let c = linear_coeffs(k).expect("linear system");
            let d = c.len();
            out[..d - 1].copy_from_slice(&x[1..]);
            out[d - 1] = -c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>();
        }
    }
}

/// The true right-hand side as a solver field over `[rows, D]` states.
/// Values are computed outside any tape.
#[derive(Clone, Copy, Debug)]
pub struct SystemField(pub SystemKind);

impl<B: Backend> VectorField<B> for SystemField {
    fn eval(&self, b: &B, _t: f64, _step_start: f64, y: &B::V) -> Result<B::V> {
        let y = b.value(y);
        let d = self.0.dim();
        if y.shape().len() != 2 || y.cols() != d {
            return Err(Error::shape("SystemField", format!("state {:?} for {}", y.shape(), self.0)));
        }
        let mut out = Tensor::zeros(y.shape());
        for r in 0..y.rows() {
            field_into(self.0, y.row(r), out.row_mut(r));
        }
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "SystemField" });
        }
        Ok(b.constant(out))
    }
}

fn draw_ic(spec: &SystemSpec, rng: &mut impl Rng) -> Vec<f64> {
    spec.ic_box
        .iter()
        .map(|&(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
        .collect()
}

/// `n` uniform samples from the initial-condition box; sample `i` comes
/// from stream `i` of `seed`.
pub fn sample_initial_conditions(spec: &SystemSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n", "must be positive"));
    }
    Ok((0..n).map(|i| draw_ic(spec, &mut stream_rng(seed, i as u64))).collect())
}

/// Generation-grade solver settings.
pub fn datagen_solver() -> SolverConfig {
    SolverConfig {
        max_steps: 5_000_000,
        ..SolverConfig::with_method(Method::Dopri5).tolerances(1e-6, 1e-9)
    }
}

/// Integrates one initial condition onto the regular grid of `spec`.
pub fn integrate_trajectory(spec: &SystemSpec, x0: &[f64]) -> Result<Trajectory> {
    let times = spec.times();
    let y0 = Eager.constant(Tensor::matrix(1, x0.len(), x0.to_vec())?);
    let solved = ode::integrate(&Eager, &datagen_solver(), &SystemField(spec.kind), &y0, &times)
        .map_err(|e| Error::Integration {
            initial: x0.to_vec(),
            source: Box::new(e),
        })?;
    let states: Vec<f64> = solved.states.iter().flat_map(|s| s.data().to_vec()).collect();
    Trajectory::new(times.clone(), Tensor::new(vec![times.len(), x0.len()], states)?)
}

pub fn generate_dataset(spec: &SystemSpec, seed: u64) -> Result<Dataset> {
    let ics = sample_initial_conditions(spec, spec.trajectories, seed)?;
    let trajectories = ics
        .iter()
        .map(|x0| integrate_trajectory(spec, x0))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, Provenance::System(spec.clone()))
}

/// Fraction of trajectories whose states stay strictly positive.
pub fn positive_fraction(ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 1.0;
    }
    let ok = ds
        .trajectories
        .iter()
        .filter(|t| t.states.data().iter().all(|&v| v > 0.0))
        .count();
    ok as f64 / ds.len() as f64
}

/// Closed-form solution of `x'' + 0.3x' + x = 0` as `(x, x')`.
pub fn damped_oscillator(x0: f64, v0: f64, t: f64) -> (f64, f64) {
    let zeta = 0.15;
    let w = (1.0f64 - zeta * zeta).sqrt();
    let a = x0;
    let b = (v0 + zeta * x0) / w;
    let (s, c) = (w * t).sin_cos();
    let e = (-zeta * t).exp();
    let x = e * (a * c + b * s);
    let v = e * (-zeta * (a * c + b * s) + w * (-a * s + b * c));
    (x, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    #[test]
    fn field_substitutions() {
        let f = vector_field(SystemKind::Fhn, &[0.0, 0.0]).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-15 && (f[1] - 0.056).abs() < 1e-15);
        let f = vector_field(SystemKind::Lorenz, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert!((f[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
        let f = vector_field(SystemKind::LotkaVolterra, &[10.0, 5.0]).unwrap();
        assert!((f[0] + 9.0).abs() < 1e-12 && (f[1] - 3.0).abs() < 1e-12);
        assert!(vector_field(SystemKind::Lorenz, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn linear_fields() {
        assert_eq!(vector_field(SystemKind::Linear2, &[1.0, 2.0]).unwrap(), vec![2.0, -1.6]);
        let f = vector_field(SystemKind::Linear4, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(&f[..3], &[1.0, 1.0, 1.0]);
        assert!((f[3] + 2.1).abs() < 1e-15);
    }

    #[test]
    fn glycolytic_field_by_hand() {
        let x = [1.0, 1.0, 0.1, 0.2, 0.2, 1.0, 0.07];
        let f = vector_field(SystemKind::Glycolytic, &x).unwrap();
        let v1 = 100.0 / (1.0 + (1.0f64 / 0.52).powi(4));
        assert!((f[0] - (2.5 - v1)).abs() < 1e-12);
        let v2 = 6.0 * 0.8;
        let v6 = 12.0 * 0.2;
        assert!((f[1] - (2.0 * v1 - v2 - v6)).abs() < 1e-12);
        assert!((f[6] - (0.1 * 13.0 * 0.13 - 1.8 * 0.07)).abs() < 1e-12);
    }

    #[test]
    fn initial_conditions() {
        let spec = SystemSpec::preset(SystemKind::Fhn);
        let ics = sample_initial_conditions(&spec, 1000, 4).unwrap();
        assert!(ics.iter().flatten().all(|v| (-1.5..=1.5).contains(v)));
        assert_eq!(ics, sample_initial_conditions(&spec, 1000, 4).unwrap());
        let mut degenerate = spec.clone();
        degenerate.ic_box = vec![(0.25, 0.25), (-1.0, -1.0)];
        let ics = sample_initial_conditions(&degenerate, 10, 1).unwrap();
        assert!(ics.iter().all(|x| x == &[0.25, -1.0]));
    }

    #[test]
    fn presets_match_reference_table() {
        let want = [
            (SystemKind::LotkaVolterra, 0.1, 300, 500),
            (SystemKind::Lorenz, 0.01, 300, 1000),
            (SystemKind::Fhn, 0.5, 400, 350),
            (SystemKind::Glycolytic, 0.01, 400, 750),
        ];
        for (k, dt, t, n) in want {
            let s = SystemSpec::preset(k);
            assert_eq!((s.dt, s.timesteps, s.trajectories), (dt, t, n));
            s.validate().unwrap();
        }
    }

    #[test]
    fn linear2_matches_closed_form() {
        let mut spec = SystemSpec::preset(SystemKind::Linear2);
        spec.trajectories = 3;
        spec.timesteps = 200;
        let ds = generate_dataset(&spec, 11).unwrap();
        for traj in &ds.trajectories {
            let x0 = traj.states.row(0).to_vec();
            for (i, &t) in traj.times.iter().enumerate() {
                let (x, v) = damped_oscillator(x0[0], x0[1], t);
                let row = traj.states.row(i);
                assert!((row[0] - x).abs() < 1e-5 && (row[1] - v).abs() < 1e-5, "t = {t}");
            }
        }
    }

    #[test]
    fn reintegration_reproduces_trajectory() {
        let mut spec = SystemSpec::preset(SystemKind::Fhn);
        spec.trajectories = 2;
        spec.timesteps = 60;
        let ds = generate_dataset(&spec, 2).unwrap();
        for t in &ds.trajectories {
            let again = integrate_trajectory(&spec, t.states.row(0)).unwrap();
            assert!(again.states.sub(&t.states).unwrap().max_abs() < 1e-5);
        }
    }

    #[test]
    fn residual_check_on_damped_oscillator() {
        let mut spec = SystemSpec::preset(SystemKind::Linear2);
        spec.trajectories = 1;
        let ds = generate_dataset(&spec, 5).unwrap();
        let t = &ds.trajectories[0];
        let dt = spec.dt;
        for i in 1..t.len() - 1 {
            let slope: Vec<f64> = (0..2)
                .map(|j| (t.states.row(i + 1)[j] - t.states.row(i - 1)[j]) / (2.0 * dt))
                .collect();
            let f = vector_field(SystemKind::Linear2, t.states.row(i)).unwrap();
            // central difference error is x'''·dt²/6 with |x'''| ≲ 3
            for j in 0..2 {
                assert!((slope[j] - f[j]).abs() < 0.5 * dt * dt, "i = {i}");
            }
        }
    }

    #[test]
    fn lorenz_matches_fine_euler() {
        let x0 = vec![1.0, -2.0, 20.0];
        let y0 = Rc::new(Tensor::matrix(1, 3, x0.clone()).unwrap());
        // At rtol 1e-3 the local error budget on |z| ≈ 36 is far above 1e-3,
        // and Euler at h = 1e-5 is itself ≈ 3e-3 off over this horizon.
        let cfg = datagen_solver();
        let adaptive = ode::integrate(&Eager, &cfg, &SystemField(SystemKind::Lorenz), &y0, &[0.0, 0.5]).unwrap();
        let mut x = x0;
        for _ in 0..500_000 {
            let f = vector_field(SystemKind::Lorenz, &x).unwrap();
            for j in 0..3 {
                x[j] += 1e-6 * f[j];
            }
        }
        let y = adaptive.states[1].data();
        let err = (0..3).map(|j| (y[j] - x[j]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "max-norm gap {err}");
    }

    #[test]
    fn glycolytic_positivity_is_reported() {
        let mut spec = SystemSpec::preset(SystemKind::Glycolytic);
        spec.trajectories = 3;
        spec.timesteps = 100;
        let ds = generate_dataset(&spec, 1).unwrap();
        let frac = positive_fraction(&ds);
        assert!((0.0..=1.0).contains(&frac));
    }

    #[test]
    fn names_parse() {
        for k in SystemKind::ALL {
            assert_eq!(k.name().parse::<SystemKind>().unwrap(), k);
        }
        assert!("duffing".parse::<SystemKind>().is_err());
    }
}
