//! Explicit Runge–Kutta integration with PID step-size control.
//!
//! States are batched `[rows, dim]` values on any [`Backend`]. Steps are
//! clipped so that every requested time is hit exactly. On a
//! [`crate::autodiff::Tape`] the accepted stages stay recorded, so gradients
//! flow through the discrete solver with step sizes held constant.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Heun,
    Dopri5,
    Tsit5,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Euler, Method::Heun, Method::Dopri5, Method::Tsit5];

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
            Method::Dopri5 => "dopri5",
            Method::Tsit5 => "tsit5",
        }
    }

    pub fn tableau(self) -> ButcherTableau {
        match self {
            Method::Euler => ButcherTableau::euler(),
            Method::Heun => ButcherTableau::heun(),
            Method::Dopri5 => ButcherTableau::dopri5(),
            Method::Tsit5 => ButcherTableau::tsit5(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("solver", format!("unknown solver {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub c: Vec<f64>,
    /// Row `i` holds the `i` coefficients of stage `i`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    /// `b - b̂`; `None` for methods without an embedded pair.
    pub btilde: Option<Vec<f64>>,
    pub order: u32,
    pub embedded_order: Option<u32>,
    /// Last stage is evaluated at the step's solution.
    pub fsal: bool,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn euler() -> Self {
        ButcherTableau {
            c: vec![0.0],
            a: vec![vec![]],
            b: vec![1.0],
            btilde: None,
            order: 1,
            embedded_order: None,
            fsal: false,
        }
    }

    /// Heun's method with forward Euler as the embedded solution.
    pub fn heun() -> Self {
        ButcherTableau {
            c: vec![0.0, 1.0],
            a: vec![vec![], vec![1.0]],
            b: vec![0.5, 0.5],
            btilde: Some(vec![-0.5, 0.5]),
            order: 2,
            embedded_order: Some(1),
            fsal: false,
        }
    }

    pub fn dopri5() -> Self {
        let b = vec![
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
            0.0,
        ];
        let bhat = [
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ];
        ButcherTableau {
            c: vec![0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
            a: vec![
                vec![],
                vec![1.0 / 5.0],
                vec![3.0 / 40.0, 9.0 / 40.0],
                vec![44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
                vec![19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
                vec![
                    9017.0 / 3168.0,
                    -355.0 / 33.0,
                    46732.0 / 5247.0,
                    49.0 / 176.0,
                    -5103.0 / 18656.0,
                ],
                b[..6].to_vec(),
            ],
            btilde: Some(b.iter().zip(bhat).map(|(x, y)| x - y).collect()),
            b,
            order: 5,
            embedded_order: Some(4),
            fsal: true,
        }
    }

    pub fn tsit5() -> Self {
        let b = vec![
            0.09646076681806523,
            0.01,
            0.4798896504144996,
            1.379008574103742,
            -3.290069515436081,
            2.324710524099774,
            0.0,
        ];
        ButcherTableau {
            c: vec![0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0],
            a: vec![
                vec![],
                vec![0.161],
                vec![-0.008480655492356989, 0.335480655492357],
                vec![2.897153057105493, -6.359448489975075, 4.3622954328695815],
                vec![
                    5.325864828439257,
                    -11.748883564062828,
                    7.4955393428898365,
                    -0.09249506636175525,
                ],
                vec![
                    5.86145544294642,
                    -12.92096931784711,
                    8.159367898576159,
                    -0.071584973281401,
                    -0.028269050394068383,
                ],
                b[..6].to_vec(),
            ],
            b,
            btilde: Some(vec![
                -0.00178001105222577714,
                -0.0008164344596567469,
                0.007880878010261995,
                -0.1447110071732629,
                0.5823571654525552,
                -0.45808210592918697,
                1.0 / 66.0,
            ]),
            order: 5,
            embedded_order: Some(4),
            fsal: true,
        }
    }
}

/// A right-hand side `dy/dt = f(t, y)` over batched states.
pub trait VectorField<B: Backend> {
    /// `step_start` is the left end of the step that requested this stage;
    /// fields with piecewise structure use it to pick the active piece.
    fn eval(&self, b: &B, t: f64, step_start: f64, y: &B::V) -> Result<B::V>;

    /// Whether the last stage of a step may be reused as the first stage of
    /// the next step when the previous step ended on an evaluation time.
    fn fsal_across_eval_times(&self) -> bool {
        true
    }
}

/// Adapts a closure `(backend, t, y) -> dy` into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<B: Backend, F> VectorField<B> for FnField<F>
where
    F: Fn(&B, f64, &B::V) -> Result<B::V>,
{
    fn eval(&self, b: &B, t: f64, _step_start: f64, y: &B::V) -> Result<B::V> {
        (self.0)(b, t, y)
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: Method,
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub min_step: f64,
    /// `null` in JSON means unbounded.
    #[serde(with = "unbounded")]
    pub max_step: f64,
    pub safety: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            solver: Method::Tsit5,
            rtol: 1e-3,
            atol: 1e-6,
            h0: 1e-3,
            min_step: 1e-12,
            max_step: f64::INFINITY,
            safety: 0.9,
            max_steps: 200_000,
        }
    }
}

impl SolverConfig {
    pub fn with_method(solver: Method) -> Self {
        SolverConfig {
            solver,
            ..Default::default()
        }
    }

    pub fn tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("h0", self.h0),
            ("min_step", self.min_step),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::invalid("safety", "must lie in (0, 1]"));
        }
        if self.min_step > self.h0 {
            return Err(Error::invalid("min_step", "exceeds h0"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps", "must be positive"));
        }
        Ok(())
    }
}

pub const MIN_FACTOR: f64 = 0.1;
pub const MAX_FACTOR: f64 = 10.0;
const PID_BETA: [f64; 3] = [0.49, 0.34, 0.10];

/// Error history of the PID controller.
#[derive(Clone, Debug, PartialEq)]
pub struct PidState {
    /// `embedded order + 1`
    k: f64,
    prev: [f64; 2],
}

impl PidState {
    pub fn new(tableau: &ButcherTableau) -> Self {
        let p = tableau.embedded_order.unwrap_or(tableau.order);
        PidState {
            k: (p + 1) as f64,
            prev: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecision {
    pub accepted: bool,
    pub h: f64,
}

/// Accepts iff `err <= 1` and proposes the next step size. History only
/// advances on acceptance.
pub fn pid_next_step(cfg: &SolverConfig, state: &mut PidState, err: f64, h: f64) -> StepDecision {
    if !err.is_finite() {
        return StepDecision {
            accepted: false,
            h: h * MIN_FACTOR,
        };
    }
    if err > 1.0 {
        let f = (cfg.safety * err.powf(-1.0 / state.k)).max(MIN_FACTOR);
        return StepDecision {
            accepted: false,
            h: h * f,
        };
    }
    let factor = if err == 0.0 {
        MAX_FACTOR
    } else {
        let [b1, b2, b3] = PID_BETA.map(|b| b / state.k);
        let [e1, e2] = state.prev.map(|e| e.max(1e-10));
        (cfg.safety * err.powf(-b1) * e1.powf(b2) * e2.powf(-b3)).clamp(MIN_FACTOR, MAX_FACTOR)
    };
    state.prev = [err.max(1e-10), state.prev[0]];
    StepDecision {
        accepted: true,
        h: (h * factor).min(cfg.max_step),
    }
}

/// Per row, the RMS of `err / (atol + rtol · max(|y|, |y_new|))`; the norm
/// of a batch is its worst row, so every series meets the tolerance.
pub fn error_norm(err: &Tensor, y: &Tensor, y_new: &Tensor, rtol: f64, atol: f64) -> f64 {
    let cols = if err.shape().len() == 2 { err.cols().max(1) } else { err.len().max(1) };
    let scaled: Vec<f64> = err
        .data()
        .iter()
        .zip(y.data().iter().zip(y_new.data()))
        .map(|(e, (a, b))| {
            let r = e / (atol + rtol * a.abs().max(b.abs()));
            r * r
        })
        .collect();
    scaled
        .chunks(cols)
        .map(|row| (row.iter().sum::<f64>() / cols as f64).sqrt())
        .fold(0.0, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) })
}

struct Trial<V> {
    y_new: V,
    last_stage: Option<V>,
    err: Option<Tensor>,
    evals: usize,
}

fn try_step<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    tab: &ButcherTableau,
    f: &F,
    t: f64,
    y: &B::V,
    h: f64,
    k1: Option<B::V>,
) -> Result<Trial<B::V>> {
    let s = tab.stages();
    let mut evals = 0;
    let mut ks: Vec<B::V> = Vec::with_capacity(s);
    ks.push(match k1 {
        Some(k) => k,
        None => {
            evals += 1;
            f.eval(b, t, t, y)?
        }
    });
    let combine = |ks: &[B::V], coeffs: &[f64]| -> Result<B::V> {
        let mut terms: Vec<(&B::V, f64)> = vec![(y, 1.0)];
        terms.extend(
            ks.iter()
                .zip(coeffs)
                .filter(|(_, c)| **c != 0.0)
                .map(|(k, c)| (k, h * c)),
        );
        b.lin_comb(&terms)
    };
    let mut y_new = None;
    for i in 1..s {
        let yi = combine(&ks, &tab.a[i])?;
        ks.push(f.eval(b, t + tab.c[i] * h, t, &yi)?);
        evals += 1;
        if tab.fsal && i == s - 1 {
            y_new = Some(yi);
        }
    }
    let (y_new, last_stage) = match y_new {
        Some(yn) => (yn, ks.last().cloned()),
        None => (combine(&ks, &tab.b)?, None),
    };
    let err = tab.btilde.as_ref().map(|bt| {
        let mut e = Tensor::zeros(b.value(&ks[0]).shape());
        for (k, c) in ks.iter().zip(bt) {
            if *c != 0.0 {
                e.add_assign_scaled(&b.value(k), h * c).expect("stage shapes agree");
            }
        }
        e
    });
    Ok(Trial {
        y_new,
        last_stage,
        err,
        evals,
    })
}

/// One step of size `h`; returns the new state and the embedded error
/// estimate (`None` for Euler).
pub fn rk_step<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    tab: &ButcherTableau,
    f: &F,
    t: f64,
    y: &B::V,
    h: f64,
) -> Result<(B::V, Option<Tensor>)> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("step size must be positive, got {h}")));
    }
    let trial = try_step(b, tab, f, t, y, h, None)?;
    Ok((trial.y_new, trial.err))
}

/// A step of a recorded schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub t: f64,
    pub h: f64,
    /// The step ends on the next evaluation time.
    pub lands: bool,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: Step,
    /// State at the start of the step.
    pub y: Rc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SolveResult<V> {
    /// One state per evaluation time, starting with `y0`.
    pub states: Vec<V>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub steps: Vec<StepRecord>,
}

impl<V> SolveResult<V> {
    pub fn schedule(&self) -> Vec<Step> {
        self.steps.iter().map(|r| r.step).collect()
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("eval_times", "no evaluation times"));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("eval_times", "non-finite time"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("eval_times", "times must be strictly increasing"));
    }
    Ok(())
}

/// Integrates from `times[0]` and returns the state at every time.
/// Euler runs on a fixed grid of at most `h0`; the other methods adapt.
pub fn integrate<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    cfg: &SolverConfig,
    f: &F,
    y0: &B::V,
    times: &[f64],
) -> Result<SolveResult<B::V>> {
    cfg.validate()?;
    let tab = cfg.solver.tableau();
    if tab.btilde.is_none() {
        return integrate_fixed(b, &tab, f, y0, times, cfg.h0);
    }
    integrate_adaptive(b, &tab, cfg, f, y0, times)
}

pub fn integrate_adaptive<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    tab: &ButcherTableau,
    cfg: &SolverConfig,
    f: &F,
    y0: &B::V,
    times: &[f64],
) -> Result<SolveResult<B::V>> {
    check_times(times)?;
    cfg.validate()?;
    if tab.btilde.is_none() {
        return Err(Error::invalid("solver", "adaptive stepping needs an embedded error estimate"));
    }
    let mut pid = PidState::new(tab);
    let mut out = SolveResult {
        states: vec![y0.clone()],
        nfe: 0,
        accepted: 0,
        rejected: 0,
        steps: Vec::new(),
    };
    let mut t = times[0];
    let mut y = y0.clone();
    let mut h = cfg.h0.min(cfg.max_step);
    let mut k1: Option<B::V> = None;

    for &target in &times[1..] {
        while t < target {
            if out.accepted + out.rejected >= cfg.max_steps {
                return Err(Error::TooManySteps {
                    t,
                    max_steps: cfg.max_steps,
                });
            }
            let remaining = target - t;
            let lands = h * (1.0 + 1e-9) >= remaining;
            let h_try = if lands { remaining } else { h };
            if h_try < cfg.min_step && !lands {
                return Err(Error::StepUnderflow { t, h: h_try });
            }
            if k1.is_none() {
                k1 = Some(f.eval(b, t, t, &y)?);
                out.nfe += 1;
            }
            let trial = match try_step(b, tab, f, t, &y, h_try, k1.clone()) {
                Ok(tr) => tr,
                Err(Error::NonFinite { .. }) => {
                    out.nfe += tab.stages() - 1;
                    out.rejected += 1;
                    h = h_try * MIN_FACTOR;
                    continue;
                }
                Err(e) => return Err(e),
            };
            out.nfe += trial.evals;
            let yv = b.value(&y);
            let err = error_norm(
                trial.err.as_ref().expect("embedded pair"),
                &yv,
                &b.value(&trial.y_new),
                cfg.rtol,
                cfg.atol,
            );
            let decision = pid_next_step(cfg, &mut pid, err, h_try);
            if decision.accepted {
                out.steps.push(StepRecord {
                    step: Step { t, h: h_try, lands },
                    y: yv,
                });
                out.accepted += 1;
                t = if lands { target } else { t + h_try };
                y = trial.y_new;
                k1 = match trial.last_stage {
                    Some(k) if !lands || f.fsal_across_eval_times() => Some(k),
                    _ => None,
                };
                // A step shortened to land keeps the larger proposal.
                h = if lands { decision.h.max(h) } else { decision.h };
            } else {
                out.rejected += 1;
                h = decision.h;
                if h < cfg.min_step {
                    return Err(Error::StepUnderflow { t, h });
                }
            }
        }
        out.states.push(y.clone());
    }
    Ok(out)
}

/// Schedule of equal sub-steps no longer than `h` inside every interval.
pub fn fixed_schedule(times: &[f64], h: f64) -> Result<Vec<Step>> {
    check_times(times)?;
    if !(h > 0.0) {
        return Err(Error::invalid("h", "fixed step must be positive"));
    }
    let mut steps = Vec::new();
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let n = ((span / h) - 1e-9).ceil().max(1.0) as usize;
        let dh = span / n as f64;
        for j in 0..n {
            let t = w[0] + j as f64 * dh;
            let h = if j + 1 == n { w[1] - t } else { dh };
            steps.push(Step {
                t,
                h,
                lands: j + 1 == n,
            });
        }
    }
    Ok(steps)
}

pub fn integrate_fixed<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    tab: &ButcherTableau,
    f: &F,
    y0: &B::V,
    times: &[f64],
    h: f64,
) -> Result<SolveResult<B::V>> {
    let schedule = fixed_schedule(times, h)?;
    integrate_schedule(b, tab, f, y0, &schedule)
}

/// Re-runs a given step sequence, e.g. the schedule of an earlier adaptive
/// solve. States are emitted after every landing step.
pub fn integrate_schedule<B: Backend, F: VectorField<B> + ?Sized>(
    b: &B,
    tab: &ButcherTableau,
    f: &F,
    y0: &B::V,
    schedule: &[Step],
) -> Result<SolveResult<B::V>> {
    let mut out = SolveResult {
        states: vec![y0.clone()],
        nfe: 0,
        accepted: 0,
        rejected: 0,
        steps: Vec::with_capacity(schedule.len()),
    };
    let mut y = y0.clone();
    let mut k1: Option<B::V> = None;
    for step in schedule {
        let trial = try_step(b, tab, f, step.t, &y, step.h, k1.take())?;
        out.nfe += trial.evals;
        out.accepted += 1;
        out.steps.push(StepRecord {
            step: *step,
            y: b.value(&y),
        });
        y = trial.y_new;
        k1 = match trial.last_stage {
            Some(k) if !step.lands || f.fsal_across_eval_times() => Some(k),
            _ => None,
        };
        if step.lands {
            out.states.push(y.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    fn decay() -> FnField<impl Fn(&Eager, f64, &Rc<Tensor>) -> Result<Rc<Tensor>>> {
        FnField(|b: &Eager, _t: f64, y: &Rc<Tensor>| b.scale(y, -1.0))
    }

    fn zero() -> FnField<impl Fn(&Eager, f64, &Rc<Tensor>) -> Result<Rc<Tensor>>> {
        FnField(|b: &Eager, _t: f64, y: &Rc<Tensor>| b.scale(y, 0.0))
    }

    fn scalar(v: f64) -> Rc<Tensor> {
        Rc::new(Tensor::matrix(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn tableaus_are_consistent() {
        for m in Method::ALL {
            let tab = m.tableau();
            assert_eq!(tab.a.len(), tab.stages());
            for (i, row) in tab.a.iter().enumerate() {
                assert_eq!(row.len(), i);
                let s: f64 = row.iter().sum();
                assert!((s - tab.c[i]).abs() < 1e-12, "{m} row {i}: {s} vs {}", tab.c[i]);
            }
            assert!((tab.b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{m} b");
            if let Some(bt) = &tab.btilde {
                let bhat: f64 = tab.b.iter().zip(bt).map(|(b, d)| b - d).sum();
                assert!((bhat - 1.0).abs() < 1e-12, "{m} b̂");
            }
        }
    }

    #[test]
    fn zero_field_steps_are_identity() {
        for m in Method::ALL {
            let (y, err) = rk_step(&Eager, &m.tableau(), &zero(), 0.0, &scalar(2.5), 0.3).unwrap();
            assert_eq!(y.data(), &[2.5]);
            if let Some(e) = err {
                assert_eq!(e.data(), &[0.0]);
            }
        }
    }

    #[test]
    fn euler_single_step() {
        let (y, err) = rk_step(&Eager, &ButcherTableau::euler(), &decay(), 0.0, &scalar(1.0), 0.1).unwrap();
        assert!((y.data()[0] - 0.9).abs() < 1e-15);
        assert!(err.is_none());
    }

    #[test]
    fn dopri5_single_step_matches_exponential() {
        let (y, _) = rk_step(&Eager, &ButcherTableau::dopri5(), &decay(), 0.0, &scalar(1.0), 0.1).unwrap();
        assert!((y.data()[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn tsit5_default_tolerances_reach_inverse_e() {
        let r = integrate(&Eager, &SolverConfig::default(), &decay(), &scalar(1.0), &[0.0, 1.0]).unwrap();
        assert!((r.states[1].data()[0] - (-1.0f64).exp()).abs() < 1e-4);
        assert!(r.accepted > 0);
        assert_eq!(r.nfe, 1 + 6 * (r.accepted + r.rejected));
    }

    #[test]
    fn zero_field_is_constant_with_minimal_work() {
        let cfg = SolverConfig::default();
        let times = [0.0, 0.5, 1.0, 3.0];
        let r = integrate(&Eager, &cfg, &zero(), &scalar(4.0), &times).unwrap();
        assert!(r.states.iter().all(|s| s.data() == [4.0]));
        assert_eq!(r.rejected, 0);
        // h0 grows tenfold per accepted step until it reaches the first time.
        assert_eq!(r.steps.iter().filter(|s| s.step.lands).count(), 3);
    }

    #[test]
    fn pid_decisions() {
        let cfg = SolverConfig::default();
        let tab = ButcherTableau::tsit5();
        let d = pid_next_step(&cfg, &mut PidState::new(&tab), 0.0, 0.01);
        assert!(d.accepted);
        assert!((d.h - 0.01 * MAX_FACTOR).abs() < 1e-15);

        let d = pid_next_step(&cfg, &mut PidState::new(&tab), 1.0, 0.01);
        assert!(d.accepted);
        assert!((d.h - 0.9 * 0.01).abs() < 1e-15);

        let mut st = PidState::new(&tab);
        let d = pid_next_step(&cfg, &mut st, 4.0, 0.01);
        assert!(!d.accepted);
        assert!(d.h < 0.01);
        let expected = 0.01 * 0.9 * 4f64.powf(-1.0 / 5.0);
        assert!((d.h - expected).abs() < 1e-15);
        assert_eq!(st, PidState::new(&tab));
    }

    #[test]
    fn nfe_is_reproducible_and_landing_is_exact() {
        let cfg = SolverConfig::default();
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 0.37).collect();
        let a = integrate(&Eager, &cfg, &decay(), &scalar(1.0), &times).unwrap();
        let b = integrate(&Eager, &cfg, &decay(), &scalar(1.0), &times).unwrap();
        assert_eq!(a.nfe, b.nfe);
        assert_eq!(a.states.len(), times.len());
        let mut t = times[0];
        let mut hit = vec![times[0]];
        for s in &a.steps {
            assert_eq!(s.step.t, t);
            t = if s.step.lands {
                times[hit.len()]
            } else {
                t + s.step.h
            };
            if s.step.lands {
                hit.push(t);
            }
        }
        assert_eq!(hit, times);
    }

    #[test]
    fn replaying_a_schedule_reproduces_states() {
        let cfg = SolverConfig::with_method(Method::Dopri5);
        let times = [0.0, 0.2, 0.9, 1.4];
        let a = integrate(&Eager, &cfg, &decay(), &scalar(1.3), &times).unwrap();
        let r = integrate_schedule(&Eager, &cfg.solver.tableau(), &decay(), &scalar(1.3), &a.schedule()).unwrap();
        for (x, y) in a.states.iter().zip(&r.states) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn euler_runs_fixed_step() {
        let mut cfg = SolverConfig::with_method(Method::Euler);
        cfg.h0 = 0.1;
        let r = integrate(&Eager, &cfg, &decay(), &scalar(1.0), &[0.0, 1.0]).unwrap();
        assert_eq!(r.nfe, 10);
        assert!((r.states[1].data()[0] - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let cfg = SolverConfig::default();
        assert!(integrate(&Eager, &cfg, &decay(), &scalar(1.0), &[0.0, 0.0]).is_err());
        assert!(integrate(&Eager, &cfg, &decay(), &scalar(1.0), &[1.0, 0.5]).is_err());
        let bad = SolverConfig {
            rtol: 0.0,
            ..SolverConfig::default()
        };
        assert!(integrate(&Eager, &bad, &decay(), &scalar(1.0), &[0.0, 1.0]).is_err());
        assert!(rk_step(&Eager, &ButcherTableau::heun(), &decay(), 0.0, &scalar(1.0), -0.1).is_err());
    }

    #[test]
    fn blowup_reports_underflow() {
        // y' = y², y(0) = 1 explodes at t = 1.
        let f = FnField(|b: &Eager, _t: f64, y: &Rc<Tensor>| b.mul(y, y));
        let err = integrate(&Eager, &SolverConfig::default(), &f, &scalar(1.0), &[0.0, 2.0]).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn error_norm_takes_worst_row() {
        let err = Tensor::matrix(2, 2, vec![1e-6, 1e-6, 4e-6, 0.0]).unwrap();
        let y = Tensor::zeros(&[2, 2]);
        let n = error_norm(&err, &y, &y, 1e-3, 1e-6);
        assert!((n - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("rk4".parse::<Method>().is_err());
    }
}
