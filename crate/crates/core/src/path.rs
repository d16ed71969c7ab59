//! Piecewise-polynomial control paths through forecast knots.
//!
//! A path carries a batch of `rows` series sharing the same knot times. Every
//! knot value is the state with the knot time appended as a last channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Cubic Hermite segments with backward-difference slopes.
    Hermite,
    Linear,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Hermite => "hermite",
            Scheme::Linear => "linear",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hermite" => Ok(Scheme::Hermite),
            "linear" => Ok(Scheme::Linear),
            other => Err(Error::invalid("interpolation", format!("unknown scheme {other:?}"))),
        }
    }
}

/// Segment `i` is `a + b·u + c·u² + d·u³` with `u = (s - t_i) / Δ_i`.
#[derive(Clone, Debug)]
struct Segment {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ControlPath {
    times: Vec<f64>,
    rows: usize,
    channels: usize,
    scheme: Scheme,
    segments: Vec<Segment>,
}

impl ControlPath {
    /// Single series: `values` is `[T, D]`.
    pub fn fit(times: &[f64], values: &Tensor, scheme: Scheme) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != times.len() {
            return Err(Error::shape(
                "ControlPath::fit",
                format!("{} times but values {:?}", times.len(), values.shape()),
            ));
        }
        let knots: Vec<Tensor> = (0..values.rows())
            .map(|i| Tensor::matrix(1, values.cols(), values.row(i).to_vec()).expect("row"))
            .collect();
        Self::fit_batch(times, &knots, scheme)
    }

    /// Batch of series: `knots[i]` is the `[rows, D]` value at `times[i]`.
    pub fn fit_batch(times: &[f64], knots: &[Tensor], scheme: Scheme) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("times", "a path needs at least two knots"));
        }
        if times.len() != knots.len() {
            return Err(Error::shape(
                "ControlPath::fit_batch",
                format!("{} times, {} knot values", times.len(), knots.len()),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times", "knot times must be finite and strictly increasing"));
        }
        let shape = knots[0].shape().to_vec();
        if shape.len() != 2 || knots.iter().any(|k| k.shape() != shape.as_slice()) {
            return Err(Error::shape("ControlPath::fit_batch", "knot values must share a [rows, D] shape"));
        }
        let (rows, d) = (shape[0], shape[1]);
        let channels = d + 1;
        let augmented: Vec<Vec<f64>> = knots
            .iter()
            .zip(times)
            .map(|(k, &t)| {
                let mut v = Vec::with_capacity(rows * channels);
                for r in 0..rows {
                    v.extend_from_slice(k.row(r));
                    v.push(t);
                }
                v
            })
            .collect();
        if augmented.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ControlPath::fit_batch" });
        }

        let n = times.len();
        let slopes: Vec<Vec<f64>> = match scheme {
            Scheme::Linear => Vec::new(),
            Scheme::Hermite => {
                let mut m: Vec<Vec<f64>> = (1..n)
                    .map(|i| {
                        let dt = times[i] - times[i - 1];
                        augmented[i]
                            .iter()
                            .zip(&augmented[i - 1])
                            .map(|(x1, x0)| (x1 - x0) / dt)
                            .collect()
                    })
                    .collect();
                m.insert(0, m[0].clone());
                m
            }
        };
        let segments = (0..n - 1)
            .map(|i| {
                let dt = times[i + 1] - times[i];
                let (x0, x1) = (&augmented[i], &augmented[i + 1]);
                match scheme {
                    Scheme::Linear => Segment {
                        a: x0.clone(),
                        b: x1.iter().zip(x0).map(|(p, q)| p - q).collect(),
                        c: vec![0.0; x0.len()],
                        d: vec![0.0; x0.len()],
                    },
                    Scheme::Hermite => {
                        let (m0, m1) = (&slopes[i], &slopes[i + 1]);
                        let len = x0.len();
                        let mut seg = Segment {
                            a: x0.clone(),
                            b: vec![0.0; len],
                            c: vec![0.0; len],
                            d: vec![0.0; len],
                        };
                        for j in 0..len {
                            seg.b[j] = m0[j] * dt;
                            seg.c[j] = 3.0 * (x1[j] - x0[j]) - (2.0 * m0[j] + m1[j]) * dt;
                            seg.d[j] = 2.0 * (x0[j] - x1[j]) + (m0[j] + m1[j]) * dt;
                        }
                        seg
                    }
                }
            })
            .collect();
        Ok(ControlPath {
            times: times.to_vec(),
            rows,
            channels,
            scheme,
            segments,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// State channels plus the time channel.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn check_domain(&self, s: f64) -> Result<f64> {
        let (lo, hi) = (self.start(), self.end());
        let slack = 1e-9 * (hi - lo).max(1.0);
        if !(s >= lo - slack && s <= hi + slack) {
            return Err(Error::invalid(
                "s",
                format!("{s} lies outside the path domain [{lo}, {hi}]"),
            ));
        }
        Ok(s.clamp(lo, hi))
    }

    /// Segment containing `s`: the right one at an interior knot, the last
    /// one at the final knot.
    pub fn segment_index(&self, s: f64) -> Result<usize> {
        let s = self.check_domain(s)?;
        let above = self.times.partition_point(|&t| t <= s);
        Ok(above.saturating_sub(1).min(self.segments.len() - 1))
    }

    fn local(&self, seg: usize, s: f64) -> (f64, f64) {
        let dt = self.times[seg + 1] - self.times[seg];
        ((s - self.times[seg]) / dt, dt)
    }

    /// `[rows, D+1]`
    pub fn eval(&self, s: f64) -> Result<Tensor> {
        let seg = self.segment_index(s)?;
        let (u, _) = self.local(seg, self.check_domain(s)?);
        let g = &self.segments[seg];
        let data = (0..g.a.len())
            .map(|j| g.a[j] + u * (g.b[j] + u * (g.c[j] + u * g.d[j])))
            .collect();
        Tensor::new(vec![self.rows, self.channels], data)
    }

    /// `dX/ds` at `s`, using the segment rules of [`Self::segment_index`].
    pub fn derivative(&self, s: f64) -> Result<Tensor> {
        let seg = self.segment_index(s)?;
        self.derivative_on(seg, s)
    }

    /// Derivative of segment `seg`'s polynomial at `s`, which may sit at
    /// either end of the segment.
    pub fn derivative_on(&self, seg: usize, s: f64) -> Result<Tensor> {
        if seg >= self.segments.len() {
            return Err(Error::invalid("segment", format!("index {seg} out of range")));
        }
        let (u, dt) = self.local(seg, self.check_domain(s)?);
        let g = &self.segments[seg];
        let data = (0..g.a.len())
            .map(|j| (g.b[j] + u * (2.0 * g.c[j] + 3.0 * u * g.d[j])) / dt)
            .collect();
        Tensor::new(vec![self.rows, self.channels], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tri(scheme: Scheme) -> ControlPath {
        let v = Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        ControlPath::fit(&[0.0, 1.0, 2.0], &v, scheme).unwrap()
    }

    fn hermite_basis(p0: f64, p1: f64, m0: f64, m1: f64, dt: f64, u: f64) -> f64 {
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        h00 * p0 + h10 * dt * m0 + h01 * p1 + h11 * dt * m1
    }

    #[test]
    fn knots_are_exact() {
        for scheme in [Scheme::Hermite, Scheme::Linear] {
            let p = tri(scheme);
            for (t, x) in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)] {
                let v = p.eval(t).unwrap();
                assert_eq!(v.data(), &[x, t]);
            }
        }
    }

    #[test]
    fn linear_midpoint_and_slope() {
        assert_eq!(tri(Scheme::Linear).eval(0.5).unwrap().data(), &[0.5, 0.5]);
        let v = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let p = ControlPath::fit(&[0.0, 1.0], &v, Scheme::Linear).unwrap();
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(p.derivative(s).unwrap().data(), &[2.0, 1.0]);
        }
    }

    #[test]
    fn hermite_matches_basis_oracle() {
        let x = tri(Scheme::Hermite).eval(1.5).unwrap().data()[0];
        let oracle = hermite_basis(1.0, 0.0, 1.0, -1.0, 1.0, 0.5);
        assert!((x - oracle).abs() < 1e-12);
        assert!((x - 0.75).abs() < 1e-12);
    }

    #[test]
    fn hermite_derivative_matches_finite_difference() {
        let p = tri(Scheme::Hermite);
        let h = 1e-6;
        let fd = (p.eval(1.5 + h).unwrap().data()[0] - p.eval(1.5 - h).unwrap().data()[0]) / (2.0 * h);
        assert!((p.derivative(1.5).unwrap().data()[0] - fd).abs() < 1e-6);
    }

    #[test]
    fn constant_knots_have_zero_derivative() {
        let v = Tensor::matrix(4, 2, vec![3.0; 8]).unwrap();
        for scheme in [Scheme::Hermite, Scheme::Linear] {
            let p = ControlPath::fit(&[0.0, 0.5, 1.5, 2.0], &v, scheme).unwrap();
            let d = p.derivative(0.7).unwrap();
            assert_eq!(&d.data()[..2], &[0.0, 0.0]);
            assert!((d.data()[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn knot_derivative_uses_right_segment_except_at_end() {
        let p = tri(Scheme::Linear);
        assert_eq!(p.derivative(1.0).unwrap().data()[0], -1.0);
        assert_eq!(p.derivative(2.0).unwrap().data()[0], -1.0);
        assert_eq!(p.derivative_on(0, 1.0).unwrap().data()[0], 1.0);
    }

    #[test]
    fn invalid_inputs() {
        let v = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(ControlPath::fit(&[0.0, 0.0], &v, Scheme::Linear).is_err());
        assert!(ControlPath::fit(&[1.0, 0.0], &v, Scheme::Linear).is_err());
        let one = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(ControlPath::fit(&[0.0], &one, Scheme::Hermite).is_err());
        let p = ControlPath::fit(&[0.0, 1.0], &v, Scheme::Hermite).unwrap();
        assert!(p.eval(1.5).is_err());
        assert!(p.derivative(-0.1).is_err());
    }

    #[test]
    fn time_only_path() {
        let v = Tensor::zeros(&[3, 0]);
        let p = ControlPath::fit(&[0.0, 0.4, 1.0], &v, Scheme::Hermite).unwrap();
        assert_eq!(p.channels(), 1);
        assert!((p.eval(0.7).unwrap().data()[0] - 0.7).abs() < 1e-12);
        assert!((p.derivative(0.7).unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    fn knot_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..9).prop_flat_map(|n| {
            (
                prop::collection::vec(0.05f64..1.0, n),
                prop::collection::vec(-5.0f64..5.0, n * 2),
            )
                .prop_map(|(gaps, vals)| {
                    let mut t = 0.0;
                    let times = gaps
                        .iter()
                        .map(|g| {
                            let now = t;
                            t += g;
                            now
                        })
                        .collect();
                    (times, vals)
                })
        })
    }

    proptest! {
        #[test]
        fn prop_knot_exactness((times, vals) in knot_sets()) {
            let v = Tensor::matrix(times.len(), 2, vals).unwrap();
            for scheme in [Scheme::Hermite, Scheme::Linear] {
                let p = ControlPath::fit(&times, &v, scheme).unwrap();
                for (i, &t) in times.iter().enumerate() {
                    let x = p.eval(t).unwrap();
                    for j in 0..2 {
                        prop_assert!((x.data()[j] - v.row(i)[j]).abs() <= 1e-12);
                    }
                    prop_assert!((x.data()[2] - t).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn prop_derivative_matches_fd((times, vals) in knot_sets(), frac in 0.01f64..0.99) {
            let v = Tensor::matrix(times.len(), 2, vals).unwrap();
            let end = *times.last().unwrap();
            let p = ControlPath::fit(&times, &v, Scheme::Hermite).unwrap();
            let s = frac * end;
            let seg = p.segment_index(s).unwrap();
            let h = 1e-6 * (times[seg + 1] - times[seg]);
            // keep both probes inside the segment
            let s = s.clamp(times[seg] + 2.0 * h, times[seg + 1] - 2.0 * h);
            let d = p.derivative(s).unwrap();
            let (hi, lo) = (p.eval(s + h).unwrap(), p.eval(s - h).unwrap());
            for j in 0..3 {
                let fd = (hi.data()[j] - lo.data()[j]) / (2.0 * h);
                prop_assert!((d.data()[j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }

        #[test]
        fn prop_shift_invariance((times, vals) in knot_sets(), shift in -10.0f64..10.0, frac in 0.0f64..1.0) {
            let v = Tensor::matrix(times.len(), 2, vals).unwrap();
            let shifted: Vec<f64> = times.iter().map(|t| t + shift).collect();
            let p = ControlPath::fit(&times, &v, Scheme::Hermite).unwrap();
            let q = ControlPath::fit(&shifted, &v, Scheme::Hermite).unwrap();
            let s = frac * times.last().unwrap();
            let (a, b) = (p.eval(s).unwrap(), q.eval(s + shift).unwrap());
            for j in 0..2 {
                prop_assert!((a.data()[j] - b.data()[j]).abs() <= 1e-9);
            }
        }
    }
}
