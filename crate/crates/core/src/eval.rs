//! Forecast metrics, extrapolation analysis and report output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(op: &'static str, pred: &[Tensor], truth: &[Tensor]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::shape(op, format!("{} predictions against {} truths", pred.len(), truth.len())));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() || p.shape().len() != 2 {
            return Err(Error::shape(op, format!("{:?} against {:?}", p.shape(), t.shape())));
        }
    }
    Ok(())
}

/// Mean squared error over trajectories, timesteps `0..=cutoff` and features.
pub fn cumulative_mse(pred: &[Tensor], truth: &[Tensor], cutoff: usize) -> Result<f64> {
    check_pair("cumulative_mse", pred, truth)?;
    let len = pred.iter().map(Tensor::rows).min().unwrap_or(0);
    if cutoff >= len {
        return Err(Error::invalid(
            "cutoff",
            format!("timestep {cutoff} is beyond the {len}-point trajectories"),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let k = (cutoff + 1) * p.cols();
        sum += p.data()[..k]
            .iter()
            .zip(&t.data()[..k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n += k;
    }
    Ok(sum / n as f64)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.len();
    }
    Ok(sum / n as f64)
}

/// `100 · (without − with) / without`; negative when correction hurts.
pub fn reduction_percent(mse_without: f64, mse_with: f64) -> Result<f64> {
    if !(mse_without > 0.0 && mse_without.is_finite()) || !mse_with.is_finite() {
        return Err(Error::invalid(
            "mse",
            format!("reduction needs a positive reference MSE, got {mse_without} and {mse_with}"),
        ));
    }
    Ok(100.0 * (mse_without - mse_with) / mse_without)
}

/// Largest cutoff whose reduction reaches `threshold` percent; `None` when
/// no cutoff does.
pub fn extrapolation_horizon(curve: &[(usize, f64)], threshold: f64) -> Result<Option<usize>> {
    if curve.is_empty() {
        return Err(Error::invalid("curve", "no cutoffs to scan"));
    }
    Ok(curve.iter().filter(|(_, r)| *r >= threshold).map(|(c, _)| *c).max())
}

/// `step, 2·step, …` up to `max`.
pub fn cutoff_grid(max: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::invalid("cutoff_step", "must be positive"));
    }
    Ok((1..).map(|k| k * step).take_while(|&c| c <= max).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRun {
    pub nfe: f64,
    pub horizon: usize,
}

fn dominates(a: &ParetoRun, b: &ParetoRun) -> bool {
    a.nfe <= b.nfe && a.horizon >= b.horizon && (a.nfe < b.nfe || a.horizon > b.horizon)
}

/// Indices of the runs no other run beats on both lower NFE and longer
/// horizon, in order of increasing NFE.
pub fn pareto_points(runs: &[ParetoRun]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&i, &j| {
        runs[i]
            .nfe
            .total_cmp(&runs[j].nfe)
            .then(runs[j].horizon.cmp(&runs[i].horizon))
    });
    let mut front = Vec::new();
    let mut best: Option<ParetoRun> = None;
    for i in order {
        let r = runs[i];
        let keep = match best {
            None => true,
            Some(b) => !dominates(&b, &r),
        };
        if keep {
            front.push(i);
            if best.map_or(true, |b| r.horizon > b.horizon) {
                best = Some(r);
            }
        }
    }
    front
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressCurve {
    pub cutoffs: Vec<usize>,
    /// Natural logarithm of the cumulative MSE up to each cutoff.
    pub ln_mse_without: Vec<f64>,
    pub ln_mse_with: Vec<f64>,
}

pub fn stress_curve(corrected: &[Tensor], uncorrected: &[Tensor], truth: &[Tensor], cutoffs: &[usize]) -> Result<StressCurve> {
    let mut out = StressCurve {
        cutoffs: cutoffs.to_vec(),
        ln_mse_without: Vec::with_capacity(cutoffs.len()),
        ln_mse_with: Vec::with_capacity(cutoffs.len()),
    };
    for &c in cutoffs {
        out.ln_mse_without.push(cumulative_mse(uncorrected, truth, c)?.ln());
        out.ln_mse_with.push(cumulative_mse(corrected, truth, c)?.ln());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffRow {
    pub cutoff: usize,
    pub mse_without: f64,
    pub mse_with: f64,
    pub reduction_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<CutoffRow>,
    /// Cutoff of the interpolation regime and its reduction.
    pub interpolation_cutoff: usize,
    pub interpolation_reduction: f64,
    pub threshold_percent: f64,
    pub extrapolation_horizon: Option<usize>,
    pub mae_without: f64,
    pub mae_with: f64,
    /// Vector-field evaluations of the corrector at inference.
    pub inference_nfe: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressCurve>,
    /// The resolved run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Metrics of corrected against uncorrected forecasts.
pub struct EvalInput<'a> {
    pub forecast: &'a [Tensor],
    pub corrected: &'a [Tensor],
    pub truth: &'a [Tensor],
}

impl EvalReport {
    pub fn compute(
        input: &EvalInput<'_>,
        interpolation_cutoff: usize,
        cutoffs: &[usize],
        threshold_percent: f64,
    ) -> Result<Self> {
        let mut grid: Vec<usize> = cutoffs.to_vec();
        grid.push(interpolation_cutoff);
        grid.sort_unstable();
        grid.dedup();
        let rows = grid
            .iter()
            .map(|&c| {
                let wo = cumulative_mse(input.forecast, input.truth, c)?;
                let w = cumulative_mse(input.corrected, input.truth, c)?;
                Ok(CutoffRow {
                    cutoff: c,
                    mse_without: wo,
                    mse_with: w,
                    reduction_percent: reduction_percent(wo, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let interp = rows
            .iter()
            .find(|r| r.cutoff == interpolation_cutoff)
            .expect("interpolation cutoff is on the grid");
        let curve: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| cutoffs.contains(&r.cutoff))
            .map(|r| (r.cutoff, r.reduction_percent))
            .collect();
        let horizon = if curve.is_empty() { None } else { extrapolation_horizon(&curve, threshold_percent)? };
        Ok(EvalReport {
            interpolation_cutoff,
            interpolation_reduction: interp.reduction_percent,
            threshold_percent,
            extrapolation_horizon: horizon,
            mae_without: mae(input.forecast, input.truth)?,
            mae_with: mae(input.corrected, input.truth)?,
            inference_nfe: 0,
            stress: None,
            config: serde_json::Value::Null,
            rows,
        })
    }

    /// `cutoff,mse_without,mse_with,reduction_percent`, one row per cutoff.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cutoff,mse_without,mse_with,reduction_percent\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.cutoff, r.mse_without, r.mse_with, r.reduction_percent);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.json"), &serde_json::to_string_pretty(self)?)?;
        write_file(&dir.join("report.csv"), &self.to_csv())?;
        if let Some(st) = &self.stress {
            write_file(&dir.join("stress.csv"), &stress_csv(st))?;
            let xs: Vec<f64> = st.cutoffs.iter().map(|&c| c as f64).collect();
            let svg = line_plot_svg(
                "Cumulative MSE",
                "timestep",
                "ln MSE",
                &[
                    Series::new("without correction", &xs, &st.ln_mse_without),
                    Series::new("with correction", &xs, &st.ln_mse_with),
                ],
            );
            write_file(&dir.join("stress.svg"), &svg)?;
        }
        Ok(())
    }
}

pub fn stress_csv(st: &StressCurve) -> String {
    let mut s = String::from("cutoff,ln_mse_without,ln_mse_with\n");
    for i in 0..st.cutoffs.len() {
        let _ = writeln!(s, "{},{},{}", st.cutoffs[i], st.ln_mse_without[i], st.ln_mse_with[i]);
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// SVG

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

impl<'a> Series<'a> {
    pub fn new(name: &'a str, xs: &[f64], ys: &[f64]) -> Self {
        Series {
            name,
            points: xs.iter().copied().zip(ys.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A minimal standalone line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(fx),
            h - bottom + 16.0,
            tick(fx)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{:.2},{:.2}", if k == 0 { 'M' } else { 'L' }, px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            w - right - 4.0,
            ly + 4.0,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
