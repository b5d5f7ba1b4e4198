//! Evaluation metrics over predicted and ground-truth cycle sequences.
//!
//! Cycle metrics compare begin times and lengths, flow metrics compare
//! per-cycle flows with the predicted unit-time flow scaled by the true
//! length, and F-AAE accumulates per-second flow-density errors. All of
//! them only look at masked-in ground-truth slots.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ForecastInstance, TargetSlot};
use crate::error::{Error, Result};
use crate::model::SensorForecast;
use crate::sapn::PredictedSlot;

/// Predicted and ground-truth slots of one sensor in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub t_last: i64,
    pub anchor: i64,
    pub horizon: i64,
    pub predicted: Vec<PredictedSlot>,
    pub truth: Vec<TargetSlot>,
}

impl EvalPair {
    /// Pairs every forecast with its sensor's targets. Forecasts shorter
    /// than the target list are extended by repeating their last cycle.
    pub fn from_forecasts(instance: &ForecastInstance, forecasts: &[SensorForecast]) -> Vec<EvalPair> {
        forecasts
            .iter()
            .map(|f| {
                let truth = instance.sensors[f.sensor].targets.clone();
                let mut predicted = f.slots.clone();
                if let Some(&last) = predicted.last() {
                    while predicted.len() < truth.len() {
                        let prev = predicted[predicted.len() - 1];
                        predicted.push(PredictedSlot {
                            elapsed: prev.elapsed + prev.length,
                            ..last
                        });
                    }
                }
                EvalPair {
                    t_last: f.t_last,
                    anchor: instance.anchor,
                    horizon: instance.horizon,
                    predicted,
                    truth,
                }
            })
            .collect()
    }

    pub fn masked(&self) -> usize {
        self.truth.iter().filter(|t| t.mask).count()
    }

    fn aligned(&self) -> impl Iterator<Item = (&PredictedSlot, &TargetSlot)> {
        self.predicted.iter().zip(&self.truth).filter(|(_, t)| t.mask)
    }
}

/// The six metrics; `None` when nothing was masked in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub c_mae: Option<f64>,
    pub c_rmse: Option<f64>,
    pub c_mape: Option<f64>,
    pub f_mae: Option<f64>,
    pub f_rmse: Option<f64>,
    pub f_aae: Option<f64>,
}

impl MetricSet {
    pub const NAMES: [&'static str; 6] = ["C-MAE", "C-RMSE", "C-MAPE", "F-MAE", "F-RMSE", "F-AAE"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.c_mae, self.c_rmse, self.c_mape, self.f_mae, self.f_rmse, self.f_aae]
    }
}

impl fmt::Display for MetricSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in Self::NAMES.iter().zip(self.values()).enumerate() {
            if i > 0 {
                write!(f, "  ")?;
            }
            match v {
                Some(v) if *name == "C-MAPE" => write!(f, "{name} {v:.2}%")?,
                Some(v) => write!(f, "{name} {v:.4}")?,
                None => write!(f, "{name} n/a")?,
            }
        }
        Ok(())
    }
}

/// Running sums so metrics can be pooled over many windows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    c_abs: f64,
    c_sq: f64,
    c_pct: f64,
    f_abs: f64,
    f_sq: f64,
    slots: usize,
    density_err: f64,
    seconds: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pair: &EvalPair) {
        for (p, t) in pair.aligned() {
            let db = p.elapsed - t.elapsed as f64;
            let dp = p.length - t.truth.length as f64;
            self.c_abs += db.abs() + dp.abs();
            self.c_sq += db * db + dp * dp;
            self.c_pct += db.abs() / t.elapsed as f64 + dp.abs() / t.truth.length as f64;
            let df = p.unit_flow * t.truth.length as f64 - t.truth.flow;
            self.f_abs += df.abs();
            self.f_sq += df * df;
            self.slots += 1;
        }
        let (err, secs) = density_error(pair);
        self.density_err += err;
        self.seconds += secs;
    }

    pub fn add_all<'a>(&mut self, pairs: impl IntoIterator<Item = &'a EvalPair>) {
        for p in pairs {
            self.add(p);
        }
    }

    pub fn finish(&self) -> MetricSet {
        let mut m = MetricSet::default();
        if self.slots > 0 {
            let n = self.slots as f64;
            m.c_mae = Some(self.c_abs / (2.0 * n));
            m.c_rmse = Some((self.c_sq / (2.0 * n)).sqrt());
            m.c_mape = Some(100.0 * self.c_pct / (2.0 * n));
            m.f_mae = Some(self.f_abs / n);
            m.f_rmse = Some((self.f_sq / n).sqrt());
        }
        if self.seconds > 0 {
            m.f_aae = Some(self.density_err / (self.seconds as f64 / 60.0));
        }
        m
    }
}

pub fn evaluate_pairs(pairs: &[EvalPair]) -> MetricSet {
    let mut acc = MetricAccumulator::default();
    acc.add_all(pairs);
    acc.finish()
}

/// `(C-MAE, C-RMSE, C-MAPE)`.
pub fn c_metrics(pairs: &[EvalPair]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let m = evaluate_pairs(pairs);
    (m.c_mae, m.c_rmse, m.c_mape)
}

/// `(F-MAE, F-RMSE)`.
pub fn f_metrics(pairs: &[EvalPair]) -> (Option<f64>, Option<f64>) {
    let m = evaluate_pairs(pairs);
    (m.f_mae, m.f_rmse)
}

pub fn f_aae(pairs: &[EvalPair]) -> Option<f64> {
    evaluate_pairs(pairs).f_aae
}

/// Integer seconds `[first, last]` covered by each predicted slot. Slot
/// `k` spans `[b, b + p)` in continuous time; a second already claimed by
/// an earlier slot stays with it.
fn predicted_seconds(pair: &EvalPair) -> Vec<(i64, i64, f64)> {
    let mut out = Vec::with_capacity(pair.predicted.len());
    let mut claimed = i64::MIN;
    for s in &pair.predicted {
        let b = pair.t_last as f64 + s.elapsed;
        let first = (b.ceil() as i64).max(claimed.saturating_add(1));
        let last = (b + s.length).ceil() as i64 - 1;
        if last >= first {
            out.push((first, last, s.unit_flow));
            claimed = last;
        }
    }
    out
}

/// Accumulated absolute density error and number of masked-in seconds
/// inside `(anchor, anchor + horizon]`.
pub fn density_error(pair: &EvalPair) -> (f64, usize) {
    let lo = pair.anchor + 1;
    let hi = pair.anchor + pair.horizon;
    let pred = predicted_seconds(pair);
    let mut err = 0.0;
    let mut seconds = 0usize;
    for t in pair.truth.iter().filter(|t| t.mask) {
        let a = t.truth.begin.max(lo);
        let b = t.truth.end().min(hi);
        if b < a {
            continue;
        }
        let rho = t.truth.flow / t.truth.length as f64;
        let span = (b - a + 1) as usize;
        seconds += span;
        let mut covered = 0usize;
        for &(first, last, u) in &pred {
            let x = first.max(a);
            let y = last.min(b);
            if y >= x {
                let n = (y - x + 1) as usize;
                covered += n;
                err += n as f64 * (u - rho).abs();
            }
        }
        err += (span - covered) as f64 * rho.abs();
    }
    (err, seconds)
}

/// Metrics of one model, as written to the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    #[serde(rename = "C-MAE")]
    pub c_mae: Option<f64>,
    #[serde(rename = "C-RMSE")]
    pub c_rmse: Option<f64>,
    #[serde(rename = "C-MAPE")]
    pub c_mape: Option<f64>,
    #[serde(rename = "F-MAE")]
    pub f_mae: Option<f64>,
    #[serde(rename = "F-RMSE")]
    pub f_rmse: Option<f64>,
    #[serde(rename = "F-AAE")]
    pub f_aae: Option<f64>,
}

impl MetricRow {
    pub fn new(model: impl Into<String>, m: &MetricSet) -> Self {
        Self {
            model: model.into(),
            c_mae: m.c_mae,
            c_rmse: m.c_rmse,
            c_mape: m.c_mape,
            f_mae: m.f_mae,
            f_rmse: m.f_rmse,
            f_aae: m.f_aae,
        }
    }

    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            c_mae: self.c_mae,
            c_rmse: self.c_rmse,
            c_mape: self.c_mape,
            f_mae: self.f_mae,
            f_rmse: self.f_rmse,
            f_aae: self.f_aae,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
    Ok(rows)
}

/// Grouped bar chart: one group per metric, one bar per model, each
/// group scaled to its own maximum.
pub fn metrics_svg(rows: &[MetricRow]) -> String {
    const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];
    let group_w = 140.0;
    let bar_w = (group_w - 30.0) / rows.len().max(1) as f64;
    let (chart_h, top, left) = (220.0, 40.0, 20.0);
    let width = left * 2.0 + group_w * 6.0;
    let height = top + chart_h + 60.0 + 18.0 * rows.len() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n<text x=\"{left}\" y=\"20\" font-size=\"14\">Forecast error by metric (lower is better)</text>\n"
    ));
    let base = top + chart_h;
    for (g, name) in MetricSet::NAMES.iter().enumerate() {
        let x0 = left + g as f64 * group_w;
        let vals: Vec<Option<f64>> = rows.iter().map(|r| r.metrics().values()[g]).collect();
        let max = vals.iter().flatten().cloned().fold(0.0, f64::max);
        for (k, v) in vals.iter().enumerate() {
            let x = x0 + 15.0 + k as f64 * bar_w;
            match v {
                Some(v) => {
                    let h = if max > 0.0 { v / max * chart_h } else { 0.0 };
                    s.push_str(&format!(
                        "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{} {name}: {v:.4}</title></rect>\n",
                        base - h,
                        bar_w - 2.0,
                        COLORS[k % COLORS.len()],
                        rows[k].model
                    ));
                    s.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{}</text>\n",
                        x + bar_w / 2.0 - 1.0,
                        base - h - 3.0,
                        short(*v)
                    ));
                }
                None => s.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">n/a</text>\n",
                    x + bar_w / 2.0 - 1.0,
                    base - 3.0
                )),
            }
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{name}</text>\n",
            x0 + group_w / 2.0,
            base + 16.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{base}\" x2=\"{:.1}\" y2=\"{base}\" stroke=\"black\"/>\n",
        width - left
    ));
    for (k, r) in rows.iter().enumerate() {
        let y = base + 40.0 + 18.0 * k as f64;
        s.push_str(&format!(
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            y - 10.0,
            COLORS[k % COLORS.len()],
            left + 18.0,
            y,
            xml_escape(&r.model)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else if v >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
