//! Evaluation over forecast windows, forecast export and latency timing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{DiffusionGraph, ForecastInstance};
use crate::error::{Error, Result};
use crate::metrics::{EvalPair, MetricAccumulator, MetricSet};
use crate::model::{Forecaster, Model, ModelConfig, SensorForecast};
use crate::sapn::RolloutMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: MetricSet,
    pub windows: usize,
    pub forecasts: usize,
    /// Forecasts that ran out of decoding steps before covering the horizon.
    pub truncated: usize,
}

/// Forecasts every window and pools the metrics over all of them.
pub fn evaluate(forecaster: &dyn Forecaster, graph: &DiffusionGraph, windows: &[ForecastInstance]) -> Result<EvalSummary> {
    let mut acc = MetricAccumulator::default();
    let mut forecasts = 0;
    let mut truncated = 0;
    for w in windows {
        let out = forecaster.forecast(w, graph, true)?;
        forecasts += out.len();
        truncated += out.iter().filter(|f| f.truncated).count();
        acc.add_all(&EvalPair::from_forecasts(w, &out));
    }
    if truncated > 0 {
        log::warn!("{truncated} of {forecasts} forecasts hit the step budget");
    }
    Ok(EvalSummary {
        metrics: acc.finish(),
        windows: windows.len(),
        forecasts,
        truncated,
    })
}

/// Writes `sensor_id, slot_index, begin, length, flow, elapsed` rows.
pub fn write_forecast_csv(path: &Path, sensor_ids: &[String], forecasts: &[SensorForecast]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sensor_id", "slot_index", "begin", "length", "flow", "elapsed"])?;
    for f in forecasts {
        let id = sensor_ids
            .get(f.sensor)
            .ok_or_else(|| Error::UnknownSensor(format!("#{}", f.sensor)))?;
        for (k, s) in f.slots.iter().enumerate() {
            w.write_record([
                id.clone(),
                k.to_string(),
                f.begin(k).to_string(),
                s.length.to_string(),
                s.flow().to_string(),
                s.elapsed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Slots emitted for a horizon of `hours` at one cycle per minute.
pub fn latency_slots(hours: f64) -> usize {
    (hours * 3600.0 / 60.0).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub xi: usize,
    pub hours: f64,
    pub ms: f64,
    /// Predictor invocations per forecast.
    pub invocations: usize,
}

/// Mean wall-clock time of the decoding rollout that emits exactly
/// `latency_slots(hours)` slots per sensor, for a model built with the
/// dimensions of `base` and step size `xi`. The encoder runs once outside
/// the timed region.
pub fn measure_latency(
    base: &ModelConfig,
    sensor_ids: &[String],
    norm: crate::data::NormStats,
    instance: &ForecastInstance,
    graph: &DiffusionGraph,
    xi: usize,
    hours: f64,
    repeats: usize,
) -> Result<LatencyRecord> {
    let mut cfg = base.clone();
    cfg.xi = xi;
    let model = Model::new(cfg, sensor_ids.to_vec(), norm)?;
    let slots = latency_slots(hours);
    let mut tape = Tape::new();
    let Some(enc) = model.encode(&mut tape, instance, graph)? else {
        return Err(Error::Data("latency window has no available sensor".into()));
    };
    let seq = tape.value(enc.seq).clone();
    let mode = RolloutMode::Until {
        cover: vec![0.0; enc.rows.len()],
        needed: vec![slots; enc.rows.len()],
        max_steps: slots.div_ceil(model.xi()),
    };
    let run = || -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let seq = tape.constant(seq.clone());
        let start = Instant::now();
        let out = model
            .sapn
            .rollout(&mut tape, &model.store, &model.te, seq, &enc.rows, &model.norm, &mode)?;
        Ok((start.elapsed().as_secs_f64() * 1e3, out.steps))
    };
    run()?;
    let mut total = 0.0;
    let mut invocations = 0;
    for _ in 0..repeats.max(1) {
        let (ms, steps) = run()?;
        total += ms;
        invocations = steps;
    }
    Ok(LatencyRecord {
        xi: model.xi(),
        hours,
        ms: total / repeats.max(1) as f64,
        invocations,
    })
}

pub fn write_latency_csv(path: &Path, rows: &[LatencyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["xi", "hours", "ms"])?;
    for r in rows {
        w.write_record([r.xi.to_string(), r.hours.to_string(), r.ms.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A forecaster that replays the ground truth; useful as a fixture.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthReplay;

impl Forecaster for TruthReplay {
    fn name(&self) -> &str {
        "truth"
    }

    fn forecast(&self, instance: &ForecastInstance, _graph: &DiffusionGraph, _needed: bool) -> Result<Vec<SensorForecast>> {
        Ok(instance
            .available()
            .filter(|w| !w.targets.is_empty())
            .map(|w| SensorForecast {
                sensor: w.sensor,
                t_last: w.last_end().unwrap_or(instance.anchor),
                slots: w
                    .targets
                    .iter()
                    .map(|t| crate::sapn::PredictedSlot {
                        elapsed: t.elapsed as f64,
                        length: t.truth.length as f64,
                        unit_flow: t.truth.flow / t.truth.length as f64,
                    })
                    .collect(),
                truncated: false,
            })
            .collect())
    }
}

/// Predictor invocations of a rollout that emits `slots` slots.
pub fn invocations_for(slots: usize, xi: usize) -> usize {
    slots.div_ceil(xi.max(1)).max(1)
}
