//! Parameter-free reference predictors.
//!
//! Both repeat one cycle until the horizon is covered, with begins chained
//! consecutively from the second after the last observed measurement.

use crate::data::{DiffusionGraph, ForecastInstance, SensorWindow};
use crate::error::Result;
use crate::model::{Forecaster, SensorForecast};
use crate::sapn::PredictedSlot;

/// Repeats `(length, flow)` until `cover` seconds after `t_last` are
/// covered (at least one slot) and at least `needed` slots exist.
pub fn repeat_cycle(window: &SensorWindow, length: i64, flow: f64, cover: i64, needed: usize) -> Option<SensorForecast> {
    let t_last = window.last_end()?;
    let length = length.max(1);
    let unit_flow = flow / length as f64;
    let mut slots = Vec::new();
    let mut covered = 0;
    while slots.is_empty() || covered < cover || slots.len() < needed {
        slots.push(PredictedSlot {
            elapsed: (covered + 1) as f64,
            length: length as f64,
            unit_flow,
        });
        covered += length;
    }
    Some(SensorForecast {
        sensor: window.sensor,
        t_last,
        slots,
        truncated: false,
    })
}

fn cover(instance: &ForecastInstance, window: &SensorWindow) -> i64 {
    window
        .last_end()
        .map(|t| instance.anchor + instance.horizon - t)
        .unwrap_or(0)
}

fn needed_slots(window: &SensorWindow, needed: bool) -> usize {
    if needed {
        window.targets.len()
    } else {
        0
    }
}

/// Repeats each sensor's last observed measurement.
pub fn last_predict(instance: &ForecastInstance, needed: bool) -> Vec<SensorForecast> {
    instance
        .available()
        .filter_map(|w| {
            let m = w.history.last()?;
            repeat_cycle(w, m.length, m.flow, cover(instance, w), needed_slots(w, needed))
        })
        .collect()
}

/// Repeats each sensor's mean length (rounded, at least 1 s) and mean flow
/// over the historical window.
pub fn ha_predict(instance: &ForecastInstance, needed: bool) -> Vec<SensorForecast> {
    instance
        .available()
        .filter_map(|w| {
            let n = w.history.len() as f64;
            let p = w.history.iter().map(|m| m.length as f64).sum::<f64>() / n;
            let f = w.history.iter().map(|m| m.flow).sum::<f64>() / n;
            repeat_cycle(w, (p.round() as i64).max(1), f, cover(instance, w), needed_slots(w, needed))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Last;

#[derive(Debug, Clone, Copy, Default)]
pub struct HistoricalAverage;

impl Forecaster for Last {
    fn name(&self) -> &str {
        "last"
    }

    fn forecast(&self, instance: &ForecastInstance, _graph: &DiffusionGraph, needed: bool) -> Result<Vec<SensorForecast>> {
        Ok(last_predict(instance, needed))
    }
}

impl Forecaster for HistoricalAverage {
    fn name(&self) -> &str {
        "ha"
    }

    fn forecast(&self, instance: &ForecastInstance, _graph: &DiffusionGraph, needed: bool) -> Result<Vec<SensorForecast>> {
        Ok(ha_predict(instance, needed))
    }
}
