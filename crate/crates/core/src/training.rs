//! Masked losses and the optimization loop.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::data::{DiffusionGraph, ForecastInstance, Splits, TargetSlot};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model};
use crate::nn::Adam;

/// The three masked loss terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_delta: f64,
    pub l_f: f64,
    pub total: f64,
    /// Number of masked-in slots the terms average over.
    pub masked: usize,
}

impl LossBreakdown {
    pub fn new(l_p: f64, l_delta: f64, l_f: f64, masked: usize) -> Self {
        Self {
            l_p,
            l_delta,
            l_f,
            total: l_p + l_delta + l_f,
            masked,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_p.is_finite() && self.l_delta.is_finite() && self.l_f.is_finite()
    }
}

fn masked_mae(pred: &[Vec<f64>], targets: &[Vec<TargetSlot>], err: impl Fn(f64, &TargetSlot) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(targets) {
        assert!(p.len() >= t.len(), "predictions must cover every target slot");
        for (&v, slot) in p.iter().zip(t) {
            if slot.mask {
                sum += err(v, slot);
                count += 1;
            }
        }
    }
    if count == 0 {
        log::warn!("no masked-in target slots; loss term is 0");
        return 0.0;
    }
    sum / count as f64
}

/// Masked MAE between predicted and true cycle lengths.
pub fn loss_cycle(pred: &[Vec<f64>], targets: &[Vec<TargetSlot>]) -> f64 {
    masked_mae(pred, targets, |p, s| (p - s.truth.length as f64).abs())
}

/// Masked MAE between predicted and true elapsed times.
pub fn loss_timing(pred: &[Vec<f64>], targets: &[Vec<TargetSlot>]) -> f64 {
    masked_mae(pred, targets, |d, s| (d - s.elapsed as f64).abs())
}

/// Masked MAE of flows, with predicted unit-time flow scaled by the true length.
pub fn loss_flow(pred: &[Vec<f64>], targets: &[Vec<TargetSlot>]) -> f64 {
    masked_mae(pred, targets, |u, s| (u * s.truth.length as f64 - s.truth.flow).abs())
}

/// Target slots as dense `rows x width` matrices (zero-padded, mask 0).
#[derive(Debug, Clone)]
pub struct TargetMatrices {
    pub length: Array2<f64>,
    pub elapsed: Array2<f64>,
    pub flow: Array2<f64>,
    pub mask: Array2<f64>,
}

impl TargetMatrices {
    pub fn build(instance: &ForecastInstance, rows: &[usize], width: usize) -> Self {
        let n = rows.len();
        let mut t = Self {
            length: Array2::zeros((n, width)),
            elapsed: Array2::zeros((n, width)),
            flow: Array2::zeros((n, width)),
            mask: Array2::zeros((n, width)),
        };
        for (r, &s) in rows.iter().enumerate() {
            for (k, slot) in instance.sensors[s].targets.iter().enumerate().take(width) {
                t.length[[r, k]] = slot.truth.length as f64;
                t.elapsed[[r, k]] = slot.elapsed as f64;
                t.flow[[r, k]] = slot.truth.flow;
                if slot.mask {
                    t.mask[[r, k]] = 1.0;
                }
            }
        }
        t
    }

    pub fn masked(&self) -> usize {
        self.mask.sum() as usize
    }
}

/// Loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_p: Var,
    pub l_delta: Var,
    pub l_f: Var,
    pub total: Var,
    pub masked: usize,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown::new(
            tape.scalar(self.l_p),
            tape.scalar(self.l_delta),
            tape.scalar(self.l_f),
            self.masked,
        )
    }
}

/// Records the three masked losses of a training-mode forward pass.
pub fn loss_vars(tape: &mut Tape, out: &ForwardOutput, instance: &ForecastInstance) -> LossVars {
    let width = tape.value(out.rollout.lengths).ncols();
    let t = TargetMatrices::build(instance, &out.rows, width);
    let masked = t.masked();
    let inv = if masked == 0 { 0.0 } else { 1.0 / masked as f64 };
    let mae = |tape: &mut Tape, pred: Var, truth: Array2<f64>| {
        let truth = tape.constant(truth);
        let diff = tape.sub(pred, truth);
        let diff = tape.abs(diff);
        let diff = tape.mul_const(diff, t.mask.clone());
        let sum = tape.sum_all(diff);
        tape.scale(sum, inv)
    };
    let l_p = mae(tape, out.rollout.lengths, t.length.clone());
    let l_delta = mae(tape, out.rollout.elapsed, t.elapsed.clone());
    let flow = tape.mul_const(out.rollout.unit_flows, t.length.clone());
    let l_f = mae(tape, flow, t.flow.clone());
    let total = tape.add(l_p, l_delta);
    let total = tape.add(total, l_f);
    LossVars {
        l_p,
        l_delta,
        l_f,
        total,
        masked,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    /// Seed of the per-epoch window shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            patience: 10,
            max_epochs: 100,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Loss of one window without touching parameters; `None` when no sensor is available.
pub fn window_loss(model: &Model, graph: &DiffusionGraph, instance: &ForecastInstance) -> Result<Option<LossBreakdown>> {
    let mut tape = Tape::new();
    let Some(out) = model.forward_train(&mut tape, instance, graph)? else {
        return Ok(None);
    };
    Ok(Some(loss_vars(&mut tape, &out, instance).breakdown(&tape)))
}

/// Mask-weighted mean loss over a set of windows.
pub fn evaluate_loss(model: &Model, graph: &DiffusionGraph, windows: &[ForecastInstance]) -> Result<LossBreakdown> {
    let (mut p, mut d, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
    for w in windows {
        if let Some(l) = window_loss(model, graph, w)? {
            let k = l.masked as f64;
            p += l.l_p * k;
            d += l.l_delta * k;
            f += l.l_f * k;
            n += l.masked;
        }
    }
    if n == 0 {
        return Ok(LossBreakdown::default());
    }
    let k = n as f64;
    Ok(LossBreakdown::new(p / k, d / k, f / k, n))
}

/// One optimizer step on one window; returns its pre-step losses.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    graph: &DiffusionGraph,
    instance: &ForecastInstance,
) -> Result<Option<LossBreakdown>> {
    let mut tape = Tape::new();
    let Some(out) = model.forward_train(&mut tape, instance, graph)? else {
        return Ok(None);
    };
    let loss = loss_vars(&mut tape, &out, instance);
    if loss.masked == 0 {
        return Ok(None);
    }
    let breakdown = loss.breakdown(&tape);
    if !breakdown.is_finite() {
        return Ok(Some(breakdown));
    }
    let grads = tape.backward(loss.total).into_dense(&model.store);
    adam.step(&mut model.store, grads);
    Ok(Some(breakdown))
}

fn snapshot(store: &ParamStore) -> Vec<Array2<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Array2<f64>>) {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.get_mut(id) = v;
    }
}

/// Trains with early stopping on the validation loss and leaves the
/// best-validation parameters in `model`. `on_epoch` sees every record as
/// soon as it is complete.
pub fn train(
    model: &mut Model,
    graph: &DiffusionGraph,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Data("no training windows; dataset too short for the window sizes".into()));
    }
    if splits.val.is_empty() {
        log::warn!("no validation windows; early stopping uses the training loss");
    }
    let mut adam = Adam::new(&model.store, cfg.lr, Some(cfg.clip_norm));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut history = Vec::new();
    let mut best = (0usize, f64::INFINITY, snapshot(&model.store));
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut p, mut d, mut f, mut steps, mut masked) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for &i in &order {
            let Some(l) = train_step(model, &mut adam, graph, &splits.train[i])? else {
                continue;
            };
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!(
                        "non-finite loss at window anchored {} (L_p {}, L_delta {}, L_f {})",
                        splits.train[i].anchor, l.l_p, l.l_delta, l.l_f
                    ),
                });
            }
            p += l.l_p;
            d += l.l_delta;
            f += l.l_f;
            steps += 1;
            masked += l.masked;
        }
        let k = steps.max(1) as f64;
        let train = LossBreakdown::new(p / k, d / k, f / k, masked);
        let val_total = if splits.val.is_empty() {
            train.total
        } else {
            evaluate_loss(model, graph, &splits.val)?.total
        };
        if !val_total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite validation loss {val_total}"),
            });
        }
        let record = EpochRecord { epoch, train, val_total };
        log::info!(
            "epoch {epoch}: train {:.4} (L_p {:.4}, L_delta {:.4}, L_f {:.4}) val {:.4}",
            train.total,
            train.l_p,
            train.l_delta,
            train.l_f,
            val_total
        );
        on_epoch(&record);
        history.push(record);
        if val_total < best.1 {
            best = (epoch, val_total, snapshot(&model.store));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.0);
                break;
            }
        }
    }
    let (best_epoch, best_val, values) = best;
    restore(&mut model.store, values);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["epoch", "L_p", "L_delta", "L_f", "val_total"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train.l_p.to_string(),
            r.train.l_delta.to_string(),
            r.train.l_f.to_string(),
            r.val_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
