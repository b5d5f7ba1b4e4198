//! Asynchronous graph diffusion.
//!
//! Observed measurements are replayed in order of their end timestamps.
//! Each measurement is sent as a [`TrafficMessage`] to every out-neighbour
//! of its sensor, where it waits in a [`MessageBuffer`]. When a sensor
//! observes its own measurement it convolves over its buffer with
//! attention and clears it. After the last measurement of every sensor a
//! virtual, valueless query drains whatever is left.
//!
//! The replay only decides *which* messages meet *which* query; it is pure
//! bookkeeping and yields a [`Schedule`]. [`AgdnLayer::forward`] evaluates
//! every convolution of a schedule in one batched pass on the tape.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::data::{DiffusionGraph, EdgeFeature, ForecastInstance, NormStats};
use crate::error::{Error, Result};
use crate::nn::{glorot, Activation, Mlp};
use crate::time_encoding::TimeEncoding;

/// A diffused measurement waiting at a neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficMessage {
    pub source: usize,
    /// z-scored `(cycle length, flow)`.
    pub values: [f64; 2],
    pub emit_time: i64,
    pub edge: EdgeFeature,
}

impl TrafficMessage {
    pub fn edge_values(&self) -> [f64; 2] {
        [self.edge.distance_km, if self.edge.reachable { 1.0 } else { 0.0 }]
    }
}

/// Messages received by one sensor since its last convolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageBuffer {
    messages: Vec<TrafficMessage>,
}

impl MessageBuffer {
    pub fn store(&mut self, msg: TrafficMessage) {
        let key = (msg.emit_time, msg.source);
        let pos = self
            .messages
            .partition_point(|m| (m.emit_time, m.source) <= key);
        self.messages.insert(pos, msg);
    }

    /// Empties the buffer, returning its contents in `(emit_time, source)` order.
    pub fn drain(&mut self) -> Vec<TrafficMessage> {
        std::mem::take(&mut self.messages)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn messages(&self) -> &[TrafficMessage] {
        &self.messages
    }
}

/// One asynchronous graph convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convolution {
    pub sensor: usize,
    pub query_time: i64,
    /// z-scored query measurement; zeros for the virtual tail query.
    pub query: [f64; 2],
    pub is_tail: bool,
    pub messages: Vec<TrafficMessage>,
}

/// Result of replaying one forecast window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Sensors with at least one observed measurement, ascending.
    pub sensors: Vec<usize>,
    /// `per_sensor[k]` holds one convolution per measurement of `sensors[k]`.
    pub per_sensor: Vec<Vec<Convolution>>,
    /// Virtual tail convolution of `sensors[k]`.
    pub tails: Vec<Convolution>,
    pub stored: usize,
    /// Messages left at sensors that never convolve in this window.
    pub discarded: usize,
}

impl Schedule {
    /// Measurement convolutions (sensor-major, chronological) followed by tails.
    pub fn ordered(&self) -> impl Iterator<Item = &Convolution> {
        self.per_sensor.iter().flatten().chain(self.tails.iter())
    }

    pub fn measurement_count(&self) -> usize {
        self.per_sensor.iter().map(Vec::len).sum()
    }

    pub fn consumed(&self) -> usize {
        self.ordered().map(|c| c.messages.len()).sum()
    }
}

/// Event-driven replay of the historical window.
///
/// At equal timestamps every store happens before any convolution, and
/// within each phase sensors go in ascending index order. The virtual tail
/// query sits at the window anchor so every interval it sees is `>= 0`.
pub fn replay(instance: &ForecastInstance, graph: &DiffusionGraph, norm: &NormStats) -> Result<Schedule> {
    if instance.sensors.len() != graph.len() {
        return Err(Error::Shape(format!(
            "instance has {} sensors, graph has {}",
            instance.sensors.len(),
            graph.len()
        )));
    }
    let mut events: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
    for (s, w) in instance.sensors.iter().enumerate() {
        for (n, m) in w.history.iter().enumerate() {
            events.entry(m.end()).or_default().push((s, n));
        }
    }
    let values = |s: usize, n: usize| {
        let m = &instance.sensors[s].history[n];
        [norm.z_length(m.length as f64), norm.z_flow(m.flow)]
    };

    let mut buffers = vec![MessageBuffer::default(); graph.len()];
    let mut per_sensor: Vec<Vec<Convolution>> = vec![Vec::new(); graph.len()];
    let mut stored = 0;
    for (&t, evs) in events.iter_mut() {
        evs.sort_unstable();
        for &(s, n) in evs.iter() {
            let v = values(s, n);
            for e in graph.out_edges(s) {
                buffers[e.dst].store(TrafficMessage {
                    source: s,
                    values: v,
                    emit_time: t,
                    edge: e.feature,
                });
                stored += 1;
            }
        }
        for &(s, n) in evs.iter() {
            per_sensor[s].push(Convolution {
                sensor: s,
                query_time: t,
                query: values(s, n),
                is_tail: false,
                messages: buffers[s].drain(),
            });
        }
    }

    let sensors: Vec<usize> = (0..graph.len())
        .filter(|&s| instance.sensors[s].is_available())
        .collect();
    let tails = sensors
        .iter()
        .map(|&s| Convolution {
            sensor: s,
            query_time: instance.anchor,
            query: [0.0, 0.0],
            is_tail: true,
            messages: buffers[s].drain(),
        })
        .collect();
    let discarded = buffers.iter().map(MessageBuffer::len).sum();
    let per_sensor = sensors.iter().map(|&s| std::mem::take(&mut per_sensor[s])).collect();
    Ok(Schedule {
        sensors,
        per_sensor,
        tails,
        stored,
        discarded,
    })
}

/// Attention and aggregation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgdnLayer {
    pub w_att: ParamId,
    pub v_att: ParamId,
    pub mlp: Mlp,
    pub width: usize,
    /// Multiplies the raw-interval entry of the time encoding before use.
    pub time_scale: f64,
}

/// Spatial representations for one schedule, as tape rows.
#[derive(Debug, Clone, Copy)]
pub struct SpatialOutput {
    /// `measurement_count x width`, aligned with [`Schedule::ordered`].
    pub per_measurement: Var,
    /// `sensors x width` tail representations.
    pub tail: Var,
}

impl AgdnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        te_width: usize,
        width: usize,
        time_scale: f64,
    ) -> Self {
        let att_in = 2 + 2 + te_width + 2;
        let agg_in = 2 + te_width + 2;
        let w_att = store.add(format!("{name}.w_att"), glorot(rng, att_in, width));
        let v_att = store.add(format!("{name}.v_att"), glorot(rng, width, 1));
        let mlp = Mlp::new(
            store,
            rng,
            &format!("{name}.mlp"),
            &[agg_in, width, width, width],
            Activation::Relu,
        );
        Self {
            w_att,
            v_att,
            mlp,
            width,
            time_scale,
        }
    }

    /// Evaluates a list of convolutions in one batch. Returns the
    /// `convs.len() x width` representations and the attention weights of
    /// every message (concatenated in convolution order).
    pub fn convolve(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        te: &TimeEncoding,
        convs: &[&Convolution],
    ) -> (Var, Var) {
        let pairs: usize = convs.iter().map(|c| c.messages.len()).sum();
        let mut query = Array2::zeros((pairs, 2));
        let mut msg = Array2::zeros((pairs, 2));
        let mut edge = Array2::zeros((pairs, 2));
        let mut dt = Array2::zeros((pairs, 1));
        let mut rows = Vec::with_capacity(pairs);
        let mut offsets = Vec::with_capacity(convs.len() + 1);
        let mut nonempty = Array2::zeros((convs.len(), 1));
        offsets.push(0);
        let mut r = 0;
        for (ci, c) in convs.iter().enumerate() {
            for m in &c.messages {
                query[[r, 0]] = c.query[0];
                query[[r, 1]] = c.query[1];
                msg[[r, 0]] = m.values[0];
                msg[[r, 1]] = m.values[1];
                let ev = m.edge_values();
                edge[[r, 0]] = ev[0];
                edge[[r, 1]] = ev[1];
                dt[[r, 0]] = (c.query_time - m.emit_time) as f64;
                rows.push(c.sensor);
                r += 1;
            }
            if !c.messages.is_empty() {
                nonempty[[ci, 0]] = 1.0;
            }
            offsets.push(r);
        }
        let query = tape.constant(query);
        let msg = tape.constant(msg);
        let edge = tape.constant(edge);
        let dt = tape.constant(dt);
        let phi = te.encode_scaled(tape, store, dt, rows, self.time_scale);

        let att_in = tape.concat_cols(&[query, msg, phi, edge]);
        let w = tape.param(store, self.w_att);
        let v = tape.param(store, self.v_att);
        let hidden = tape.matmul(att_in, w);
        let hidden = tape.tanh(hidden);
        let beta = tape.matmul(hidden, v);
        let alpha = tape.segment_softmax(beta, offsets.clone());

        let agg_in = tape.concat_cols(&[msg, phi, edge]);
        let weighted = tape.mul_col(agg_in, alpha);
        let pooled = tape.segment_sum(weighted, offsets);
        let h = self.mlp.forward(tape, store, pooled);
        let mask = tape.constant(nonempty);
        (tape.mul_col(h, mask), alpha)
    }

    /// Spatial representations for every measurement and tail of a schedule.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, te: &TimeEncoding, schedule: &Schedule) -> SpatialOutput {
        let convs: Vec<&Convolution> = schedule.ordered().collect();
        let (h, _) = self.convolve(tape, store, te, &convs);
        let m = schedule.measurement_count();
        SpatialOutput {
            per_measurement: tape.slice_rows(h, 0, m),
            tail: tape.slice_rows(h, m, schedule.tails.len()),
        }
    }

    /// Attention weights of one query over a non-empty buffer.
    pub fn attention_weights(
        &self,
        store: &ParamStore,
        te: &TimeEncoding,
        conv: &Convolution,
    ) -> Result<Vec<f64>> {
        if conv.messages.is_empty() {
            return Err(Error::Shape("attention over an empty buffer".into()));
        }
        let mut tape = Tape::new();
        let (_, alpha) = self.convolve(&mut tape, store, te, &[conv]);
        Ok(tape.value(alpha).column(0).to_vec())
    }

    /// Feed-forward network over the `alpha`-weighted sum of message vectors.
    pub fn aggregate(
        &self,
        store: &ParamStore,
        te: &TimeEncoding,
        conv: &Convolution,
        alpha: &[f64],
    ) -> Result<Vec<f64>> {
        if alpha.len() != conv.messages.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} messages",
                alpha.len(),
                conv.messages.len()
            )));
        }
        if conv.messages.is_empty() {
            return Ok(vec![0.0; self.width]);
        }
        let mut tape = Tape::new();
        let n = conv.messages.len();
        let msg = Array2::from_shape_fn((n, 2), |(r, c)| conv.messages[r].values[c]);
        let edge = Array2::from_shape_fn((n, 2), |(r, c)| conv.messages[r].edge_values()[c]);
        let dt = Array2::from_shape_fn((n, 1), |(r, _)| (conv.query_time - conv.messages[r].emit_time) as f64);
        let msg = tape.constant(msg);
        let edge = tape.constant(edge);
        let dt = tape.constant(dt);
        let phi = te.encode_scaled(&mut tape, store, dt, vec![conv.sensor; n], self.time_scale);
        let agg_in = tape.concat_cols(&[msg, phi, edge]);
        let a = tape.constant(Array2::from_shape_vec((n, 1), alpha.to_vec()).expect("column"));
        let weighted = tape.mul_col(agg_in, a);
        let pooled = tape.segment_sum(weighted, vec![0, n]);
        let h = self.mlp.forward(&mut tape, store, pooled);
        Ok(tape.value(h).row(0).to_vec())
    }
}
