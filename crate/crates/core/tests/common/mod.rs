//! Fixtures and independent reference implementations shared by the
//! integration tests. The oracles here are written with plain loops over
//! parameter values read straight from the store; they do not go through
//! the tape.
#![allow(dead_code)]

use aseer::autograd::{ParamId, ParamStore, Tape, Var};
use aseer::data::{
    DiffusionGraph, Edge, EdgeFeature, ForecastInstance, Measurement, NormStats, SensorNode, SensorWindow, TargetSlot,
};
use aseer::metrics::EvalPair;
use aseer::nn::{Activation, Mlp};
use aseer::sapn::PredictedSlot;
use aseer::time_encoding::TimeEncoding;
use ndarray::Array2;
use rand::Rng;

pub fn norm() -> NormStats {
    NormStats {
        p_mean: 80.0,
        p_std: 25.0,
        f_mean: 20.0,
        f_std: 8.0,
        u_mean: 0.25,
        u_std: 0.1,
    }
}

/// `n` sensors with each ordered pair connected with probability one half.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize) -> DiffusionGraph {
    let nodes = (0..n)
        .map(|i| SensorNode {
            id: format!("s{i}"),
            lat: 27.8 + 0.001 * i as f64,
            lon: 113.1,
        })
        .collect();
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            if src != dst && rng.gen_bool(0.5) {
                edges.push(Edge {
                    src,
                    dst,
                    feature: EdgeFeature {
                        distance_km: rng.gen_range(0.05..1.0),
                        reachable: rng.gen_bool(0.5),
                    },
                });
            }
        }
    }
    DiffusionGraph::from_parts(nodes, edges, 1.0)
}

/// Consecutive cycles starting near `start`, with occasional gaps.
pub fn random_history<R: Rng>(rng: &mut R, count: usize, start: i64) -> Vec<Measurement> {
    let mut t = start + rng.gen_range(0..60);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let p = rng.gen_range(20..120);
        out.push(Measurement::new(t, p, rng.gen_range(0.0..40.0)));
        t += p;
        if rng.gen_bool(0.2) {
            t += rng.gen_range(1..200);
        }
    }
    out
}

/// Instance with up to `max_meas` history measurements per sensor (some
/// sensors may be empty) and no targets.
pub fn random_instance<R: Rng>(rng: &mut R, sensors: usize, max_meas: usize) -> ForecastInstance {
    let windows: Vec<SensorWindow> = (0..sensors)
        .map(|s| {
            let count = rng.gen_range(0..=max_meas);
            SensorWindow {
                sensor: s,
                history: random_history(rng, count, 0),
                targets: vec![],
            }
        })
        .collect();
    let anchor = windows
        .iter()
        .filter_map(|w| w.last_end())
        .max()
        .unwrap_or(0)
        + rng.gen_range(0..100);
    ForecastInstance {
        anchor,
        history_len: anchor + 1,
        horizon: 3600,
        sensors: windows,
    }
}

/// Attaches `count` consecutive target slots after each available sensor's
/// last measurement; roughly a third are masked out.
pub fn with_targets<R: Rng>(rng: &mut R, mut inst: ForecastInstance, count: usize) -> ForecastInstance {
    for w in inst.sensors.iter_mut() {
        let Some(t_last) = w.last_end() else { continue };
        let mut begin = t_last + 1;
        w.targets = (0..count)
            .map(|_| {
                let p = rng.gen_range(20..120);
                let slot = TargetSlot {
                    truth: Measurement::new(begin, p, rng.gen_range(0.0..40.0)),
                    mask: rng.gen_bool(0.65),
                    elapsed: begin - t_last,
                };
                begin += p;
                slot
            })
            .collect();
    }
    inst
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Replaces every parameter with fresh random values (biases included) so
/// no check happens to sit on an all-zero special case.
pub fn scramble<R: Rng>(rng: &mut R, store: &mut ParamStore, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).dim();
        *store.get_mut(id) = random_matrix(rng, shape.0, shape.1, scale);
    }
}

// ---------------------------------------------------------------- oracles

/// Time encoding of one interval, computed from raw parameter values.
pub fn oracle_encoding(store: &ParamStore, te: &TimeEncoding, sensor: usize, dt: f64, time_scale: f64) -> Vec<f64> {
    let wp = store.get(te.omega_personal);
    let wg = store.get(te.omega_generic);
    let lam = store.get(te.lambda)[[sensor, 0]];
    let g = if te.generic_only { 1.0 } else { (-lam * lam).exp() };
    let mut out = vec![dt * time_scale];
    for j in 0..wg.ncols() {
        let a = wp[[sensor, j]] * dt;
        let b = wg[[0, j]] * dt;
        out.push((1.0 - g) * a.sin() + g * b.sin());
        out.push((1.0 - g) * a.cos() + g * b.cos());
    }
    out
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

/// Feed-forward evaluation of one input row with explicit loops.
pub fn oracle_mlp(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        let w = store.get(layer.weight);
        let b = store.get(layer.bias);
        let mut next = vec![0.0; layer.fan_out];
        for (o, v) in next.iter_mut().enumerate() {
            let mut s = b[[0, o]];
            for (k, hk) in h.iter().enumerate() {
                s += hk * w[[k, o]];
            }
            *v = if i < last { act(mlp.activation, s) } else { s };
        }
        h = next;
    }
    h
}

/// A message as seen by the brute-force graph convolution.
#[derive(Debug, Clone, Copy)]
pub struct RawMessage {
    pub source: usize,
    pub emit: i64,
    pub values: [f64; 2],
    pub edge: [f64; 2],
}

/// All neighbour measurements that reach `sensor` with end time in `(lo, hi]`,
/// found by rescanning the whole timeline.
pub fn rescan(inst: &ForecastInstance, graph: &DiffusionGraph, norm: &NormStats, sensor: usize, lo: i64, hi: i64) -> Vec<RawMessage> {
    let mut out = Vec::new();
    for e in graph.edges.iter().filter(|e| e.dst == sensor) {
        for m in &inst.sensors[e.src].history {
            let t = m.end();
            if t > lo && t <= hi {
                out.push(RawMessage {
                    source: e.src,
                    emit: t,
                    values: [
                        (m.length as f64 - norm.p_mean) / norm.p_std,
                        (m.flow - norm.f_mean) / norm.f_std,
                    ],
                    edge: [e.feature.distance_km, if e.feature.reachable { 1.0 } else { 0.0 }],
                });
            }
        }
    }
    out
}

/// Attention-weighted graph convolution of one query over `msgs`.
pub fn oracle_convolution(
    store: &ParamStore,
    te: &TimeEncoding,
    agdn: &aseer::agdn::AgdnLayer,
    sensor: usize,
    query: [f64; 2],
    query_time: i64,
    msgs: &[RawMessage],
) -> Vec<f64> {
    if msgs.is_empty() {
        return vec![0.0; agdn.width];
    }
    let w = store.get(agdn.w_att);
    let v = store.get(agdn.v_att);
    let feats: Vec<(Vec<f64>, Vec<f64>)> = msgs
        .iter()
        .map(|m| {
            let phi = oracle_encoding(store, te, sensor, (query_time - m.emit) as f64, agdn.time_scale);
            let mut att = vec![query[0], query[1], m.values[0], m.values[1]];
            att.extend(&phi);
            att.extend(m.edge);
            let mut agg = vec![m.values[0], m.values[1]];
            agg.extend(&phi);
            agg.extend(m.edge);
            (att, agg)
        })
        .collect();
    let scores: Vec<f64> = feats
        .iter()
        .map(|(att, _)| {
            let mut beta = 0.0;
            for j in 0..w.ncols() {
                let mut s = 0.0;
                for (k, a) in att.iter().enumerate() {
                    s += a * w[[k, j]];
                }
                beta += s.tanh() * v[[j, 0]];
            }
            beta
        })
        .collect();
    let alpha = softmax(&scores);
    let mut pooled = vec![0.0; feats[0].1.len()];
    for (a, (_, agg)) in alpha.iter().zip(&feats) {
        for (p, x) in pooled.iter_mut().zip(agg) {
            *p += a * x;
        }
    }
    oracle_mlp(store, &agdn.mlp, &pooled)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Spatial representations of every measurement (sensor-major, chronological)
/// followed by every tail, computed by rescanning for each query.
pub fn oracle_agdn(
    store: &ParamStore,
    te: &TimeEncoding,
    agdn: &aseer::agdn::AgdnLayer,
    inst: &ForecastInstance,
    graph: &DiffusionGraph,
    norm: &NormStats,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut per = Vec::new();
    let mut tails = Vec::new();
    for w in inst.sensors.iter().filter(|w| !w.history.is_empty()) {
        let mut prev = i64::MIN;
        for m in &w.history {
            let t = m.end();
            let msgs = rescan(inst, graph, norm, w.sensor, prev, t);
            let q = [
                (m.length as f64 - norm.p_mean) / norm.p_std,
                (m.flow - norm.f_mean) / norm.f_std,
            ];
            per.push(oracle_convolution(store, te, agdn, w.sensor, q, t, &msgs));
            prev = t;
        }
        let msgs = rescan(inst, graph, norm, w.sensor, prev, i64::MAX);
        tails.push(oracle_convolution(store, te, agdn, w.sensor, [0.0, 0.0], inst.anchor, &msgs));
    }
    (per, tails)
}

/// Meta-filter convolution of one sequence with two nested loops over
/// time and channels.
pub fn oracle_ttcn(store: &ParamStore, ttcn: &aseer::ttcn::Ttcn, z: &[Vec<f64>]) -> Vec<f64> {
    let cols = ttcn.maps * ttcn.d_in;
    let raw: Vec<Vec<f64>> = z
        .iter()
        .map(|row| {
            let h = oracle_mlp(store, &ttcn.trunk, row);
            let h: Vec<f64> = h.iter().map(|x| x.tanh()).collect();
            let w = store.get(ttcn.heads.weight);
            let b = store.get(ttcn.heads.bias);
            (0..cols)
                .map(|c| b[[0, c]] + h.iter().enumerate().map(|(k, hk)| hk * w[[k, c]]).sum::<f64>())
                .collect()
        })
        .collect();
    let mut out = vec![0.0; ttcn.maps];
    for (d, o) in out.iter_mut().enumerate() {
        for c in 0..ttcn.d_in {
            let col = d * ttcn.d_in + c;
            let denom: f64 = raw.iter().map(|r| r[col].exp()).sum();
            for (n, zn) in z.iter().enumerate() {
                *o += raw[n][col].exp() / denom * zn[c];
            }
        }
    }
    out
}

/// F-AAE by walking every second of the predicted window.
pub fn oracle_f_aae(pairs: &[EvalPair]) -> Option<f64> {
    let mut err = 0.0;
    let mut seconds = 0usize;
    for pair in pairs {
        for t in pair.truth.iter().filter(|t| t.mask) {
            let rho = t.truth.flow / t.truth.length as f64;
            for sec in t.truth.begin..=t.truth.end() {
                if sec <= pair.anchor || sec > pair.anchor + pair.horizon {
                    continue;
                }
                seconds += 1;
                let x = sec as f64;
                let hit = pair.predicted.iter().find(|p| {
                    let b = pair.t_last as f64 + p.elapsed;
                    b <= x && x < b + p.length
                });
                err += match hit {
                    Some(p) => (p.unit_flow - rho).abs(),
                    None => rho.abs(),
                };
            }
        }
    }
    (seconds > 0).then(|| err / (seconds as f64 / 60.0))
}

/// A random evaluation pair with predicted begins in increasing order.
pub fn random_pair<R: Rng>(rng: &mut R) -> EvalPair {
    let t_last = rng.gen_range(0..500);
    let anchor = t_last + rng.gen_range(0..50);
    let horizon = rng.gen_range(30..400);
    let mut truth = Vec::new();
    let mut begin = t_last + 1;
    while begin <= anchor + horizon {
        let p = rng.gen_range(5..80);
        truth.push(TargetSlot {
            truth: Measurement::new(begin, p, rng.gen_range(0.0..30.0)),
            mask: rng.gen_bool(0.7),
            elapsed: begin - t_last,
        });
        begin += p;
    }
    let mut predicted = Vec::new();
    let mut e = rng.gen_range(0.0..20.0);
    for _ in 0..rng.gen_range(0..12) {
        let len = rng.gen_range(1.0..70.0);
        predicted.push(PredictedSlot {
            elapsed: e,
            length: len,
            unit_flow: rng.gen_range(0.0..1.0),
        });
        // chained, with occasional gaps and overlaps
        e += len * rng.gen_range(0.6..1.4);
    }
    EvalPair {
        t_last,
        anchor,
        horizon,
        predicted,
        truth,
    }
}

// ------------------------------------------------------ gradient checking

/// Worst relative error between tape gradients and central finite
/// differences of `f` with respect to every entry of `ids`. Relative error
/// is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    let analytic: Vec<Array2<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
        })
        .collect();
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let v = f(&mut t, store);
        t.scalar(v)
    };
    let h = 1e-5;
    let floor = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let (rows, cols) = store.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = eval(store);
                store.get_mut(id)[[r, c]] = orig - h;
                let down = eval(store);
                store.get_mut(id)[[r, c]] = orig;
                let num = (up - down) / (2.0 * h);
                let a = analytic[k][[r, c]];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Contracts `v` with a fixed random weight matrix to a scalar.
pub fn project(tape: &mut Tape, v: Var, weights: &Array2<f64>) -> Var {
    let p = tape.mul_const(v, weights.clone());
    tape.sum_all(p)
}

pub fn mlp_ids(mlp: &Mlp) -> Vec<ParamId> {
    mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

pub mod checks;
