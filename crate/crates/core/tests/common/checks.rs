//! Measured quantities behind the acceptance criteria. Each function
//! returns the worst deviation it saw so callers can compare it with
//! their own tolerance and print it.

use aseer::agdn::{replay, AgdnLayer, Convolution};
use aseer::autograd::{ParamId, ParamStore, Tape};
use aseer::data::ForecastInstance;
use aseer::metrics::{evaluate_pairs, f_aae, EvalPair};
use aseer::model::{Forecaster, Model, ModelConfig};
use aseer::sapn::{RolloutMode, Sapn};
use aseer::time_encoding::{mixture_weights, TimeEncoding};
use aseer::training::window_loss;
use aseer::ttcn::Ttcn;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn max_diff(a: &[Vec<f64>], b: ArrayView2<f64>) -> f64 {
    if a.len() != b.nrows() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        if row.len() != b.ncols() {
            return f64::INFINITY;
        }
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b[[r, c]]).abs());
        }
    }
    worst
}

/// Event-driven graph convolution against a full rescan per query.
pub fn agdn_vs_rescan(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = norm();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=5);
        let graph = random_graph(&mut rng, n);
        let inst = random_instance(&mut rng, n, 20);
        let mut store = ParamStore::new();
        let te = TimeEncoding::new(&mut store, &mut rng, "te", n, 4).unwrap();
        let agdn = AgdnLayer::new(&mut store, &mut rng, "agdn", te.width(), 5, 1.0 / 3600.0);
        scramble(&mut rng, &mut store, 0.5);
        let schedule = replay(&inst, &graph, &norm).unwrap();
        let mut tape = Tape::new();
        let out = agdn.forward(&mut tape, &store, &te, &schedule);
        let (per, tails) = oracle_agdn(&store, &te, &agdn, &inst, &graph, &norm);
        worst = worst
            .max(max_diff(&per, tape.value(out.per_measurement).view()))
            .max(max_diff(&tails, tape.value(out.tail).view()));
    }
    worst
}

/// Batched meta-filter convolution against the double loop, T <= 8,
/// D_in <= 4, D <= 3.
pub fn ttcn_vs_double_loop(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d_in = rng.gen_range(1..=4);
        let maps = rng.gen_range(1..=3);
        let mut store = ParamStore::new();
        let ttcn = Ttcn::new(&mut store, &mut rng, "ttcn", d_in, 6, maps);
        scramble(&mut rng, &mut store, 0.8);
        let seqs: Vec<Vec<Vec<f64>>> = (0..rng.gen_range(1..=3))
            .map(|_| {
                (0..rng.gen_range(1..=8))
                    .map(|_| (0..d_in).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let rows: Vec<&Vec<f64>> = seqs.iter().flatten().collect();
        let mut offsets = vec![0];
        for s in &seqs {
            offsets.push(offsets.last().unwrap() + s.len());
        }
        let mut tape = Tape::new();
        let z = tape.constant(Array2::from_shape_fn((rows.len(), d_in), |(r, c)| rows[r][c]));
        let h = ttcn.forward(&mut tape, &store, z, &offsets).unwrap();
        let expected: Vec<Vec<f64>> = seqs.iter().map(|s| oracle_ttcn(&store, &ttcn, s)).collect();
        worst = worst.max(max_diff(&expected, tape.value(h).view()));
    }
    worst
}

/// F-AAE against the per-second walk; a presence mismatch counts as infinite.
pub fn f_aae_vs_walk(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let pair = random_pair(&mut rng);
        let pairs = std::slice::from_ref(&pair);
        worst = worst.max(match (f_aae(pairs), oracle_f_aae(pairs)) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    worst
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

pub fn grad_time_encoding() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, &mut rng, "te", 3, 4).unwrap();
    store.get_mut(te.lambda).assign(&random_matrix(&mut rng, 3, 1, 1.0));
    let dt = random_matrix(&mut rng, 6, 1, 300.0).mapv(f64::abs);
    let weights = random_matrix(&mut rng, 6, te.width(), 1.0);
    let rows = vec![0, 1, 2, 0, 1, 2];
    let ids = all_ids(&store);
    grad_check(&mut store, &ids, |tape, store| {
        let dt = tape.constant(dt.clone());
        let phi = te.encode_scaled(tape, store, dt, rows.clone(), 1.0 / 3600.0);
        project(tape, phi, &weights)
    })
}

pub fn grad_agdn() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let graph = random_graph(&mut rng, 3);
    let inst = random_instance(&mut rng, 3, 5);
    let schedule = replay(&inst, &graph, &norm()).unwrap();
    assert!(schedule.consumed() > 0, "fixture should exercise attention");
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, &mut rng, "te", 3, 2).unwrap();
    let agdn = AgdnLayer::new(&mut store, &mut rng, "agdn", te.width(), 3, 1.0 / 3600.0);
    scramble(&mut rng, &mut store, 0.7);
    let wm = random_matrix(&mut rng, schedule.measurement_count(), 3, 1.0);
    let wt = random_matrix(&mut rng, schedule.tails.len(), 3, 1.0);
    let ids = all_ids(&store);
    grad_check(&mut store, &ids, |tape, store| {
        let out = agdn.forward(tape, store, &te, &schedule);
        let a = project(tape, out.per_measurement, &wm);
        let b = project(tape, out.tail, &wt);
        tape.add(a, b)
    })
}

/// Meta-filter network, with the input sequence itself treated as a parameter.
pub fn grad_meta_filters() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let ttcn = Ttcn::new(&mut store, &mut rng, "ttcn", 3, 4, 2);
    scramble(&mut rng, &mut store, 0.8);
    let z = store.add("z", random_matrix(&mut rng, 7, 3, 1.5));
    let offsets = vec![0, 3, 7];
    let weights = random_matrix(&mut rng, 2, 2, 1.0);
    let ids = all_ids(&store);
    grad_check(&mut store, &ids, |tape, store| {
        let zv = tape.param(store, z);
        let h = ttcn.forward(tape, store, zv, &offsets).unwrap();
        project(tape, h, &weights)
    })
}

fn sapn_fixture(rng: &mut ChaCha8Rng) -> (ParamStore, TimeEncoding, Sapn) {
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, rng, "te", 2, 2).unwrap();
    let sapn = Sapn::new(&mut store, rng, "sapn", te.width(), 3, 4, 2, 1.0 / 3600.0).unwrap();
    scramble(rng, &mut store, 0.7);
    (store, te, sapn)
}

pub fn grad_state_evolution() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut store, te, sapn) = sapn_fixture(&mut rng);
    let h = store.add("h", random_matrix(&mut rng, 2, 3, 1.0));
    let covered = random_matrix(&mut rng, 2, 1, 200.0).mapv(f64::abs);
    let weights = random_matrix(&mut rng, 2, 3, 1.0);
    let ids = vec![
        sapn.seu.w_input,
        sapn.seu.w_hidden,
        sapn.seu.b_input,
        sapn.seu.b_hidden,
        h,
        te.omega_personal,
        te.omega_generic,
        te.lambda,
    ];
    grad_check(&mut store, &ids, |tape, store| {
        let hv = tape.param(store, h);
        let c = tape.constant(covered.clone());
        let next = sapn.evolve_state(tape, store, &te, hv, c, &[0, 1]);
        project(tape, next, &weights)
    })
}

pub fn grad_predictor() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, te, sapn) = sapn_fixture(&mut rng);
    let state = store.add("state", random_matrix(&mut rng, 2, 3, 1.0));
    let seq = store.add("seq", random_matrix(&mut rng, 2, 3, 1.0));
    let elapsed = random_matrix(&mut rng, 2, 1, 500.0).mapv(f64::abs);
    let wp = random_matrix(&mut rng, 2, 2, 1.0);
    let wu = random_matrix(&mut rng, 2, 2, 1.0);
    let norm = norm();
    let mut ids = mlp_ids(&sapn.predictor);
    ids.extend([state, seq]);
    grad_check(&mut store, &ids, |tape, store| {
        let s = tape.param(store, state);
        let q = tape.param(store, seq);
        let e = tape.constant(elapsed.clone());
        let (p, u) = sapn.predict_step(tape, store, &te, s, q, e, &[0, 1], &norm, false);
        let a = project(tape, p, &wp);
        let b = project(tape, u, &wu);
        tape.add(a, b)
    })
}

/// Worst deviation of a derived filter channel's temporal sum from 1.
pub fn filter_sum_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d_in = rng.gen_range(1..=5);
        let maps = rng.gen_range(1..=4);
        let mut store = ParamStore::new();
        let ttcn = Ttcn::new(&mut store, &mut rng, "ttcn", d_in, 6, maps);
        scramble(&mut rng, &mut store, 2.0);
        let t = rng.gen_range(1..=30);
        let mut tape = Tape::new();
        let z = tape.constant(random_matrix(&mut rng, t, d_in, 3.0));
        let f = ttcn.derive_filters(&mut tape, &store, z, &[0, t]).unwrap();
        for col in tape.value(f).columns() {
            worst = worst.max((col.sum() - 1.0).abs());
        }
    }
    worst
}

/// Worst deviation of an attention distribution's sum from 1.
pub fn attention_sum_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=6);
        let graph = random_graph(&mut rng, n);
        let inst = random_instance(&mut rng, n, 15);
        let mut store = ParamStore::new();
        let te = TimeEncoding::new(&mut store, &mut rng, "te", n, 4).unwrap();
        let agdn = AgdnLayer::new(&mut store, &mut rng, "agdn", te.width(), 4, 1.0 / 3600.0);
        scramble(&mut rng, &mut store, 1.5);
        let schedule = replay(&inst, &graph, &norm()).unwrap();
        for c in schedule.ordered().filter(|c| !c.messages.is_empty()) {
            let a = agdn.attention_weights(&store, &te, c).unwrap();
            worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// Number of mixture scalars (out of `cases`) whose two weights do not add
/// up to exactly 1.
pub fn mixture_weight_misses(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|_| {
            let (p, g) = mixture_weights(rng.gen_range(-10.0..10.0));
            p + g != 1.0
        })
        .count()
}

fn perturb_masked_out(inst: &ForecastInstance, delta: i64) -> ForecastInstance {
    let mut out = inst.clone();
    for w in out.sensors.iter_mut() {
        for t in w.targets.iter_mut().filter(|t| !t.mask) {
            t.truth.length += delta;
            t.truth.flow += delta as f64;
            t.elapsed += delta;
        }
    }
    out
}

/// Largest change of any loss term or metric when every masked-out truth
/// value moves by +-1000, plus the number of masked-out slots touched.
pub fn mask_perturbation_change(cases: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut touched = 0;
    for case in 0..cases {
        let n = rng.gen_range(2..=5);
        let graph = random_graph(&mut rng, n);
        let inst = random_instance(&mut rng, n, 10);
        let inst = with_targets(&mut rng, inst, 15);
        touched += inst.sensors.iter().flat_map(|w| &w.targets).filter(|t| !t.mask).count();
        let cfg = ModelConfig {
            d_model: 4,
            d_phi: 4,
            hidden: 5,
            xi: 3,
            seed: case as u64,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, (0..n).map(|i| format!("s{i}")).collect(), norm()).unwrap();
        let forecasts = model.forecast(&inst, &graph, true).unwrap();
        let base_loss = window_loss(&model, &graph, &inst).unwrap();
        let base_metrics = evaluate_pairs(&EvalPair::from_forecasts(&inst, &forecasts));
        for delta in [1000, -1000] {
            let bumped = perturb_masked_out(&inst, delta);
            let loss = window_loss(&model, &graph, &bumped).unwrap();
            if let (Some(a), Some(b)) = (base_loss, loss) {
                for (x, y) in [(a.l_p, b.l_p), (a.l_delta, b.l_delta), (a.l_f, b.l_f)] {
                    worst = worst.max((x - y).abs());
                }
            }
            let m = evaluate_pairs(&EvalPair::from_forecasts(&bumped, &forecasts));
            for (x, y) in base_metrics.values().into_iter().zip(m.values()) {
                worst = worst.max(match (x, y) {
                    (Some(x), Some(y)) => (x - y).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                });
            }
        }
    }
    (worst, touched)
}

/// A step-size-one rollout against one predictor call per cycle, each
/// advancing the state by the cycle just emitted. Returns the worst
/// difference of any slot field; a differing slot count is infinite.
pub fn step_one_vs_cycle_by_cycle() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, &mut rng, "te", 2, 4).unwrap();
    let sapn = Sapn::new(&mut store, &mut rng, "sapn", te.width(), 4, 6, 1, 1.0 / 3600.0).unwrap();
    let norm = norm();
    let seq0 = random_matrix(&mut rng, 2, 4, 1.0);
    let rows = [0, 1];
    let cover = vec![900.0, 1500.0];
    let mut tape = Tape::new();
    let seq = tape.constant(seq0.clone());
    let mode = RolloutMode::Until {
        cover: cover.clone(),
        needed: vec![0, 0],
        max_steps: 500,
    };
    let out = sapn.rollout(&mut tape, &store, &te, seq, &rows, &norm, &mode).unwrap();
    let mut worst: f64 = 0.0;
    for (&row, &limit) in rows.iter().zip(&cover) {
        let mut t = Tape::new();
        let seq = t.constant(seq0.row(row).to_owned().insert_axis(ndarray::Axis(0)));
        let mut state = seq;
        let (mut covered, mut elapsed) = (1.0, 1.0);
        let mut manual = Vec::new();
        while manual.is_empty() || elapsed <= limit {
            let c = t.constant(Array2::from_elem((1, 1), covered));
            state = sapn.evolve_state(&mut t, &store, &te, state, c, &[row]);
            let e = t.constant(Array2::from_elem((1, 1), elapsed));
            let (p, u) = sapn.predict_step(&mut t, &store, &te, state, seq, e, &[row], &norm, true);
            let (p, u) = (t.value(p)[[0, 0]], t.value(u)[[0, 0]]);
            manual.push((elapsed, p, u));
            elapsed += p;
            covered = p;
        }
        let got = out.slots(&tape, row);
        if got.len() != manual.len() {
            return f64::INFINITY;
        }
        for (s, (e, p, u)) in got.iter().zip(&manual) {
            worst = worst.max((s.elapsed - e).abs()).max((s.length - p).abs()).max((s.unit_flow - u).abs());
        }
    }
    worst
}

/// Largest gap between the mixed and the generic encoding when every
/// mixture scalar is zero.
pub fn zero_lambda_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, &mut rng, "te", 3, 6).unwrap();
    scramble(&mut rng, &mut store, 0.05);
    store.get_mut(te.lambda).fill(0.0);
    let dts = [0.0, 1.0, 37.5, 600.0, 3600.0];
    let mut worst: f64 = 0.0;
    for s in 0..3 {
        for dt in dts {
            let m = te.encode_mixed(&store, s, dt).unwrap();
            let g = te.encode_generic(&store, dt);
            for (a, b) in m.iter().zip(&g) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let mut tape = Tape::new();
    let dt = tape.constant(Array2::from_shape_fn((dts.len(), 1), |(r, _)| dts[r]));
    let phi = te.encode(&mut tape, &store, dt, vec![1; dts.len()]);
    for (r, &dt) in dts.iter().enumerate() {
        for (c, v) in te.encode_generic(&store, dt).iter().enumerate() {
            worst = worst.max((tape.value(phi)[[r, c]] - v).abs());
        }
    }
    worst
}

/// Largest absolute entry of the spatial representation of an empty buffer.
pub fn empty_buffer_magnitude() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let te = TimeEncoding::new(&mut store, &mut rng, "te", 2, 4).unwrap();
    let agdn = AgdnLayer::new(&mut store, &mut rng, "agdn", te.width(), 5, 1.0 / 3600.0);
    // non-zero biases would leak through a naive feed-forward pass
    scramble(&mut rng, &mut store, 1.0);
    let conv = Convolution {
        sensor: 1,
        query_time: 100,
        query: [0.3, -0.2],
        is_tail: true,
        messages: vec![],
    };
    let a = agdn.aggregate(&store, &te, &conv, &[]).unwrap();
    let mut tape = Tape::new();
    let (h, _) = agdn.convolve(&mut tape, &store, &te, &[&conv]);
    a.iter().chain(tape.value(h).iter()).fold(0.0, |m: f64, v| m.max(v.abs()))
}
