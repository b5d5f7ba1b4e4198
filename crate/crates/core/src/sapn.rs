//! Semi-autoregressive prediction.
//!
//! Each step emits `xi` future cycles at once. A recurrent state evolution
//! unit advances the hidden state by the time covered in the previous step,
//! and the predictor maps `[state, sequence representation, elapsed-time
//! encoding]` to `xi` (cycle length, unit-time flow) pairs. The elapsed time
//! of the first slot of the next step is the previous one plus the sum of the
//! lengths just predicted.
//!
//! All available sensors are rolled out in lockstep as rows of one batch.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Activation, Gru, Mlp};
use crate::time_encoding::TimeEncoding;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sapn {
    pub seu: Gru,
    pub predictor: Mlp,
    pub xi: usize,
    pub time_scale: f64,
}

/// How long to roll out.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutMode {
    /// Exactly `steps` steps, no clamping; used for training losses.
    Fixed { steps: usize },
    /// Stop each row once its next elapsed time exceeds `cover[r]` and at
    /// least `needed[r]` slots were emitted, or after `max_steps`.
    /// Lengths are clamped to `>= 1` and unit flows to `>= 0`.
    Until {
        cover: Vec<f64>,
        needed: Vec<usize>,
        max_steps: usize,
    },
}

/// Rollout outputs as tape variables, `rows x (steps * xi)` each.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub lengths: Var,
    pub unit_flows: Var,
    /// Elapsed time from the last observed measurement to each slot begin.
    pub elapsed: Var,
    pub steps: usize,
    /// Slots that belong to each row (a multiple of `xi`).
    pub emitted: Vec<usize>,
    /// Rows that hit the step budget before covering their horizon.
    pub truncated: Vec<bool>,
}

/// One predicted cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedSlot {
    pub elapsed: f64,
    pub length: f64,
    pub unit_flow: f64,
}

impl PredictedSlot {
    pub fn flow(&self) -> f64 {
        self.unit_flow * self.length
    }
}

/// Elapsed time of the first slot of the next step.
pub fn update_elapsed(elapsed: f64, lengths: &[f64]) -> f64 {
    elapsed + lengths.iter().sum::<f64>()
}

/// Step budget for an inference rollout over `horizon` seconds.
pub fn max_steps(horizon: i64, xi: usize) -> usize {
    let slots = (horizon.max(0) as f64 / 20.0).ceil() as usize;
    slots.div_ceil(xi.max(1)) + 2
}

impl Sapn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        te_width: usize,
        state: usize,
        hidden: usize,
        xi: usize,
        time_scale: f64,
    ) -> Result<Self> {
        if xi == 0 {
            return Err(Error::Config("step size xi must be >= 1".into()));
        }
        let seu = Gru::new(store, rng, &format!("{name}.seu"), te_width, state);
        let predictor = Mlp::new(
            store,
            rng,
            &format!("{name}.predictor"),
            &[2 * state + te_width, hidden, hidden, 2 * xi],
            Activation::Relu,
        );
        Ok(Self {
            seu,
            predictor,
            xi,
            time_scale,
        })
    }

    /// Advances the state by the time covered in the previous step.
    pub fn evolve_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        te: &TimeEncoding,
        h: Var,
        covered: Var,
        rows: &[usize],
    ) -> Var {
        let x = te.encode_scaled(tape, store, covered, rows.to_vec(), self.time_scale);
        self.seu.step(tape, store, x, h)
    }

    /// Predicts `xi` slots per row. Returns `(lengths, unit_flows)`, each
    /// `rows x xi`, in physical units.
    pub fn predict_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        te: &TimeEncoding,
        state: Var,
        seq: Var,
        elapsed: Var,
        rows: &[usize],
        norm: &NormStats,
        clamp: bool,
    ) -> (Var, Var) {
        let phi = te.encode_scaled(tape, store, elapsed, rows.to_vec(), self.time_scale);
        let input = tape.concat_cols(&[state, seq, phi]);
        let out = self.predictor.forward(tape, store, input);
        let p = tape.select_cols(out, (0..self.xi).map(|k| 2 * k).collect());
        let u = tape.select_cols(out, (0..self.xi).map(|k| 2 * k + 1).collect());
        let p = tape.scale(p, norm.p_std);
        let p = tape.add_scalar(p, norm.p_mean);
        let u = tape.scale(u, norm.u_std);
        let u = tape.add_scalar(u, norm.u_mean);
        if clamp {
            (tape.clamp_min(p, 1.0), tape.clamp_min(u, 0.0))
        } else {
            (p, u)
        }
    }

    /// Rolls out from the sequence representations `seq` (`rows x D`).
    pub fn rollout(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        te: &TimeEncoding,
        seq: Var,
        rows: &[usize],
        norm: &NormStats,
        mode: &RolloutMode,
    ) -> Result<Rollout> {
        let n = rows.len();
        if tape.value(seq).nrows() != n {
            return Err(Error::Shape(format!("{} sequence rows for {} sensors", tape.value(seq).nrows(), n)));
        }
        let (limit, clamp) = match mode {
            RolloutMode::Fixed { steps } => (*steps, false),
            RolloutMode::Until {
                cover,
                needed,
                max_steps,
            } => {
                if cover.len() != n || needed.len() != n {
                    return Err(Error::Shape("rollout targets do not match rows".into()));
                }
                (*max_steps, true)
            }
        };
        let limit = limit.max(1);
        let xi = self.xi;
        // exclusive prefix sum over the xi slots of one step
        let prefix = tape.constant(Array2::from_shape_fn((xi, xi), |(j, k)| if j < k { 1.0 } else { 0.0 }));
        let ones = tape.constant(Array2::ones((xi, 1)));

        let mut state = seq;
        let mut covered = tape.constant(Array2::ones((n, 1)));
        let mut elapsed = tape.constant(Array2::ones((n, 1)));
        let mut done = vec![false; n];
        let mut emitted = vec![0usize; n];
        let (mut ps, mut us, mut ds) = (Vec::new(), Vec::new(), Vec::new());
        let mut steps = 0;
        while steps < limit {
            state = self.evolve_state(tape, store, te, state, covered, rows);
            let (p, u) = self.predict_step(tape, store, te, state, seq, elapsed, rows, norm, clamp);
            let offs = tape.matmul(p, prefix);
            let d = tape.add_col(offs, elapsed);
            let sum = tape.matmul(p, ones);
            ps.push(p);
            us.push(u);
            ds.push(d);
            elapsed = tape.add(elapsed, sum);
            covered = sum;
            steps += 1;
            for r in 0..n {
                if !done[r] {
                    emitted[r] += xi;
                }
            }
            if let RolloutMode::Until { cover, needed, .. } = mode {
                let next = tape.value(elapsed);
                for r in 0..n {
                    if !done[r] && next[[r, 0]] > cover[r] && emitted[r] >= needed[r] {
                        done[r] = true;
                    }
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
        }
        let truncated = match mode {
            RolloutMode::Fixed { .. } => vec![false; n],
            RolloutMode::Until { .. } => done.iter().map(|d| !d).collect(),
        };
        Ok(Rollout {
            lengths: tape.concat_cols(&ps),
            unit_flows: tape.concat_cols(&us),
            elapsed: tape.concat_cols(&ds),
            steps,
            emitted,
            truncated,
        })
    }
}

impl Rollout {
    /// Predicted slots of row `r`, limited to what that row emitted.
    pub fn slots(&self, tape: &Tape, r: usize) -> Vec<PredictedSlot> {
        let p = tape.value(self.lengths);
        let u = tape.value(self.unit_flows);
        let d = tape.value(self.elapsed);
        (0..self.emitted[r])
            .map(|k| PredictedSlot {
                elapsed: d[[r, k]],
                length: p[[r, k]],
                unit_flow: u[[r, k]],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        te: TimeEncoding,
        sapn: Sapn,
    }

    fn fixture(xi: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let te = TimeEncoding::new(&mut store, &mut rng, "te", 3, 4).unwrap();
        let sapn = Sapn::new(&mut store, &mut rng, "sapn", te.width(), 6, 8, xi, 1.0 / 3600.0).unwrap();
        Fixture { store, te, sapn }
    }

    /// Forces every predicted length to `p` and unit flow to `u` by zeroing
    /// the last predictor layer and setting its bias.
    fn force_outputs(fx: &mut Fixture, p: f64, u: f64, norm: &NormStats) {
        let last = *fx.sapn.predictor.layers.last().unwrap();
        fx.store.get_mut(last.weight).fill(0.0);
        let b = fx.store.get_mut(last.bias);
        for k in 0..fx.sapn.xi {
            b[[0, 2 * k]] = (p - norm.p_mean) / norm.p_std;
            b[[0, 2 * k + 1]] = (u - norm.u_mean) / norm.u_std;
        }
    }

    fn run(fx: &Fixture, rows: &[usize], mode: &RolloutMode, norm: &NormStats) -> (Tape, Rollout) {
        let mut tape = Tape::new();
        let seq = tape.constant(Array2::from_elem((rows.len(), 6), 0.1));
        let out = fx.sapn.rollout(&mut tape, &fx.store, &fx.te, seq, rows, norm, mode).unwrap();
        (tape, out)
    }

    #[test]
    fn elapsed_update() {
        assert_eq!(update_elapsed(1.0, &[60.0; 3]), 181.0);
        assert_eq!(update_elapsed(181.0, &[55.0, 65.0]), 301.0);
    }

    #[test]
    fn first_elapsed_is_one_and_slots_accumulate() {
        let norm = NormStats::default();
        let mut fx = fixture(3);
        force_outputs(&mut fx, 60.0, 0.2, &norm);
        let (tape, out) = run(&fx, &[0], &RolloutMode::Fixed { steps: 2 }, &norm);
        let d: Vec<f64> = out.slots(&tape, 0).iter().map(|s| s.elapsed).collect();
        let want = [1.0, 61.0, 121.0, 181.0, 241.0, 301.0];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{d:?}");
        }
    }

    #[test]
    fn stops_once_horizon_is_covered() {
        let norm = NormStats {
            p_mean: 60.0,
            p_std: 20.0,
            ..NormStats::default()
        };
        let mut fx = fixture(12);
        force_outputs(&mut fx, 60.0, 0.2, &norm);
        let mode = RolloutMode::Until {
            cover: vec![3600.0],
            needed: vec![0],
            max_steps: max_steps(3600, 12),
        };
        let (_, out) = run(&fx, &[0], &mode, &norm);
        assert_eq!(out.steps, 5);
        assert_eq!(out.emitted, vec![60]);
        assert_eq!(out.truncated, vec![false]);
    }

    #[test]
    fn zero_horizon_still_takes_one_step() {
        let norm = NormStats::default();
        let fx = fixture(4);
        let mode = RolloutMode::Until {
            cover: vec![0.0, 0.0],
            needed: vec![0, 0],
            max_steps: max_steps(0, 4),
        };
        let (_, out) = run(&fx, &[0, 1], &mode, &norm);
        assert_eq!(out.steps, 1);
        assert_eq!(out.emitted, vec![4, 4]);
    }

    #[test]
    fn inference_clamps_outputs() {
        let norm = NormStats::default();
        let mut fx = fixture(2);
        force_outputs(&mut fx, -5.0, -1.0, &norm);
        let mode = RolloutMode::Until {
            cover: vec![3.0],
            needed: vec![0],
            max_steps: 10,
        };
        let (tape, out) = run(&fx, &[2], &mode, &norm);
        for s in out.slots(&tape, 0) {
            assert_eq!(s.length, 1.0);
            assert_eq!(s.unit_flow, 0.0);
        }
        // elapsed 1 -> 3 -> 5 > 3 after two steps
        assert_eq!(out.steps, 2);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let norm = NormStats::default();
        let mut fx = fixture(1);
        force_outputs(&mut fx, 1.0, 0.0, &norm);
        let mode = RolloutMode::Until {
            cover: vec![3600.0],
            needed: vec![0],
            max_steps: max_steps(3600, 1),
        };
        let (_, out) = run(&fx, &[0], &mode, &norm);
        assert_eq!(out.steps, 182);
        assert_eq!(out.truncated, vec![true]);
    }

    #[test]
    fn rows_stop_independently() {
        let norm = NormStats::default();
        let mut fx = fixture(2);
        force_outputs(&mut fx, 50.0, 0.1, &norm);
        let mode = RolloutMode::Until {
            cover: vec![90.0, 400.0],
            needed: vec![0, 0],
            max_steps: 20,
        };
        let (_, out) = run(&fx, &[0, 1], &mode, &norm);
        // row 0: 1 -> 101 > 90 after one step; row 1: 1 -> 101 -> 201 -> 301 -> 401
        assert_eq!(out.emitted, vec![2, 8]);
        assert_eq!(out.steps, 4);
    }

    #[test]
    fn needed_slots_extend_the_rollout() {
        let norm = NormStats::default();
        let mut fx = fixture(3);
        force_outputs(&mut fx, 100.0, 0.1, &norm);
        let mode = RolloutMode::Until {
            cover: vec![10.0],
            needed: vec![7],
            max_steps: 20,
        };
        let (_, out) = run(&fx, &[0], &mode, &norm);
        assert_eq!(out.emitted, vec![9]);
    }

    #[test]
    fn budget_formula() {
        assert_eq!(max_steps(3600, 12), 17);
        assert_eq!(max_steps(3600, 1), 182);
        assert_eq!(max_steps(0, 12), 2);
    }
}
