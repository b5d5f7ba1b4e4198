//! Per-sensor learnable trigonometric time encoding mixed with a shared one.
//!
//! For an interval `dt` the encoding has `d_phi + 1` entries: `dt` itself
//! followed by `sin(w_k dt), cos(w_k dt)` pairs. Each sensor owns a set of
//! frequencies; a generic set is shared. A per-sensor scalar `lambda`
//! blends them with weights `1 - exp(-lambda^2)` (personalized) and
//! `exp(-lambda^2)` (generic).

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{EncodeMode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub d_phi: usize,
    pub sensors: usize,
    pub omega_personal: ParamId,
    pub omega_generic: ParamId,
    pub lambda: ParamId,
    /// Generic-only encoding (personalized part disabled).
    pub generic_only: bool,
}

/// Frequency ladder `1 / 10000^(2k / d_phi) / 60`.
pub fn frequency_ladder(d_phi: usize) -> Vec<f64> {
    (0..d_phi / 2)
        .map(|k| 1.0 / 10000f64.powf(2.0 * k as f64 / d_phi as f64) / 60.0)
        .collect()
}

/// `(personalized, generic)` mixture weights for a given `lambda`.
pub fn mixture_weights(lambda: f64) -> (f64, f64) {
    let g = (-lambda * lambda).exp();
    (1.0 - g, g)
}

impl TimeEncoding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        sensors: usize,
        d_phi: usize,
    ) -> Result<Self> {
        if d_phi == 0 || d_phi % 2 != 0 {
            return Err(Error::Config(format!("d_phi must be a positive even number, got {d_phi}")));
        }
        let ladder = frequency_ladder(d_phi);
        let k = ladder.len();
        let omega_personal = store.add(
            format!("{name}.omega_personal"),
            Array2::from_shape_fn((sensors, k), |(_, j)| ladder[j]),
        );
        let omega_generic = store.add(
            format!("{name}.omega_generic"),
            Array2::from_shape_fn((1, k), |(_, j)| ladder[j]),
        );
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let lambda = store.add(
            format!("{name}.lambda"),
            Array2::from_shape_fn((sensors, 1), |_| normal.sample(rng)),
        );
        Ok(Self {
            d_phi,
            sensors,
            omega_personal,
            omega_generic,
            lambda,
            generic_only: false,
        })
    }

    pub fn width(&self) -> usize {
        self.d_phi + 1
    }

    /// Switches to generic-only encoding and freezes the personalized parameters.
    pub fn disable_personalized(&mut self, store: &mut ParamStore) {
        self.generic_only = true;
        store.get_mut(self.lambda).fill(0.0);
        store.set_frozen(self.lambda, true);
        store.set_frozen(self.omega_personal, true);
    }

    /// Encodes a column of intervals; `rows[r]` is the sensor of row `r`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, dt: Var, rows: Vec<usize>) -> Var {
        let wp = tape.param(store, self.omega_personal);
        let wg = tape.param(store, self.omega_generic);
        let lam = tape.param(store, self.lambda);
        let mode = if self.generic_only {
            EncodeMode::GenericOnly
        } else {
            EncodeMode::Mixed
        };
        tape.time_encode(dt, wp, wg, lam, rows, mode)
    }

    /// [`TimeEncoding::encode`] with the raw-interval entry multiplied by `time_scale`.
    pub fn encode_scaled(&self, tape: &mut Tape, store: &ParamStore, dt: Var, rows: Vec<usize>, time_scale: f64) -> Var {
        let n = rows.len();
        let phi = self.encode(tape, store, dt, rows);
        let mut scale = Array2::ones((n, self.width()));
        scale.column_mut(0).fill(time_scale);
        tape.mul_const(phi, scale)
    }

    fn check(&self, sensor: usize) -> Result<()> {
        if sensor >= self.sensors {
            return Err(Error::UnknownSensor(format!("#{sensor}")));
        }
        Ok(())
    }

    fn trig(freqs: impl Iterator<Item = f64>, dt: f64, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        out.push(dt);
        for w in freqs {
            let (s, c) = (w * dt).sin_cos();
            out.push(s);
            out.push(c);
        }
        out
    }

    pub fn encode_personalized(&self, store: &ParamStore, sensor: usize, dt: f64) -> Result<Vec<f64>> {
        self.check(sensor)?;
        let w = store.get(self.omega_personal);
        Ok(Self::trig(w.row(sensor).iter().copied(), dt, self.width()))
    }

    pub fn encode_generic(&self, store: &ParamStore, dt: f64) -> Vec<f64> {
        let w = store.get(self.omega_generic);
        Self::trig(w.row(0).iter().copied(), dt, self.width())
    }

    /// The blended encoding consumed by the rest of the model.
    pub fn encode_mixed(&self, store: &ParamStore, sensor: usize, dt: f64) -> Result<Vec<f64>> {
        let generic = self.encode_generic(store, dt);
        if self.generic_only {
            self.check(sensor)?;
            return Ok(generic);
        }
        let personal = self.encode_personalized(store, sensor, dt)?;
        let (pw, gw) = mixture_weights(store.get(self.lambda)[[sensor, 0]]);
        let mut out: Vec<f64> = personal.iter().zip(&generic).map(|(p, g)| pw * p + gw * g).collect();
        out[0] = dt;
        Ok(out)
    }
}
