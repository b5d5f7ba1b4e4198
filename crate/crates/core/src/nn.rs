//! Dense layers, gated recurrent cell and the adaptive-moment optimizer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};

/// Glorot-uniform initialization.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x W + b` with `x` given as rows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Feed-forward network; the activation follows every layer except the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists input width, hidden widths and output width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

/// Gated recurrent unit operating on row-stacked batches.
///
/// Gate layout inside the packed weights is `[reset | update | candidate]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let w_input = store.add(format!("{name}.w_input"), glorot(rng, input, 3 * hidden));
        let w_hidden = store.add(format!("{name}.w_hidden"), glorot(rng, hidden, 3 * hidden));
        let b_input = store.add(format!("{name}.b_input"), Array2::zeros((1, 3 * hidden)));
        let b_hidden = store.add(format!("{name}.b_hidden"), Array2::zeros((1, 3 * hidden)));
        Self {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            input,
            hidden,
        }
    }

    /// `h' = (1 - z) * n + z * h` with
    /// `r = sigma(x Wr + h Ur)`, `z = sigma(x Wz + h Uz)`,
    /// `n = tanh(x Wn + r * (h Un))` (biases omitted).
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let bi = tape.param(store, self.b_input);
        let bh = tape.param(store, self.b_hidden);
        let gx = tape.matmul(x, wi);
        let gx = tape.add_row(gx, bi);
        let gh = tape.matmul(h, wh);
        let gh = tape.add_row(gh, bh);

        let cols = |k: usize| (k * hd..(k + 1) * hd).collect::<Vec<_>>();
        let xr = tape.select_cols(gx, cols(0));
        let xz = tape.select_cols(gx, cols(1));
        let xn = tape.select_cols(gx, cols(2));
        let hr = tape.select_cols(gh, cols(0));
        let hz = tape.select_cols(gh, cols(1));
        let hn = tape.select_cols(gh, cols(2));

        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn);
        let n = tape.add(xn, rh);
        let n = tape.tanh(n);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }
}

/// Adaptive-moment optimizer with global gradient-norm clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Applies one update; returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Array2<f64>>) -> f64 {
        let norm = grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.clip_norm {
            if norm > max {
                let k = max / norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * k));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        norm
    }
}
