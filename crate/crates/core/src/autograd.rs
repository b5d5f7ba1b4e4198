//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array; vectors are `1 x n` rows or
//! `n x 1` columns. Operations are recorded eagerly and differentiated in
//! reverse insertion order by [`Tape::backward`]. Parameters live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`], which memoizes
//! the leaf so one parameter maps to exactly one node per tape.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Frozen parameters never receive optimizer updates.
    #[serde(default)]
    pub frozen: bool,
}

/// Flat collection of trainable parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Which encodings a [`Tape::time_encode`] node mixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Learned per-row convex mix of personalized and generic encodings.
    Mixed,
    /// Shared generic encoding only; the mixture scalar gets no gradient.
    GenericOnly,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SliceRows(Var, usize),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    FilterContract {
        filters: Var,
        inputs: Var,
        offsets: Vec<usize>,
        maps: usize,
    },
    TimeEncode {
        dt: Var,
        omega_p: Var,
        omega_g: Var,
        lambda: Var,
        rows: Vec<usize>,
        mode: EncodeMode,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Dense per-parameter gradients (zeros where a parameter was unused).
    pub fn into_dense(self, store: &ParamStore) -> Vec<Array2<f64>> {
        self.params
            .into_iter()
            .chain(std::iter::repeat(None))
            .zip(store.params.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.value.raw_dim())))
            .collect()
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient is propagated into it).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store (used by gradient checks).
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (n x m) + col (n x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) + self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::AddCol(a, col), ng)
    }

    /// `a (n x m) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let ng = self.ng(a);
        self.push(value, Op::OneMinus(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Elementwise `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        let ng = self.ng(a);
        self.push(value, Op::ClampMin(a, floor), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(1), &cols);
        let ng = self.ng(a);
        self.push(value, Op::SelectCols(a, cols), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Column-wise normalized exponential within each row segment.
    ///
    /// `offsets` has one more entry than there are segments; segment `s`
    /// spans rows `offsets[s]..offsets[s + 1]`. Empty segments are allowed.
    pub fn segment_softmax(&mut self, a: Var, offsets: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut y = Array2::zeros(x.raw_dim());
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let seg = x.slice(s![lo..hi, ..]);
            let max = seg.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v));
            let mut out = y.slice_mut(s![lo..hi, ..]);
            out.assign(&seg);
            out -= &max;
            out.mapv_inplace(f64::exp);
            let sum = out.sum_axis(Axis(0));
            out /= &sum;
        }
        let ng = self.ng(a);
        self.push(y, Op::SegmentSoftmax(a, offsets), ng)
    }

    /// Sum of rows within each segment, one output row per segment.
    pub fn segment_sum(&mut self, a: Var, offsets: Vec<usize>) -> Var {
        let x = self.value(a);
        let segs = offsets.len() - 1;
        let mut y = Array2::zeros((segs, x.ncols()));
        for (s, w) in offsets.windows(2).enumerate() {
            for r in w[0]..w[1] {
                let mut out = y.row_mut(s);
                out += &x.row(r);
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::SegmentSum(a, offsets), ng)
    }

    /// Full-length time-aware convolution.
    ///
    /// `filters` is `rows x (maps * width)`, `inputs` is `rows x width`.
    /// Output row `s`, column `d` is `sum over rows r of segment s, sum over
    /// channels c of filters[r, d * width + c] * inputs[r, c]`.
    pub fn filter_contract(
        &mut self,
        filters: Var,
        inputs: Var,
        offsets: Vec<usize>,
        maps: usize,
    ) -> Var {
        let f = self.value(filters);
        let z = self.value(inputs);
        let width = z.ncols();
        assert_eq!(f.ncols(), maps * width, "filter width mismatch");
        assert_eq!(f.nrows(), z.nrows(), "filter length mismatch");
        let segs = offsets.len() - 1;
        let mut y = Array2::zeros((segs, maps));
        let f = f.as_standard_layout();
        let z = z.as_standard_layout();
        let fs = f.as_slice().expect("standard layout");
        let zs = z.as_slice().expect("standard layout");
        for (s, w) in offsets.windows(2).enumerate() {
            let mut out = y.row_mut(s);
            for r in w[0]..w[1] {
                let zr = &zs[r * width..(r + 1) * width];
                let fr = &fs[r * maps * width..(r + 1) * maps * width];
                for (o, chunk) in out.iter_mut().zip(fr.chunks_exact(width)) {
                    *o += chunk.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let ng = self.ng(filters) || self.ng(inputs);
        self.push(
            y,
            Op::FilterContract {
                filters,
                inputs,
                offsets,
                maps,
            },
            ng,
        )
    }

    /// Learnable trigonometric time encoding.
    ///
    /// `dt` is `n x 1`, `omega_p` is `sensors x k`, `omega_g` is `1 x k`,
    /// `lambda` is `sensors x 1` and `rows[r]` selects the sensor for row
    /// `r`. The output is `n x (2k + 1)`: column 0 holds the raw interval,
    /// columns `2j + 1` / `2j + 2` hold the mixed sine / cosine terms.
    pub fn time_encode(
        &mut self,
        dt: Var,
        omega_p: Var,
        omega_g: Var,
        lambda: Var,
        rows: Vec<usize>,
        mode: EncodeMode,
    ) -> Var {
        let t = self.value(dt);
        let wp = self.value(omega_p);
        let wg = self.value(omega_g);
        let lam = self.value(lambda);
        let k = wg.ncols();
        assert_eq!(t.ncols(), 1);
        assert_eq!(t.nrows(), rows.len());
        assert_eq!(wp.ncols(), k);
        let mut y = Array2::zeros((rows.len(), 2 * k + 1));
        for (r, &s) in rows.iter().enumerate() {
            let dt = t[[r, 0]];
            let gw = match mode {
                EncodeMode::Mixed => (-lam[[s, 0]] * lam[[s, 0]]).exp(),
                EncodeMode::GenericOnly => 1.0,
            };
            let pw = 1.0 - gw;
            y[[r, 0]] = dt;
            for j in 0..k {
                let (sp, cp) = (wp[[s, j]] * dt).sin_cos();
                let (sg, cg) = (wg[[0, j]] * dt).sin_cos();
                y[[r, 2 * j + 1]] = pw * sp + gw * sg;
                y[[r, 2 * j + 2]] = pw * cp + gw * cg;
            }
        }
        let ng = self.ng(dt) || self.ng(omega_p) || self.ng(omega_g) || self.ng(lambda);
        self.push(
            y,
            Op::TimeEncode {
                dt,
                omega_p,
                omega_g,
                lambda,
                rows,
                mode,
            },
            ng,
        )
    }

    /// Reverse-mode sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let ng = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if ng(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if ng(b) {
                        acc(&mut grads, *b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if ng(row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::AddCol(a, col) => {
                    if ng(col) {
                        acc(&mut grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::MulCol(a, col) => {
                    if ng(col) {
                        let prod = &g * self.value(*a);
                        acc(&mut grads, *col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::OneMinus(a) => acc(&mut grads, *a, -&g),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| *gv *= sign(x));
                    acc(&mut grads, *a, d);
                }
                Op::ClampMin(a, floor) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= *floor {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).raw_dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if ng(p) {
                            acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::SelectCols(a, cols) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut dc = d.column_mut(c);
                        dc += &g.column(j);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    let len = g.nrows();
                    d.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SegmentSoftmax(a, offsets) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.raw_dim());
                    for w in offsets.windows(2) {
                        if w[0] == w[1] {
                            continue;
                        }
                        let ys = y.slice(s![w[0]..w[1], ..]);
                        let gs = g.slice(s![w[0]..w[1], ..]);
                        let dot = (&gs * &ys).sum_axis(Axis(0));
                        let mut out = d.slice_mut(s![w[0]..w[1], ..]);
                        out.assign(&gs);
                        out -= &dot;
                        out *= &ys;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentSum(a, offsets) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (s, w) in offsets.windows(2).enumerate() {
                        for r in w[0]..w[1] {
                            d.row_mut(r).assign(&g.row(s));
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::FilterContract {
                    filters,
                    inputs,
                    offsets,
                    maps,
                } => {
                    let f = self.value(*filters).as_standard_layout();
                    let z = self.value(*inputs).as_standard_layout();
                    let width = z.ncols();
                    let mw = *maps * width;
                    let mut df = Array2::zeros(f.raw_dim());
                    let mut dz = Array2::zeros(z.raw_dim());
                    let fs = f.as_slice().expect("standard layout");
                    let zs = z.as_slice().expect("standard layout");
                    {
                        let dfs = df.as_slice_mut().expect("standard layout");
                        let dzs = dz.as_slice_mut().expect("standard layout");
                        for (s, w) in offsets.windows(2).enumerate() {
                            let gs = g.row(s);
                            for r in w[0]..w[1] {
                                let zr = &zs[r * width..(r + 1) * width];
                                let fr = &fs[r * mw..(r + 1) * mw];
                                let dfr = &mut dfs[r * mw..(r + 1) * mw];
                                let dzr = &mut dzs[r * width..(r + 1) * width];
                                for ((&gv, fchunk), dfchunk) in
                                    gs.iter().zip(fr.chunks_exact(width)).zip(dfr.chunks_exact_mut(width))
                                {
                                    for c in 0..width {
                                        dfchunk[c] = gv * zr[c];
                                        dzr[c] += gv * fchunk[c];
                                    }
                                }
                            }
                        }
                    }
                    if ng(filters) {
                        acc(&mut grads, *filters, df);
                    }
                    if ng(inputs) {
                        acc(&mut grads, *inputs, dz);
                    }
                }
                Op::TimeEncode {
                    dt,
                    omega_p,
                    omega_g,
                    lambda,
                    rows,
                    mode,
                } => {
                    let t = self.value(*dt);
                    let wp = self.value(*omega_p);
                    let wg = self.value(*omega_g);
                    let lam = self.value(*lambda);
                    let k = wg.ncols();
                    let mut d_dt = Array2::zeros(t.raw_dim());
                    let mut d_wp = Array2::zeros(wp.raw_dim());
                    let mut d_wg = Array2::zeros(wg.raw_dim());
                    let mut d_lam = Array2::zeros(lam.raw_dim());
                    for (r, &sidx) in rows.iter().enumerate() {
                        let tv = t[[r, 0]];
                        let l = lam[[sidx, 0]];
                        let gw = match mode {
                            EncodeMode::Mixed => (-l * l).exp(),
                            EncodeMode::GenericOnly => 1.0,
                        };
                        let pw = 1.0 - gw;
                        let mut ddt = g[[r, 0]];
                        let mut dgw = 0.0;
                        for j in 0..k {
                            let (gs, gc) = (g[[r, 2 * j + 1]], g[[r, 2 * j + 2]]);
                            let op = wp[[sidx, j]];
                            let og = wg[[0, j]];
                            let (sp, cp) = (op * tv).sin_cos();
                            let (sg, cg) = (og * tv).sin_cos();
                            ddt += gs * (pw * op * cp + gw * og * cg) - gc * (pw * op * sp + gw * og * sg);
                            d_wp[[sidx, j]] += pw * tv * (gs * cp - gc * sp);
                            d_wg[[0, j]] += gw * tv * (gs * cg - gc * sg);
                            dgw += gs * (sg - sp) + gc * (cg - cp);
                        }
                        d_dt[[r, 0]] = ddt;
                        if *mode == EncodeMode::Mixed {
                            d_lam[[sidx, 0]] += dgw * (-2.0 * l * gw);
                        }
                    }
                    if ng(dt) {
                        acc(&mut grads, *dt, d_dt);
                    }
                    if ng(omega_p) {
                        acc(&mut grads, *omega_p, d_wp);
                    }
                    if ng(omega_g) {
                        acc(&mut grads, *omega_g, d_wg);
                    }
                    if ng(lambda) {
                        acc(&mut grads, *lambda, d_lam);
                    }
                }
            }
        }
        let mut params = Vec::new();
        for (pid, var) in &self.param_vars {
            if params.len() <= pid.0 {
                params.resize(pid.0 + 1, None);
            }
            params[pid.0] = grads[var.0].clone();
        }
        Gradients {
            params,
            nodes: grads,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
