//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value. Parameters are
//! borrowed from a [`ParamStore`] instead of copied. [`Tape::backward`] walks
//! the nodes in reverse and returns one gradient matrix per parameter.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite seed gradient")]
    NonFiniteSeed,
    #[error("backward() needs a 1x1 node, got {0}x{1}")]
    NotScalar(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            values: store.values.iter().map(|m| Matrix::zeros(m.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.values {
            m.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|m| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.values.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Empty for parameters; their value lives in the store.
    value: Matrix,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).view(),
            _ => self.nodes[v.0].value.view(),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), Matrix::zeros((0, 0)), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulBt(a, b), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.value(a) + &self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), value, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).mapv(|v| v * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// Elementwise product with a constant matrix (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let value = &self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(Op::MulConst(a, mask), value, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(kernels::gelu);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), value, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (value, xhat, inv_std) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias));
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry (i, j > i) is forced to zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut value = self.value(a).to_owned();
        kernels::softmax_rows(&mut value, causal);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), value, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), rows);
        let rg = self.rg(table);
        self.push(Op::GatherRows(table, rows.to_vec()), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let v = self.value(loss);
        if v.dim() != (1, 1) {
            return Err(TapeError::NotScalar(v.nrows(), v.ncols()));
        }
        let l = v[[0, 0]];
        if !l.is_finite() {
            return Err(TapeError::NonFiniteLoss(l));
        }
        self.backward_with(vec![(loss, Matrix::ones((1, 1)))])
    }

    /// Backpropagates explicit upstream gradients `dL/d(node)`.
    pub fn backward_with(&self, seeds: Vec<(Var, Matrix)>) -> Result<Gradients, TapeError> {
        if seeds.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(TapeError::NonFiniteSeed);
        }
        let mut out = Gradients::zeros_like(self.params);
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(top + 1, || None);
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.values[id.0] += &g,
                &Op::MatMul(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.dot(&self.value(b).t()));
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, self.value(a).t().dot(&g));
                    }
                }
                &Op::MatMulBt(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.dot(&self.value(b)));
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, g.t().dot(&self.value(a)));
                    }
                }
                &Op::Add(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::AddRow(a, row) => {
                    if self.rg(row) {
                        accumulate(&mut grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::Scale(a, f) => accumulate(&mut grads, a, g.mapv(|v| v * f)),
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, g * mask),
                &Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&self.value(a))
                        .for_each(|d, &x| *d *= kernels::gelu_grad(x));
                    accumulate(&mut grads, a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &g * &self.value(*gain);
                        let d = dxhat.ncols() as f64;
                        let mut dx = Matrix::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let gr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let mean_g = gr.sum() / d;
                            let mean_gx = gr.dot(&xr) / d;
                            let is = inv_std[r];
                            Zip::from(dx.row_mut(r))
                                .and(&gr)
                                .and(&xr)
                                .for_each(|o, &gv, &xv| *o = is * (gv - mean_g - xv * mean_gx));
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                &Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = g;
                    for (mut dr, pr) in d.rows_mut().into_iter().zip(p.rows()) {
                        let dot = dr.dot(&pr);
                        Zip::from(&mut dr).and(&pr).for_each(|dv, &pv| *dv = pv * (*dv - dot));
                    }
                    accumulate(&mut grads, a, d);
                }
                &Op::SliceCols(a, start) => {
                    let shape = self.value(a).raw_dim();
                    let mut d = Matrix::zeros(shape);
                    d.slice_mut(s![.., start..start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::GatherRows(table, rows) => {
                    let shape = self.value(*table).raw_dim();
                    let mut d = Matrix::zeros(shape);
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, d);
                }
                &Op::Sum(a) => {
                    let shape = self.value(a).raw_dim();
                    accumulate(&mut grads, a, Matrix::from_elem(shape, g[[0, 0]]));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Numeric kernels shared by the tape and the tape-free inference path.
pub mod kernels {
    use super::Matrix;
    use ndarray::{ArrayView2, Zip};

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// Tanh approximation of GELU.
    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    }

    /// Returns (output, normalized input, 1/std per row).
    pub fn layer_norm(x: ArrayView2<f64>, gain: ArrayView2<f64>, bias: ArrayView2<f64>) -> (Matrix, Matrix, Vec<f64>) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + super::LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            Zip::from(&mut row)
                .and(gain.row(0))
                .and(bias.row(0))
                .for_each(|v, &g, &b| *v = *v * g + b);
        }
        (y, xhat, inv_std)
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    pub fn softmax_rows(m: &mut Matrix, causal: bool) {
        let cols = m.ncols();
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            let visible = if causal { (i + 1).min(cols) } else { cols };
            softmax_in_place(&mut row[..visible]);
            row[visible..].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a scalar function of one parameter entry.
    fn fd<F: Fn(&ParamStore) -> f64>(store: &ParamStore, id: ParamId, r: usize, c: usize, f: F) -> f64 {
        let h = 1e-5;
        let mut p = store.clone();
        p.get_mut(id)[[r, c]] += h;
        let up = f(&p);
        p.get_mut(id)[[r, c]] -= 2.0 * h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, -2.0], [3.0, 0.5]]);
        let b = store.add("b", array![[4.0, 5.0, 6.0]]);
        let mut t = Tape::new(&store);
        let (va, vb) = (t.param(a), t.param(b));
        let (sa, sb) = (t.sum(va), t.sum(vb));
        let loss = t.add(sa, sb);
        let g = t.backward(loss).unwrap();
        assert!(g.get(a).iter().all(|&v| v == 1.0));
        assert!(g.get(b).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[f64::NAN]]);
        let mut t = Tape::new(&store);
        let v = t.param(a);
        let s = t.sum(v);
        assert!(matches!(t.backward(s), Err(TapeError::NonFiniteLoss(_))));
        let v2 = t.input(Matrix::ones((2, 2)));
        assert!(matches!(t.backward(v2), Err(TapeError::NotScalar(2, 2))));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[0.3, -1.2, 0.7, 0.1], [1.5, 0.2, -0.4, 0.9], [-0.6, 0.8, 0.05, -1.1]]);
        let w = store.add("w", array![[0.2, -0.5], [0.7, 0.1], [-0.3, 0.4], [0.6, -0.8]]);
        let k = store.add("k", array![[0.1, 0.3, -0.2, 0.5], [-0.4, 0.2, 0.6, -0.1]]);
        let g = store.add("g", array![[1.1, 0.9, 1.2, 0.8]]);
        let b = store.add("b", array![[0.1, -0.1, 0.2, 0.0]]);
        let e = store.add("e", array![[0.5, -0.5], [0.25, 0.75], [-1.0, 0.3]]);
        let mask = array![[1.0, 0.0], [2.0, 1.0], [0.0, 1.5]];

        let f = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let (vx, vw, vk, vg, vb, ve) = (t.param(x), t.param(w), t.param(k), t.param(g), t.param(b), t.param(e));
            let ln = t.layer_norm(vx, vg, vb);
            let h = t.matmul(ln, vw);
            let h = t.gelu(h);
            let emb = t.gather_rows(ve, &[2, 0, 2]);
            let h = t.add(h, emb);
            let scores = t.matmul_bt(h, h);
            let sc = t.scale(scores, 0.7);
            let att = t.softmax(sc, true);
            let mixed = t.matmul(att, h);
            let left = t.slice_cols(mixed, 0, 1);
            let right = t.slice_cols(mixed, 1, 1);
            let cat = t.concat_cols(&[right, left]);
            let masked = t.mul_const(cat, mask.clone());
            let back = t.matmul(masked, vk);
            let rowb = t.add_row(back, vb);
            let sm = t.softmax(rowb, false);
            let logits = t.matmul(sm, vw);
            let sq = t.mul_const(logits, array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]);
            let loss = t.sum(sq);
            (t.value(loss)[[0, 0]], t.backward(loss).unwrap())
        };
        let (_, grads) = f(&store);
        for id in store.ids() {
            let m = store.get(id);
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    let num = fd(&store, id, r, c, |s| f(s).0);
                    let ana = grads.get(id)[[r, c]];
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    assert!(err < 1e-6, "{} [{r},{c}]: analytic {ana} numeric {num}", store.name(id));
                }
            }
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut m = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        kernels::softmax_rows(&mut m, true);
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[0, 1]], 0.0);
        assert_eq!(m[[1, 2]], 0.0);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }
}
