//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] then walks the nodes in reverse creation order and
//! accumulates adjoints. Common kernels (affine maps, LSTM cells, softmax) are
//! built in; anything else can be attached through [`Tape::custom`] with a
//! hand-written vector-Jacobian product.

use super::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom node: maps the output adjoint to one
/// optional adjoint per input (`None` means zero).
pub type BackwardFn = Box<dyn Fn(&Matrix) -> Vec<Option<Matrix>>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddN(Vec<usize>),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    HStack(Vec<usize>),
    Column(usize, usize),
    AddColumn(usize, usize),
    Affine(usize, usize, usize),
    Softmax(usize),
    EmbedColumn(usize, usize),
    Sum(usize),
    Lstm(Box<LstmSaved>),
    Custom(Vec<usize>, BackwardFn),
}

struct LstmSaved {
    x: usize,
    state: usize,
    wx: usize,
    wh: usize,
    bias: usize,
    /// Activated gates laid out as `[i; f; g; o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Scale(a.0, s), ng)
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut v = self.value(xs[0]).clone();
        for x in &xs[1..] {
            v.add_assign(self.value(*x));
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let ng = self.ng(&ids);
        self.push(v, Op::AddN(ids), ng)
    }

    pub fn mean_n(&mut self, xs: &[Var]) -> Var {
        let s = self.add_n(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Exp(a.0), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Clamp(a.0, lo, hi), ng)
    }

    /// Stacks nodes with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for x in xs {
            let m = self.value(*x);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let ng = self.ng(&ids);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(ids), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let v = Matrix::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(&[a.0]);
        self.push(v, Op::SliceRows(a.0, start), ng)
    }

    /// Places column vectors side by side.
    pub fn hstack(&mut self, cols: &[Var]) -> Var {
        let rows = self.value(cols[0]).rows();
        let mut v = Matrix::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            let m = self.value(*c);
            assert_eq!(m.shape(), (rows, 1), "hstack expects column vectors");
            for r in 0..rows {
                v[(r, j)] = m.data()[r];
            }
        }
        let ids: Vec<usize> = cols.iter().map(|x| x.0).collect();
        let ng = self.ng(&ids);
        self.push(v, Op::HStack(ids), ng)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = Matrix::column(&self.value(a).col_vec(j));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Column(a.0, j), ng)
    }

    /// Adds a column vector to every column of a matrix.
    pub fn add_column(&mut self, m: Var, c: Var) -> Var {
        let mut v = self.value(m).clone();
        let col = self.value(c);
        assert_eq!(col.shape(), (v.rows(), 1), "add_column shape mismatch");
        for r in 0..v.rows() {
            for k in 0..v.cols() {
                v[(r, k)] += col.data()[r];
            }
        }
        let ng = self.ng(&[m.0, c.0]);
        self.push(v, Op::AddColumn(m.0, c.0), ng)
    }

    /// `w * x + b` for a column vector `x`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (wm, xm, bm) = (self.value(w), self.value(x), self.value(b));
        assert_eq!(xm.cols(), 1, "affine expects a column vector");
        assert_eq!(wm.cols(), xm.rows(), "affine shape mismatch");
        assert_eq!(bm.shape(), (wm.rows(), 1), "affine bias shape mismatch");
        let data = (0..wm.rows()).map(|r| dot(wm.row(r), xm.data()) + bm.data()[r]).collect();
        let v = Matrix::from_vec(wm.rows(), 1, data);
        let ng = self.ng(&[w.0, x.0, b.0]);
        self.push(v, Op::Affine(w.0, x.0, b.0), ng)
    }

    /// Softmax of a column vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = Matrix::column(&softmax(self.value(a).data()));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Softmax(a.0), ng)
    }

    /// Column `idx` of an embedding table.
    pub fn embed(&mut self, table: Var, idx: usize) -> Var {
        let v = Matrix::column(&self.value(table).col_vec(idx));
        let ng = self.ng(&[table.0]);
        self.push(v, Op::EmbedColumn(table.0, idx), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sum(a.0), ng)
    }

    /// One LSTM step. `state` stacks `[h; c]`; the returned node stacks the
    /// new `[h; c]`. Gate pre-activations are `wx * x + wh * h + bias` in the
    /// order input, forget, cell, output.
    pub fn lstm(&mut self, x: Var, state: Var, wx: Var, wh: Var, bias: Var) -> Var {
        let (xm, sm, wxm, whm, bm) =
            (self.value(x), self.value(state), self.value(wx), self.value(wh), self.value(bias));
        let hidden = whm.cols();
        assert_eq!(sm.shape(), (2 * hidden, 1), "lstm state must be [h; c]");
        assert_eq!(wxm.shape(), (4 * hidden, xm.rows()), "lstm input weight shape");
        assert_eq!(whm.rows(), 4 * hidden, "lstm recurrent weight shape");
        assert_eq!(bm.shape(), (4 * hidden, 1), "lstm bias shape");
        let h = &sm.data()[..hidden];
        let c = &sm.data()[hidden..];
        let mut gates = Vec::with_capacity(4 * hidden);
        for r in 0..4 * hidden {
            let z = dot(wxm.row(r), xm.data()) + dot(whm.row(r), h) + bm.data()[r];
            gates.push(if (2 * hidden..3 * hidden).contains(&r) { z.tanh() } else { sigmoid(z) });
        }
        let mut out = vec![0.0; 2 * hidden];
        let mut tanh_c = vec![0.0; hidden];
        for k in 0..hidden {
            let (i, f, g, o) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
            let c_new = f * c[k] + i * g;
            tanh_c[k] = c_new.tanh();
            out[k] = o * tanh_c[k];
            out[hidden + k] = c_new;
        }
        let ng = self.ng(&[x.0, state.0, wx.0, wh.0, bias.0]);
        let saved = LstmSaved { x: x.0, state: state.0, wx: wx.0, wh: wh.0, bias: bias.0, gates, tanh_c };
        self.push(Matrix::from_vec(2 * hidden, 1, out), Op::Lstm(Box::new(saved)), ng)
    }

    /// Records a node with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, backward: BackwardFn) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|x| x.0).collect();
        let ng = self.ng(&ids);
        self.push(value, Op::Custom(ids, backward), ng)
    }

    /// Back-propagates from `output`, seeding its adjoint with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.nodes[output.0].value.shape();
        grads[output.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Matrix>], i: usize) -> &'a mut Matrix {
        let (r, c) = self.nodes[i].value.shape();
        grads[i].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let d = g.matmul_t(&self.nodes[*b].value);
                    self.acc(grads, *a).add_assign(&d);
                }
                if self.wants(*b) {
                    let d = self.nodes[*a].value.t_matmul(g);
                    self.acc(grads, *b).add_assign(&d);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a).add_assign(g);
                }
                if self.wants(*b) {
                    self.acc(grads, *b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a).add_assign(g);
                }
                if self.wants(*b) {
                    self.acc(grads, *b).add_scaled(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(&self.nodes[*b].value, |x, y| x * y);
                    self.acc(grads, *a).add_assign(&d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(&self.nodes[*a].value, |x, y| x * y);
                    self.acc(grads, *b).add_assign(&d);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    self.acc(grads, *a).add_scaled(g, *s);
                }
            }
            Op::AddN(ids) => {
                for &i in ids {
                    if self.wants(i) {
                        self.acc(grads, i).add_assign(g);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let d = g.zip_map(y, |g, y| g * (1.0 - y * y));
                    self.acc(grads, *a).add_assign(&d);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let d = g.zip_map(y, |g, y| g * y * (1.0 - y));
                    self.acc(grads, *a).add_assign(&d);
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let d = g.zip_map(y, |g, y| g * y);
                    self.acc(grads, *a).add_assign(&d);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.wants(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(&self.nodes[*a].value, |g, x| if x > lo && x < hi { g } else { 0.0 });
                    self.acc(grads, *a).add_assign(&d);
                }
            }
            Op::ConcatRows(ids) => {
                let cols = g.cols();
                let mut offset = 0;
                for &i in ids {
                    let n = self.nodes[i].value.len();
                    if self.wants(i) {
                        let dst = self.acc(grads, i);
                        for (d, s) in dst.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *d += s;
                        }
                    }
                    offset += n;
                    debug_assert_eq!(n % cols.max(1), 0);
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let cols = g.cols();
                    let dst = self.acc(grads, *a);
                    let region = &mut dst.data_mut()[start * cols..start * cols + g.len()];
                    for (d, s) in region.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::HStack(ids) => {
                for (j, &i) in ids.iter().enumerate() {
                    if self.wants(i) {
                        let col = g.col_vec(j);
                        let dst = self.acc(grads, i);
                        for (d, s) in dst.data_mut().iter_mut().zip(&col) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Column(a, j) => {
                if self.wants(*a) {
                    let dst = self.acc(grads, *a);
                    for r in 0..g.rows() {
                        dst[(r, *j)] += g.data()[r];
                    }
                }
            }
            Op::AddColumn(m, c) => {
                if self.wants(*m) {
                    self.acc(grads, *m).add_assign(g);
                }
                if self.wants(*c) {
                    let dst = self.acc(grads, *c);
                    for r in 0..g.rows() {
                        dst.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                }
            }
            Op::Affine(w, x, b) => {
                if self.wants(*w) {
                    let xv = self.nodes[*x].value.data();
                    self.acc(grads, *w).add_outer(g.data(), xv);
                }
                if self.wants(*x) {
                    let d = self.nodes[*w].value.t_matmul(g);
                    self.acc(grads, *x).add_assign(&d);
                }
                if self.wants(*b) {
                    self.acc(grads, *b).add_assign(g);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let gy = dot(g.data(), y.data());
                    let d = g.zip_map(y, |g, y| y * (g - gy));
                    self.acc(grads, *a).add_assign(&d);
                }
            }
            Op::EmbedColumn(table, idx) => {
                if self.wants(*table) {
                    let dst = self.acc(grads, *table);
                    for r in 0..g.rows() {
                        dst[(r, *idx)] += g.data()[r];
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let s = g.scalar();
                    for d in self.acc(grads, *a).data_mut() {
                        *d += s;
                    }
                }
            }
            Op::Lstm(saved) => self.lstm_backward(saved, g, grads),
            Op::Custom(ids, backward) => {
                let input_grads = backward(g);
                debug_assert_eq!(input_grads.len(), ids.len());
                for (&i, d) in ids.iter().zip(input_grads) {
                    if let Some(d) = d {
                        if self.wants(i) {
                            self.acc(grads, i).add_assign(&d);
                        }
                    }
                }
            }
        }
    }

    fn lstm_backward(&self, s: &LstmSaved, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let hidden = s.tanh_c.len();
        let state = self.nodes[s.state].value.data();
        let c_prev = &state[hidden..];
        let (dh, dc_out) = g.data().split_at(hidden);
        let mut dz = vec![0.0; 4 * hidden];
        let mut dc_prev = vec![0.0; hidden];
        for k in 0..hidden {
            let (i, f, gg, o) = (s.gates[k], s.gates[hidden + k], s.gates[2 * hidden + k], s.gates[3 * hidden + k]);
            let tc = s.tanh_c[k];
            let dc = dc_out[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dc * gg * i * (1.0 - i);
            dz[hidden + k] = dc * c_prev[k] * f * (1.0 - f);
            dz[2 * hidden + k] = dc * i * (1.0 - gg * gg);
            dz[3 * hidden + k] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
        let dz_m = Matrix::from_vec(4 * hidden, 1, dz);
        if self.wants(s.wx) {
            let x = self.nodes[s.x].value.data();
            self.acc(grads, s.wx).add_outer(dz_m.data(), x);
        }
        if self.wants(s.wh) {
            self.acc(grads, s.wh).add_outer(dz_m.data(), &state[..hidden]);
        }
        if self.wants(s.bias) {
            self.acc(grads, s.bias).add_assign(&dz_m);
        }
        if self.wants(s.x) {
            let d = self.nodes[s.wx].value.t_matmul(&dz_m);
            self.acc(grads, s.x).add_assign(&d);
        }
        if self.wants(s.state) {
            let dh_prev = self.nodes[s.wh].value.t_matmul(&dz_m);
            let dst = self.acc(grads, s.state);
            let data = dst.data_mut();
            for k in 0..hidden {
                data[k] += dh_prev.data()[k];
                data[hidden + k] += dc_prev[k];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::seeded;
    use rand::Rng;

    fn random(rng: &mut crate::numerics::ModelRng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn square_of_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::column(&[1.0, 2.0, 3.0]));
        let s = t.sum(x);
        let y = t.mul(s, s);
        let g = t.backward(y);
        assert_eq!(t.value(y).scalar(), 36.0);
        assert_eq!(g.get(x).unwrap().data(), &[12.0, 12.0, 12.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::column(&[1.0]));
        let c = t.constant(Matrix::column(&[5.0]));
        let y = t.mul(x, c);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn elementary_ops_pass_grad_check() {
        let mut rng = seeded(5);
        let params = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 1),
            random(&mut rng, 3, 1),
            random(&mut rng, 3, 2),
            random(&mut rng, 5, 3),
            random(&mut rng, 5, 1),
        ];
        let f = |p: &[Matrix]| {
            let mut t = Tape::new();
            let v: Vec<Var> = p.iter().map(|m| t.leaf(m.clone())).collect();
            let a = t.affine(v[0], v[1], v[2]);
            let th = t.tanh(a);
            let sg = t.sigmoid(a);
            let prod = t.mul(th, sg);
            let e = t.exp(prod);
            let cl = t.clamp(e, 0.5, 2.0);
            let sm = t.softmax(cl);
            let stacked = t.hstack(&[sm, th]);
            let mm = t.matmul(v[4], stacked);
            let shifted = t.add_column(mm, v[5]);
            let sliced = t.slice_rows(shifted, 1, 2);
            let col = t.column(stacked, 1);
            let sc = t.column(sliced, 1);
            let cat = t.concat_rows(&[col, sc]);
            let tail = t.slice_rows(cat, 0, 3);
            let d = t.sub(tail, v[2]);
            let sq = t.mul(d, d);
            let mixed = t.scale(sq, 0.7);
            let emb = t.embed(v[3], 1);
            let emb2 = t.embed(v[3], 0);
            let all = t.add_n(&[mixed, emb, emb2]);
            let out = t.sum(all);
            let grads = t.backward(out);
            let gs = v.iter().map(|x| grads.get(*x).cloned().unwrap_or_else(|| Matrix::zeros(1, 1))).collect();
            (t.value(out).scalar(), gs)
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn lstm_cell_passes_grad_check() {
        let mut rng = seeded(9);
        let hidden = 3;
        let params = vec![
            random(&mut rng, 2, 1),
            random(&mut rng, 2 * hidden, 1),
            random(&mut rng, 4 * hidden, 2),
            random(&mut rng, 4 * hidden, hidden),
            random(&mut rng, 4 * hidden, 1),
            random(&mut rng, 2 * hidden, 1),
        ];
        let f = |p: &[Matrix]| {
            let mut t = Tape::new();
            let v: Vec<Var> = p.iter().map(|m| t.leaf(m.clone())).collect();
            let s1 = t.lstm(v[0], v[1], v[2], v[3], v[4]);
            let s2 = t.lstm(v[0], s1, v[2], v[3], v[4]);
            let w = t.mul(s2, v[5]);
            let out = t.sum(w);
            let grads = t.backward(out);
            (t.value(out).scalar(), v.iter().map(|x| grads.get(*x).unwrap().clone()).collect())
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }
}
