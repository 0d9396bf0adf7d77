//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients for every node that depends on a leaf created with
//! [`Graph::input`] or [`Graph::param`]. Constants never receive gradients,
//! which is how stop-gradient is expressed.
//!
//! Everything is `f64`; vectors are `1 × n` (row) or `m × 1` (column)
//! matrices.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Array1<f64> },
    RowNorms(Var),
    NormalizeRows { x: Var, norms: Array1<f64>, eps: f64 },
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<Option<usize>> },
    AsymmetricLoss {
        p: Var,
        targets: Array2<f64>,
        gamma_pos: f64,
        gamma_neg: f64,
        clamp: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation. Build one per forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Clamp applied to probabilities inside the asymmetric loss.
pub const PROB_CLAMP: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients (evaluation mode).
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (an input under study).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on a non-scalar node");
        value[[0, 0]]
    }

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shapes");
        let out = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shapes");
        let _ = m;
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a (m×n) * row (1×n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row shapes");
        let out = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a (m×n) * col (m×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col shapes");
        let out = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a).view());
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std[i] = inv;
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Euclidean norm of every row, as an `m × 1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect::<Vec<_>>();
        let out = Array2::from_shape_vec((x.nrows(), 1), norms).expect("column shape");
        let rg = self.rg(a);
        self.push(out, Op::RowNorms(a), rg)
    }

    /// `x / max(‖x‖, eps)` per row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = x.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
            let d = n.max(eps);
            row.mapv_inplace(|v| v / d);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows { x: a, norms, eps }, rg)
    }

    /// Column means, as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "mean_rows of an empty matrix");
        let out = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Row sums, as an `m × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts");
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { x: a, start }, rg)
    }

    /// Builds a matrix whose row `r` is row `rows[r]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<Option<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((rows.len(), x.ncols()));
        for (r, src) in rows.iter().enumerate() {
            if let Some(i) = *src {
                out.row_mut(r).assign(&x.row(i));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows { x: a, rows }, rg)
    }

    /// Mean over all entries of the simplified asymmetric loss.
    pub fn asymmetric_loss(
        &mut self,
        p: Var,
        targets: Array2<f64>,
        gamma_pos: f64,
        gamma_neg: f64,
    ) -> Var {
        assert_eq!(self.shape(p), targets.dim(), "loss shapes");
        let probs = self.value(p);
        let mut total = 0.0;
        for (&pv, &y) in probs.iter().zip(targets.iter()) {
            total += asymmetric_term(pv, y, gamma_pos, gamma_neg, PROB_CLAMP);
        }
        let loss = total / probs.len() as f64;
        let rg = self.rg(p);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::AsymmetricLoss {
                p,
                targets,
                gamma_pos,
                gamma_neg,
                clamp: PROB_CLAMP,
            },
            rg,
        )
    }

    /// Cosine similarity between the rows of `a` and the rows of `b`
    /// with `eps` added to the norm product.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let bt = self.transpose(b);
        let dots = self.matmul(a, bt);
        let na = self.row_norms(a);
        let nb = self.row_norms(b);
        let nbt = self.transpose(nb);
        let denom = self.matmul(na, nbt);
        let denom = self.add_scalar(denom, eps);
        self.div(dots, denom)
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Runs reverse-mode differentiation from the scalar `output`.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.shape(output), (1, 1), "backward from a non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if !self.nodes[output.0].requires_grad {
            self.grads = grads;
            return;
        }
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g * val(*b));
                }
                if wants(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if wants(*a) {
                    acc(*a, g / vb);
                }
                if wants(*b) {
                    // d(a/b)/db = -a/b^2 = -out/b
                    acc(*b, -(g * out) / vb);
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if wants(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if wants(*a) {
                    acc(*a, g * val(*r));
                }
                if wants(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if wants(*a) {
                    acc(*a, g * val(*c));
                }
                if wants(*c) {
                    acc(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                acc(*a, g * &mask);
            }
            Op::Sigmoid(a) => acc(*a, g * &out.mapv(|y| y * (1.0 - y))),
            Op::SoftmaxRows(a) => {
                let mut dx = g * out;
                for (mut row, y) in dx.rows_mut().into_iter().zip(out.rows()) {
                    let s = row.sum();
                    row.zip_mut_with(&y, |d, &yv| *d -= yv * s);
                }
                acc(*a, dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = out.ncols() as f64;
                let mut dx = g.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let y = out.row(i);
                    let mean_g = row.sum() / n;
                    let mean_gy = row.dot(&y) / n;
                    let inv = inv_std[i];
                    row.zip_mut_with(&y, |d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                }
                acc(*x, dx);
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let mut dx = x.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let n = out[[i, 0]];
                    if n > 0.0 {
                        let f = g[[i, 0]] / n;
                        row.mapv_inplace(|v| v * f);
                    } else {
                        row.fill(0.0);
                    }
                }
                acc(*a, dx);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let mut dx = g.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let n = norms[i];
                    if n > *eps {
                        let y = out.row(i);
                        let gy = row.dot(&y);
                        row.zip_mut_with(&y, |d, &yv| *d = (*d - yv * gy) / n);
                    } else {
                        row.mapv_inplace(|d| d / eps);
                    }
                }
                acc(*x, dx);
            }
            Op::MeanRows(a) => {
                let m = val(*a).nrows();
                let row = g.row(0).mapv(|v| v / m as f64);
                let dx = row.broadcast((m, row.len())).expect("broadcast").to_owned();
                acc(*a, dx);
            }
            Op::SumCols(a) => {
                let n = val(*a).ncols();
                let dx = g.broadcast((g.nrows(), n)).expect("broadcast").to_owned();
                acc(*a, dx);
            }
            Op::SumAll(a) => {
                let dx = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if wants(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    if wants(p) {
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = Array2::zeros(val(*x).dim());
                let w = g.ncols();
                dx.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, src) in rows.iter().enumerate() {
                    if let Some(i) = *src {
                        let mut target = dx.row_mut(i);
                        target += &g.row(r);
                    }
                }
                acc(*x, dx);
            }
            Op::AsymmetricLoss {
                p,
                targets,
                gamma_pos,
                gamma_neg,
                clamp,
            } => {
                let probs = val(*p);
                let scale = g[[0, 0]] / probs.len() as f64;
                let mut dx = Array2::zeros(probs.dim());
                for ((d, &pv), &y) in dx.iter_mut().zip(probs.iter()).zip(targets.iter()) {
                    *d = scale * asymmetric_term_grad(pv, y, *gamma_pos, *gamma_neg, *clamp);
                }
                acc(*p, dx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// One entry of the simplified asymmetric loss.
pub fn asymmetric_term(p: f64, y: f64, gamma_pos: f64, gamma_neg: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    let pos = y * (1.0 - p).powf(gamma_pos) * p.ln();
    let neg = (1.0 - y) * p.powf(gamma_neg) * (1.0 - p).ln();
    -(pos + neg)
}

fn asymmetric_term_grad(p: f64, y: f64, gamma_pos: f64, gamma_neg: f64, clamp: f64) -> f64 {
    if p < clamp || p > 1.0 - clamp {
        return 0.0;
    }
    let q = 1.0 - p;
    let mut d = 0.0;
    if y != 0.0 {
        let focus = if gamma_pos == 0.0 {
            0.0
        } else {
            -gamma_pos * q.powf(gamma_pos - 1.0) * p.ln()
        };
        d -= y * (focus + q.powf(gamma_pos) / p);
    }
    if y != 1.0 {
        let focus = if gamma_neg == 0.0 {
            0.0
        } else {
            gamma_neg * p.powf(gamma_neg - 1.0) * q.ln()
        };
        d -= (1.0 - y) * (focus - p.powf(gamma_neg) / q);
    }
    d
}
