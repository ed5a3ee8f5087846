//! A small eager reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; row vectors are `1 × n`. Operations compute
//! their result immediately and record enough state for [`Graph::backward`].
//! Parameters live in a [`ParamStore`] that the graph borrows, so building a
//! graph never copies weights.

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Additive value used to knock out attention positions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| Mat::zeros(p.value.raw_dim()))
                .collect(),
        }
    }
}

/// Dense per-parameter gradient accumulator, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.grads.iter_mut()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var, Vec<bool>),
    MaxRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// An eager computation graph borrowing a parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

const BCE_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Mat::zeros((0, 0)), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + &r.row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let v = &xhat * &g + &b;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), idx);
        self.push(v, Op::Gather(table, idx.to_vec()))
    }

    /// Mean over the rows whose mask entry is true; `1 × d`.
    pub fn mean_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), mask.len());
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "mean_rows over a fully masked matrix");
        let mut out = Mat::zeros((1, av.ncols()));
        for (row, &keep) in av.rows().into_iter().zip(mask) {
            if keep {
                out.row_mut(0).scaled_add(1.0, &row);
            }
        }
        out.mapv_inplace(|v| v / count as f64);
        self.push(out, Op::MeanRows(a, mask.to_vec()))
    }

    /// Column-wise maximum over rows; ties go to the earliest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = av.dim();
        assert!(n > 0, "max_rows over an empty matrix");
        let mut out = Mat::zeros((1, d));
        let mut arg = vec![0usize; d];
        for j in 0..d {
            let mut best = av[[0, j]];
            for i in 1..n {
                if av[[i, j]] > best {
                    best = av[[i, j]];
                    arg[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    /// Multiplies row `i` of `a` by the constant `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: &[f64]) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.nrows(), w.len());
        for (mut row, &c) in v.rows_mut().into_iter().zip(w) {
            row.mapv_inplace(|x| x * c);
        }
        self.push(v, Op::ScaleRows(a, w.to_vec()))
    }

    /// Mean token negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert!(!targets.is_empty(), "cross_entropy over zero targets");
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Mat::from_elem((1, 1), total / targets.len() as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of per-label logistic probabilities against
    /// a multi-hot target, with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let probs: Vec<f64> = lv.iter().map(|&z| sigmoid(z)).collect();
        let loss = bce_mean(&probs, targets);
        let v = Mat::from_elem((1, 1), loss);
        self.push(
            v,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar node. Parameter gradients are added into
    /// `grads`; returns nothing else.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    *grads.get_mut(*id) += &g;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, *row, dr);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g * *c);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gh = &g * &gam;
                    let d = gh.ncols() as f64;
                    let mut dx = Mat::zeros(gh.raw_dim());
                    for i in 0..gh.nrows() {
                        let gr = gh.row(i);
                        let xr = xhat.row(i);
                        let mean_g = gr.sum() / d;
                        let mean_gx = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..gh.ncols() {
                            dx[[i, j]] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                    accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = g
                            .row(i)
                            .iter()
                            .zip(y.row(i).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::SliceCols(a, start) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    da.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut adj, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut adj, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Gather(table, idx) => {
                    // Scatter straight into the parameter gradient when possible.
                    if let Op::Param(id) = self.nodes[table.0].op {
                        let dst = grads.get_mut(id);
                        for (r, &i) in idx.iter().enumerate() {
                            dst.row_mut(i).scaled_add(1.0, &g.row(r));
                        }
                    } else {
                        let mut dt = Mat::zeros(self.value(*table).raw_dim());
                        for (r, &i) in idx.iter().enumerate() {
                            dt.row_mut(i).scaled_add(1.0, &g.row(r));
                        }
                        accumulate(&mut adj, *table, dt);
                    }
                }
                Op::MeanRows(a, mask) => {
                    let count = mask.iter().filter(|m| **m).count() as f64;
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            da.row_mut(i).scaled_add(1.0 / count, &g.row(0));
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::MaxRows(a, arg) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    for (j, &i) in arg.iter().enumerate() {
                        da[[i, j]] = g[[0, j]];
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::ScaleRows(a, w) => {
                    let mut da = g;
                    for (mut row, &c) in da.rows_mut().into_iter().zip(w) {
                        row.mapv_inplace(|x| x * c);
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    d.mapv_inplace(|v| v * scale);
                    accumulate(&mut adj, *logits, d);
                }
                Op::Bce {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let shape = self.value(*logits).raw_dim();
                    let flat: Vec<f64> = probs
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                                (p - y) * scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let d = Mat::from_shape_vec(shape, flat).expect("bce grad shape");
                    accumulate(&mut adj, *logits, d);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_mean(probs: &[f64], targets: &[f64]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every coordinate of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut grads = store.zeros_like();
        {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward_into(loss, &mut grads);
        }
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = store.get(id)[[i, j]];
                    store.get_mut(id)[[i, j]] = orig + eps;
                    let fp = {
                        let mut g = Graph::new(store);
                        let l = f(&mut g);
                        g.scalar(l)
                    };
                    store.get_mut(id)[[i, j]] = orig - eps;
                    let fm = {
                        let mut g = Graph::new(store);
                        let l = f(&mut g);
                        g.scalar(l)
                    };
                    store.get_mut(id)[[i, j]] = orig;
                    let num = (fp - fm) / (2.0 * eps);
                    let ana = grads.get(id)[[i, j]];
                    assert!(
                        (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                        "{}[{i},{j}]: analytic {ana} numeric {num}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_layernorm_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_mat(&mut rng, 3, 4));
        let w = store.add("w", rand_mat(&mut rng, 4, 4));
        let gam = store.add("gamma", rand_mat(&mut rng, 1, 4));
        let bet = store.add("beta", rand_mat(&mut rng, 1, 4));
        let tgt = rand_mat(&mut rng, 3, 3);
        check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let h = g.matmul(xv, wv);
            let gv = g.param(gam);
            let bv = g.param(bet);
            let n = g.layer_norm(h, gv, bv, 1e-5);
            let a = g.gelu(n);
            let sc = g.matmul_t(a, xv);
            let sm = g.softmax_rows(sc);
            let t = g.constant(tgt.clone());
            let m = g.mul(sm, t);
            let c = g.tanh(m);
            g.cross_entropy(c, &[0, 2, 1])
        });
    }

    #[test]
    fn slicing_pooling_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let table = store.add("table", rand_mat(&mut rng, 5, 4));
        let row = store.add("row", rand_mat(&mut rng, 1, 4));
        check(&mut store, |g| {
            let t = g.param(table);
            let picked = g.gather(t, &[3, 1, 3]);
            let scaled = g.scale_rows(picked, &[0.5, 0.9, 1.0]);
            let mx = g.max_rows(scaled);
            let all = g.concat_rows(&[mx, picked]);
            let mean = g.mean_rows(all, &[true, false, true, true]);
            let r = g.param(row);
            let sum = g.add(mean, r);
            let left = g.slice_cols(sum, 0, 2);
            let right = g.slice_cols(sum, 2, 2);
            let cat = g.concat_cols(&[right, left]);
            let shifted = g.add_row(cat, r);
            let sig = g.sigmoid(shifted);
            let s2 = g.scale(sig, 3.0);
            g.bce_with_logits(s2, &[1.0, 0.0, 0.0, 1.0])
        });
    }

    #[test]
    fn bce_at_midpoint_is_ln2() {
        let probs = vec![0.5; 6];
        let y = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert!((bce_mean(&probs, &y) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_masked_rows_is_finite() {
        let m = Mat::from_elem((2, 3), MASK_NEG);
        let s = softmax_rows(&m);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s.row(0).sum() - 1.0).abs() < 1e-12);
    }
}
