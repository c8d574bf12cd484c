//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates parameter gradients into a
//! [`Gradients`] buffer. One tape is built per example.

use crate::tensor::{Gradients, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaskMul(Var, Matrix),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Matrix,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            // parameters are read from the store, not copied onto the tape
            Op::Param(id) => self.store.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Matrix::zeros(0, 0), Op::Param(id))
    }

    /// Rows `ids` of parameter `table`, stacked.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.store.get(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Add a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(av.cols, rv.cols);
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols as f64;
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let data = v.data[start * v.cols..(start + len) * v.cols].to_vec();
        let m = Matrix::from_vec(len, v.cols, data);
        self.push(m, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Matrix) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(v, Op::MaskMul(a, mask))
    }

    /// `-log softmax(logits)[target]` for a single-row `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.rows, 1, "cross_entropy expects one row");
        softmax_in_place(&mut probs.data);
        let loss = -probs.data[target].max(f64::MIN_POSITIVE).ln();
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Back-propagate from a `1×1` output, adding into `grads`.
    pub fn backward_into(&self, output: Var, grads: &mut Gradients) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a scalar");
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[output.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Gather(id, ids) => {
                    let table = self.store.get(*id);
                    let slot = grads.slot_mut(*id, table.rows, table.cols);
                    for (r, &row_id) in ids.iter().enumerate() {
                        for (s, d) in slot.row_mut(row_id).iter_mut().zip(g.row(r)) {
                            *s += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g.map(|x| x * c)),
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut adj, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |x, z| x * gelu_grad(z));
                    acc(&mut adj, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = xhat.cols as f64;
                    let mut dgamma = Matrix::zeros(1, xhat.cols);
                    let mut dbeta = Matrix::zeros(1, xhat.cols);
                    let mut dx = Matrix::zeros(xhat.rows, xhat.cols);
                    for r in 0..xhat.rows {
                        let (hr, gr) = (xhat.row(r), g.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..xhat.cols {
                            dgamma.data[c] += gr[c] * hr[c];
                            dbeta.data[c] += gr[c];
                            let dh = gr[c] * gv.data[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..xhat.cols {
                            let dh = gr[c] * gv.data[c];
                            dx.set(r, c, inv / n * (n * dh - sum_d - hr[c] * sum_dh));
                        }
                    }
                    acc(&mut adj, *gamma, dgamma);
                    acc(&mut adj, *beta, dbeta);
                    acc(&mut adj, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let data = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        acc(&mut adj, p, Matrix::from_vec(rows, g.cols, data));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut d = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut adj, p, d);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    d.data[start * src.cols..start * src.cols + g.data.len()]
                        .copy_from_slice(&g.data);
                    acc(&mut adj, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, d);
                }
                Op::MaskMul(a, mask) => acc(&mut adj, *a, g.zip_map(mask, |x, m| x * m)),
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.data[0];
                    let mut d = probs.map(|p| p * scale);
                    d.data[*target] -= scale;
                    acc(&mut adj, *logits, d);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(&mut adj, *a, Matrix::filled(rows, cols, g.data[0]));
                }
            }
        }
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads = Gradients::new(self.store.len());
        self.backward_into(output, &mut grads);
        grads
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_relative_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::randn(3, 4, 0.7, &mut rng));
        let b = store.add("b", Matrix::randn(4, 4, 0.7, &mut rng));
        let row = store.add("row", Matrix::randn(1, 4, 0.7, &mut rng));
        let gamma = store.add("gamma", Matrix::randn(1, 4, 0.7, &mut rng));
        let table = store.add("table", Matrix::randn(5, 4, 0.7, &mut rng));
        let mask = Matrix::from_vec(3, 4, (0..12).map(|i| (i % 3) as f64 * 0.5).collect());

        let (worst, at) = max_relative_error(&store, 1e-5, 1e-7, |t| {
            let (va, vb, vr, vg) = (t.param(a), t.param(b), t.param(row), t.param(gamma));
            let emb = t.gather(table, &[4, 0, 4]);
            let x = t.matmul(va, vb);
            let x = t.add(x, emb);
            let x = t.add_row(x, vr);
            let ln = t.layer_norm(x, vg, vr, 1e-5);
            let s = t.sigmoid(ln);
            let th = t.tanh(x);
            let gl = t.gelu(x);
            let m = t.mul(s, th);
            let m = t.sub(m, gl);
            let att = t.matmul_bt(m, va);
            let p = t.softmax_rows(att);
            let p = t.matmul(p, va);
            let dropped = t.mask_mul(p, mask.clone());
            let left = t.slice_cols(dropped, 0, 2);
            let right = t.slice_cols(dropped, 2, 2);
            let joined = t.concat_cols(&[right, left]);
            let top = t.slice_rows(joined, 0, 1);
            let both = t.concat_rows(&[top, joined]);
            let scaled = t.scale(both, 0.3);
            let last = t.slice_rows(scaled, 3, 1);
            let ce = t.cross_entropy(last, 2);
            let s = t.sum(scaled);
            let s = t.scale(s, 0.1);
            t.add(ce, s)
        });
        assert!(worst < 1e-6, "worst relative error {worst}: {at}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Matrix::from_vec(2, 3, vec![1000., 0., -5., 1., 2., 3.]));
        let p = t.softmax_rows(x);
        for r in 0..2 {
            let s: f64 = t.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
