//! Minimal reverse-mode automatic differentiation over `Array2<f64>`,
//! covering exactly the operations the model needs. Forward values are
//! computed eagerly as nodes are built; `backward` replays the tape in
//! reverse with a fixed accumulation order, so gradients are deterministic.

use std::sync::Arc;

use ndarray::{s, Array2};

use crate::graph::NormalizedAdjacency;

pub const COSINE_NORM_GUARD: f64 = 1e-12;

/// Rows of `x` selected by `idx` (with repetition).
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Block means: output row b = mean of the `blocks[b]` rows of `x`. Blocks
/// must be nonempty.
pub fn pool_rows(x: &Array2<f64>, blocks: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((blocks.len(), x.ncols()));
    for (b, members) in blocks.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for &i in members {
            for c in 0..x.ncols() {
                out[[b, c]] += x[[i, c]];
            }
        }
        for c in 0..x.ncols() {
            out[[b, c]] *= inv;
        }
    }
    out
}

/// Row-wise cosine similarity of two equally-shaped matrices, one value per
/// row, clamped to [-1, 1]. Rows whose norm falls below the guard yield 0.
pub fn row_cosine(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((q.nrows(), 1));
    for r in 0..q.nrows() {
        let qr = q.row(r);
        let kr = k.row(r);
        let nq = qr.dot(&qr).sqrt();
        let nk = kr.dot(&kr).sqrt();
        if nq < COSINE_NORM_GUARD || nk < COSINE_NORM_GUARD {
            out[[r, 0]] = 0.0;
        } else {
            out[[r, 0]] = (qr.dot(&kr) / (nq * nk)).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Row-wise softmax with max subtraction. Equal entries in a row produce
/// exactly equal weights.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.ncols() {
            let e = (x[[r, c]] - max).exp();
            out[[r, c]] = e;
            sum += e;
        }
        for c in 0..x.ncols() {
            out[[r, c]] /= sum;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Sparse symmetric constant matrix times a node.
    SpApply(Arc<NormalizedAdjacency>, usize),
    Gather(usize, Arc<Vec<usize>>),
    PoolMean(usize, Arc<Vec<Vec<usize>>>),
    Relu(usize),
    Sigmoid(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Each row of the first operand scaled by the matching scalar row of
    /// the second (n x 1).
    ScaleRows(usize, usize),
    RowSum(usize),
    RowNorm(usize),
    RowCosine(usize, usize),
    SoftmaxRows(usize),
    SumAll(usize),
    Scale(usize, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: usize) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> usize {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: usize, b: usize) -> usize {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn sp_apply(&mut self, adj: Arc<NormalizedAdjacency>, x: usize) -> usize {
        let value = adj.apply(&self.nodes[x].value);
        self.push(value, Op::SpApply(adj, x))
    }

    pub fn gather(&mut self, x: usize, idx: Arc<Vec<usize>>) -> usize {
        let value = gather_rows(&self.nodes[x].value, &idx);
        self.push(value, Op::Gather(x, idx))
    }

    pub fn pool_mean(&mut self, x: usize, blocks: Arc<Vec<Vec<usize>>>) -> usize {
        let value = pool_rows(&self.nodes[x].value, &blocks);
        self.push(value, Op::PoolMean(x, blocks))
    }

    pub fn relu(&mut self, x: usize) -> usize {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: usize) -> usize {
        let value = self.nodes[x].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, a: usize, b: usize) -> usize {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.nrows(), vb.nrows());
        let mut value = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        value.slice_mut(s![.., ..va.ncols()]).assign(va);
        value.slice_mut(s![.., va.ncols()..]).assign(vb);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: usize, start: usize, end: usize) -> usize {
        let value = self.nodes[x].value.slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start, end))
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale_rows(&mut self, x: usize, w: usize) -> usize {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(vw.ncols(), 1);
        assert_eq!(vx.nrows(), vw.nrows());
        let mut value = vx.clone();
        for r in 0..value.nrows() {
            let s = vw[[r, 0]];
            for c in 0..value.ncols() {
                value[[r, c]] *= s;
            }
        }
        self.push(value, Op::ScaleRows(x, w))
    }

    pub fn row_sum(&mut self, x: usize) -> usize {
        let vx = &self.nodes[x].value;
        let mut value = Array2::zeros((vx.nrows(), 1));
        for r in 0..vx.nrows() {
            value[[r, 0]] = vx.row(r).sum();
        }
        self.push(value, Op::RowSum(x))
    }

    /// Euclidean norm of each row; subgradient 0 at the zero row.
    pub fn row_norm(&mut self, x: usize) -> usize {
        let vx = &self.nodes[x].value;
        let mut value = Array2::zeros((vx.nrows(), 1));
        for r in 0..vx.nrows() {
            value[[r, 0]] = vx.row(r).dot(&vx.row(r)).sqrt();
        }
        self.push(value, Op::RowNorm(x))
    }

    /// Values clamped to [-1, 1]; the backward pass uses the unclamped
    /// analytic gradient (the clamp only trims rounding spill).
    pub fn row_cosine(&mut self, q: usize, k: usize) -> usize {
        let value = row_cosine(&self.nodes[q].value, &self.nodes[k].value);
        self.push(value, Op::RowCosine(q, k))
    }

    pub fn softmax_rows(&mut self, x: usize) -> usize {
        let value = softmax_rows(&self.nodes[x].value);
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn sum_all(&mut self, x: usize) -> usize {
        let total = self.nodes[x].value.sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x))
    }

    pub fn scale(&mut self, x: usize, c: f64) -> usize {
        let value = self.nodes[x].value.mapv(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    /// Gradient of scalar node `root` with respect to every node. `root`
    /// must be 1x1.
    pub fn backward(&self, root: usize) -> Vec<Array2<f64>> {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.raw_dim()))
            .collect();
        grads[root][[0, 0]] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            // The node's accumulated gradient is moved out to appease the
            // borrow checker; nothing re-reads grads[id] afterwards because
            // nodes only feed later nodes.
            let g = std::mem::replace(&mut grads[id], Array2::zeros((0, 0)));
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    grads[*a] = &grads[*a] + &g.dot(&vb.t());
                    grads[*b] = &grads[*b] + &va.t().dot(&g);
                }
                Op::SpApply(adj, x) => {
                    // The adjacency is symmetric, so transpose-apply is apply.
                    grads[*x] = &grads[*x] + &adj.apply(&g);
                }
                Op::Gather(x, idx) => {
                    for (r, &i) in idx.iter().enumerate() {
                        let row = g.row(r).to_owned();
                        let mut target = grads[*x].row_mut(i);
                        target += &row;
                    }
                }
                Op::PoolMean(x, blocks) => {
                    for (b, members) in blocks.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for c in 0..g.ncols() {
                                grads[*x][[i, c]] += g[[b, c]] * inv;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[*x].value;
                    let mut gx = g.clone();
                    gx.zip_mut_with(vx, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    grads[*x] = &grads[*x] + &gx;
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[id].value;
                    let gx = &g * &y.mapv(|v| v * (1.0 - v));
                    grads[*x] = &grads[*x] + &gx;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    grads[*a] = &grads[*a] + &g.slice(s![.., ..ca]);
                    grads[*b] = &grads[*b] + &g.slice(s![.., ca..]);
                }
                Op::SliceCols(x, start, _end) => {
                    for r in 0..g.nrows() {
                        for c in 0..g.ncols() {
                            grads[*x][[r, start + c]] += g[[r, c]];
                        }
                    }
                }
                Op::Add(a, b) => {
                    grads[*a] = &grads[*a] + &g;
                    grads[*b] = &grads[*b] + &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] = &grads[*a] + &g;
                    grads[*b] = &grads[*b] - &g;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    grads[*a] = &grads[*a] + &ga;
                    grads[*b] = &grads[*b] + &gb;
                }
                Op::ScaleRows(x, w) => {
                    let vx = &self.nodes[*x].value;
                    let vw = &self.nodes[*w].value;
                    for r in 0..g.nrows() {
                        let sr = vw[[r, 0]];
                        let mut dot = 0.0;
                        for c in 0..g.ncols() {
                            grads[*x][[r, c]] += g[[r, c]] * sr;
                            dot += g[[r, c]] * vx[[r, c]];
                        }
                        grads[*w][[r, 0]] += dot;
                    }
                }
                Op::RowSum(x) => {
                    for r in 0..self.nodes[*x].value.nrows() {
                        let gr = g[[r, 0]];
                        for c in 0..self.nodes[*x].value.ncols() {
                            grads[*x][[r, c]] += gr;
                        }
                    }
                }
                Op::RowNorm(x) => {
                    let vx = &self.nodes[*x].value;
                    let y = &self.nodes[id].value;
                    for r in 0..vx.nrows() {
                        let norm = y[[r, 0]];
                        if norm > 0.0 {
                            let gr = g[[r, 0]] / norm;
                            for c in 0..vx.ncols() {
                                grads[*x][[r, c]] += gr * vx[[r, c]];
                            }
                        }
                    }
                }
                Op::RowCosine(q, k) => {
                    let vq = &self.nodes[*q].value;
                    let vk = &self.nodes[*k].value;
                    for r in 0..vq.nrows() {
                        let gr = g[[r, 0]];
                        if gr == 0.0 {
                            continue;
                        }
                        let qr = vq.row(r);
                        let kr = vk.row(r);
                        let nq = qr.dot(&qr).sqrt();
                        let nk = kr.dot(&kr).sqrt();
                        if nq < COSINE_NORM_GUARD || nk < COSINE_NORM_GUARD {
                            continue;
                        }
                        let dot = qr.dot(&kr);
                        let cos = dot / (nq * nk);
                        for c in 0..vq.ncols() {
                            grads[*q][[r, c]] +=
                                gr * (kr[c] / (nq * nk) - cos * qr[c] / (nq * nq));
                            grads[*k][[r, c]] +=
                                gr * (qr[c] / (nq * nk) - cos * kr[c] / (nk * nk));
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[id].value;
                    for r in 0..y.nrows() {
                        let mut dot = 0.0;
                        for c in 0..y.ncols() {
                            dot += g[[r, c]] * y[[r, c]];
                        }
                        for c in 0..y.ncols() {
                            grads[*x][[r, c]] += y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gr = g[[0, 0]];
                    grads[*x].mapv_inplace(|v| v + gr);
                }
                Op::Scale(x, c) => {
                    grads[*x] = &grads[*x] + &g.mapv(|v| v * *c);
                }
            }
            grads[id] = g;
        }
        grads
    }
}
