//! Dense 2-D `f64` tensors and a small reverse-mode tape.
//!
//! Everything the completion model needs is expressible over row-major
//! matrices: linear layers, per-row softmax and layer norm, row gathers with
//! scatter-add backward, grouped max pooling, column concat/slice, and a
//! sinusoidal coordinate embedding. The tape owns every node value, so the
//! tracked working set of a forward/backward pass is visible to [`crate::track`].
//!
//! Losses do not live on the tape: callers compute the loss gradient with
//! respect to the output tensor analytically and seed [`Tape::backward`] with
//! it.

use crate::track;

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

/// Row-major matrix of `f64` with tracked storage.
#[derive(Debug)]
pub struct Tensor {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        track::on_alloc(rows * cols * 8);
        Tensor {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        track::on_alloc(data.capacity() * 8);
        Tensor { data, rows, cols }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(p);
        }
        Tensor::from_vec(points.len(), 3, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_points(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.cols, 3, "expected a [n,3] tensor");
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(self.rows, self.cols, self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track::on_free(self.data.capacity() * 8);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

impl NodeId {
    /// Index into the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[n,d] + [1,d]`, the bias pattern.
    AddRowVec(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// `A x B^T` without materializing the transpose.
    MatmulTB(NodeId, NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<u32>,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// `[groups*per, d] -> [groups, d]` max over each block of `per` rows.
    MaxPoolGroups {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// `[n,3] -> [n, 6*F]` per-axis sin/cos at the given frequencies.
    SinCos {
        x: NodeId,
        freqs: Vec<f64>,
    },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape. Nodes reference earlier nodes only, so reverse creation
/// order is a valid topological order for backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let mut out = ta.clone();
        for (o, v) in out.data.iter_mut().zip(&tb.data) {
            *o += v;
        }
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let mut out = ta.clone();
        for (o, v) in out.data.iter_mut().zip(&tb.data) {
            *o -= v;
        }
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let mut out = ta.clone();
        for (o, v) in out.data.iter_mut().zip(&tb.data) {
            *o *= v;
        }
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o *= s;
        }
        self.push(Op::Scale(a, s), out)
    }

    pub fn add_row_vec(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.rows, 1);
        assert_eq!(ta.cols, tb.cols);
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        self.push(Op::AddRowVec(a, bias), out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul_values(self.value(a), self.value(b));
        self.push(Op::Matmul(a, b), out)
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul_tb_values(self.value(a), self.value(b));
        self.push(Op::MatmulTB(a, b), out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o = gelu(*o);
        }
        self.push(Op::Gelu(a), out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let d = tx.cols as f64;
        let mut out = tx.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data[c] + tb.data[c];
            }
        }
        self.push(Op::LayerNormRows { x, gamma, beta }, out)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[u32]) -> NodeId {
        let tx = self.value(x);
        let cols = tx.cols;
        let mut out = Tensor::zeros(indices.len(), cols);
        for (i, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            assert!(idx < tx.rows, "gather index out of range");
            out.data[i * cols..(i + 1) * cols].copy_from_slice(tx.row(idx));
        }
        self.push(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            out,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows);
        let cols = ta.cols + tb.cols;
        let mut out = Tensor::zeros(ta.rows, cols);
        for r in 0..ta.rows {
            out.data[r * cols..r * cols + ta.cols].copy_from_slice(ta.row(r));
            out.data[r * cols + ta.cols..(r + 1) * cols].copy_from_slice(tb.row(r));
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = self.value(x);
        assert!(start + len <= tx.cols);
        let mut out = Tensor::zeros(tx.rows, len);
        for r in 0..tx.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&tx.data[r * tx.cols + start..r * tx.cols + start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out)
    }

    /// Max over each consecutive block of `per` rows; ties keep the first row.
    pub fn max_pool_groups(&mut self, x: NodeId, per: usize) -> NodeId {
        let tx = self.value(x);
        assert!(per >= 1 && tx.rows % per == 0);
        let groups = tx.rows / per;
        let cols = tx.cols;
        let mut out = Tensor::zeros(groups, cols);
        let mut argmax = vec![0u32; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = g * per;
                for r in g * per..(g + 1) * per {
                    let v = tx.data[r * cols + c];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out.data[g * cols + c] = best;
                argmax[g * cols + c] = best_r as u32;
            }
        }
        self.push(Op::MaxPoolGroups { x, argmax }, out)
    }

    pub fn sincos(&mut self, x: NodeId, freqs: &[f64]) -> NodeId {
        let tx = self.value(x);
        let nf = freqs.len();
        let cols = tx.cols * 2 * nf;
        let mut out = Tensor::zeros(tx.rows, cols);
        for r in 0..tx.rows {
            for a in 0..tx.cols {
                let v = tx.data[r * tx.cols + a];
                for (j, f) in freqs.iter().enumerate() {
                    let t = std::f64::consts::TAU * f * v;
                    out.data[r * cols + (a * nf + j) * 2] = t.sin();
                    out.data[r * cols + (a * nf + j) * 2 + 1] = t.cos();
                }
            }
        }
        self.push(
            Op::SinCos {
                x,
                freqs: freqs.to_vec(),
            },
            out,
        )
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.rows * tx.cols, rows * cols, "reshape must preserve size");
        let out = Tensor::from_vec(rows, cols, tx.data.clone());
        self.push(Op::Reshape(x), out)
    }

    /// Backpropagates `seed` (the loss gradient w.r.t. node `out`) through the
    /// tape. Returns per-node gradients; leaves the caller cares about are
    /// looked up by id.
    pub fn backward(&self, out: NodeId, seed: Tensor) -> Vec<Option<Tensor>> {
        {
            let t = self.value(out);
            assert_eq!((seed.rows, seed.cols), (t.rows, t.cols), "seed shape");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    let mut neg = gy.clone();
                    for v in neg.data.iter_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *a, gy);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let mut ga = gy.clone();
                    for (g, v) in ga.data.iter_mut().zip(&self.value(*b).data) {
                        *g *= v;
                    }
                    let mut gb = gy;
                    for (g, v) in gb.data.iter_mut().zip(&self.value(*a).data) {
                        *g *= v;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    let mut ga = gy;
                    for v in ga.data.iter_mut() {
                        *v *= s;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddRowVec(a, bias) => {
                    let mut gb = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for c in 0..gy.cols {
                            gb.data[c] += gy.data[r * gy.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, gy);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Matmul(a, b) => {
                    // y = a.b : ga = gy.b^T, gb = a^T.gy
                    let ga = matmul_tb_values(&gy, self.value(*b));
                    let gb = matmul_ta_values(self.value(*a), &gy);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatmulTB(a, b) => {
                    // y = a.b^T : ga = gy.b, gb = gy^T.a
                    let ga = matmul_values(&gy, self.value(*b));
                    let gb = matmul_ta_values(&gy, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Gelu(a) => {
                    let mut ga = gy;
                    for (g, x) in ga.data.iter_mut().zip(&self.value(*a).data) {
                        *g *= gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = gy;
                    for r in 0..y.rows {
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &mut ga.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for (g, y) in gr.iter_mut().zip(yr.iter()) {
                            *g = (*g - dot) * y;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gamma);
                    let d = tx.cols as f64;
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    let mut gg = Tensor::zeros(1, tx.cols);
                    let mut gb = Tensor::zeros(1, tx.cols);
                    for r in 0..tx.rows {
                        let xr = &tx.data[r * tx.cols..(r + 1) * tx.cols];
                        let gyr = &gy.data[r * tx.cols..(r + 1) * tx.cols];
                        let mean = xr.iter().sum::<f64>() / d;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // dxhat, and the two row means needed for dx
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..tx.cols {
                            let xhat = (xr[c] - mean) * inv;
                            let dxhat = gyr[c] * tg.data[c];
                            gg.data[c] += gyr[c] * xhat;
                            gb.data[c] += gyr[c];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= d;
                        m2 /= d;
                        for c in 0..tx.cols {
                            let xhat = (xr[c] - mean) * inv;
                            let dxhat = gyr[c] * tg.data[c];
                            gx.data[r * tx.cols + c] = (dxhat - m1 - xhat * m2) * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::GatherRows { x, indices } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = idx as usize * tx.cols;
                        for c in 0..tx.cols {
                            gx.data[dst + c] += gy.data[i * tx.cols + c];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols, self.value(*b).cols);
                    let rows = gy.rows;
                    let mut ga = Tensor::zeros(rows, ca);
                    let mut gb = Tensor::zeros(rows, cb);
                    for r in 0..rows {
                        ga.data[r * ca..(r + 1) * ca]
                            .copy_from_slice(&gy.data[r * (ca + cb)..r * (ca + cb) + ca]);
                        gb.data[r * cb..(r + 1) * cb]
                            .copy_from_slice(&gy.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceCols { x, start, len } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    for r in 0..tx.rows {
                        gx.data[r * tx.cols + start..r * tx.cols + start + len]
                            .copy_from_slice(&gy.data[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPoolGroups { x, argmax } => {
                    let tx = self.value(*x);
                    let cols = tx.cols;
                    let mut gx = Tensor::zeros(tx.rows, cols);
                    for g in 0..gy.rows {
                        for c in 0..cols {
                            let r = argmax[g * cols + c] as usize;
                            gx.data[r * cols + c] += gy.data[g * cols + c];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let tx = self.value(*x);
                    let gx = Tensor::from_vec(tx.rows, tx.cols, gy.data.clone());
                    accumulate(&mut grads, *x, gx);
                }
                Op::SinCos { x, freqs } => {
                    let tx = self.value(*x);
                    let nf = freqs.len();
                    let ocols = tx.cols * 2 * nf;
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    for r in 0..tx.rows {
                        for a in 0..tx.cols {
                            let v = tx.data[r * tx.cols + a];
                            let mut acc = 0.0;
                            for (j, f) in freqs.iter().enumerate() {
                                let w = std::f64::consts::TAU * f;
                                let t = w * v;
                                let gs = gy.data[r * ocols + (a * nf + j) * 2];
                                let gc = gy.data[r * ocols + (a * nf + j) * 2 + 1];
                                acc += w * (t.cos() * gs - t.sin() * gc);
                            }
                            gx.data[r * tx.cols + a] = acc;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

/// `[n,k] x [k,m]`, rows parallelized above a flop threshold. Each output row
/// is accumulated in a fixed order, so results do not depend on thread count.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    let work = n * k * m;
    let fill = |i: usize, row_out: &mut [f64]| {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (o, bv) in row_out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if work >= 1 << 20 {
        use rayon::prelude::*;
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    } else {
        for (i, row) in out.data.chunks_mut(m).enumerate() {
            fill(i, row);
        }
    }
    out
}

/// `A x B^T` for `A [n,k]`, `B [m,k]`.
pub fn matmul_tb_values(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_tb inner dimension");
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(n, m);
    let fill = |i: usize, row_out: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row_out.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if n * k * m >= 1 << 20 {
        use rayon::prelude::*;
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    } else {
        for (i, row) in out.data.chunks_mut(m).enumerate() {
            fill(i, row);
        }
    }
    out
}

/// `A^T x B` for `A [k,n]`, `B [k,m]`.
fn matmul_ta_values(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_ta inner dimension");
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    for kk in 0..k {
        for i in 0..n {
            let av = a.data[kk * n + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Checks d(sum(w . f(x)))/dx against central differences for a graph
    /// builder `f` applied to leaf 0.
    fn gradcheck(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
    ) {
        let x0 = randn(rng, rows, cols);
        let mut probe_tape = Tape::new();
        let probe_x = probe_tape.leaf(x0.clone());
        let probe_out = build(&mut probe_tape, probe_x);
        let w = randn(
            rng,
            probe_tape.value(probe_out).rows(),
            probe_tape.value(probe_out).cols(),
        );

        let eval = |x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let out = build(&mut tape, xi);
            tape.value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let out = build(&mut tape, xi);
        let grads = tape.backward(out, w.clone());
        let gx = grads[xi.index()].as_ref().expect("leaf gradient");

        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 1e-9;
        for i in 0..x0.data().len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            max_err = max_err.max((gx.data()[i] - fd).abs());
            scale = scale.max(fd.abs());
        }
        assert!(
            max_err / scale.max(1.0) < 1e-6,
            "gradcheck failed: max abs err {max_err}, scale {scale}"
        );
    }

    #[test]
    fn gradcheck_elementwise_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randn(&mut rng, 4, 5);
        let b = randn(&mut rng, 1, 5);
        gradcheck(&mut rng.clone(), 3, 4, |t, x| {
            let wl = t.leaf(w.clone());
            let bl = t.leaf(b.clone());
            let y = t.matmul(x, wl);
            let y = t.add_row_vec(y, bl);
            t.gelu(y)
        });
    }

    #[test]
    fn gradcheck_attention_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = randn(&mut rng, 6, 4);
        gradcheck(&mut rng.clone(), 6, 4, |t, x| {
            let kl = t.leaf(k.clone());
            let scores = t.matmul_tb(x, kl);
            let scores = t.scale(scores, 0.5);
            let attn = t.softmax_rows(scores);
            t.matmul(attn, kl)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = randn(&mut rng, 1, 6);
        let b = randn(&mut rng, 1, 6);
        gradcheck(&mut rng.clone(), 4, 6, |t, x| {
            let gl = t.leaf(g.clone());
            let bl = t.leaf(b.clone());
            t.layer_norm_rows(x, gl, bl)
        });
    }

    #[test]
    fn gradcheck_gather_concat_slice_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx: Vec<u32> = (0..8).map(|_| rng.gen_range(0..5u32)).collect();
        gradcheck(&mut rng.clone(), 5, 3, |t, x| {
            let g = t.gather_rows(x, &idx);
            let s = t.slice_cols(g, 1, 2);
            let c = t.concat_cols(g, s);
            t.max_pool_groups(c, 2)
        });
    }

    #[test]
    fn gradcheck_sincos() {
        let rng = ChaCha8Rng::seed_from_u64(5);
        gradcheck(&mut rng.clone(), 4, 3, |t, x| t.sincos(x, &[0.5, 1.0, 2.0]));
    }

    #[test]
    fn gradcheck_mul_sub_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let other = randn(&mut rng, 4, 4);
        gradcheck(&mut rng.clone(), 4, 4, |t, x| {
            let o = t.leaf(other.clone());
            let d = t.sub(x, o);
            let m = t.mul(d, x);
            t.add(m, x)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 5, 9);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.softmax_rows(xi);
        for r in 0..5 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ties_take_first_row() {
        let x = Tensor::from_vec(4, 1, vec![2.0, 2.0, 1.0, 2.0]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.max_pool_groups(xi, 4);
        let grads = tape.backward(y, Tensor::from_vec(1, 1, vec![1.0]));
        let gx = grads[0].as_ref().unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, 7, 5);
        let b = randn(&mut rng, 5, 6);
        let y = matmul_values(&a, &b);
        for i in 0..7 {
            for j in 0..6 {
                let want: f64 = (0..5).map(|k| a.at(i, k) * b.at(k, j)).sum();
                assert!((y.at(i, j) - want).abs() < 1e-12);
            }
        }
    }
}
