//! Reverse-mode tape over [`Mat`] values.
//!
//! All trainable paths (fusion classifier, infusion network, LSTM baseline)
//! run through this tape, so the finite-difference checks in the acceptance
//! suite exercise one gradient engine.

use crate::tensor::Mat;

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Scale(VarId, f64),
    Mul(VarId, VarId),
    AddRow(VarId, VarId),
    MulRow(VarId, VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Gelu(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    MeanRows(VarId),
    MeanAll(VarId),
    SumAll(VarId),
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    SliceCols(VarId, usize, usize),
    SelectRows(VarId, Vec<usize>),
    Transpose(VarId),
    LayerNormRows(VarId, f64),
    /// Mean over rows of -log_prob[row][target[row]]; input must be row log-probs.
    NllMean(VarId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Mat,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Mat> {
        self.g[id].as_ref()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &mut [f64]) {
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

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Mat) -> VarId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, m: Mat) -> VarId {
        self.push(Op::Leaf, m)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let mut v = ma.clone();
        v.add_scaled(mb, 1.0);
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x *= s;
        }
        self.push(Op::Scale(a, s), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let mut v = ma.clone();
        for (x, y) in v.data.iter_mut().zip(mb.data.iter()) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), v)
    }

    /// Broadcast-add a 1 x C row vector to every row of a R x C matrix.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += mr.data[c];
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= mr.data[c];
            }
        }
        self.push(Op::MulRow(a, row), v)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x = x.tanh();
        }
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
        self.push(Op::Sigmoid(a), v)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x = gelu(*x);
        }
        self.push(Op::Gelu(a), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let cols = v.cols;
            softmax_row(&mut v.data[r * cols..(r + 1) * cols]);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let cols = v.cols;
            let row = &mut v.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let v = Mat::row_vec(crate::tensor::mean_rows(self.value(a)));
        self.push(Op::MeanRows(a), v)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let m = self.value(a);
        let v = m.data.iter().sum::<f64>() / m.data.len() as f64;
        self.push(Op::MeanAll(a), Mat::from_vec(1, 1, vec![v]))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = self.value(a).data.iter().sum::<f64>();
        self.push(Op::SumAll(a), Mat::from_vec(1, 1, vec![v]))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols);
            v.data[off..off + m.data.len()].copy_from_slice(&m.data);
            off += m.data.len();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let m = self.value(a);
        assert!(start + len <= m.cols);
        let mut v = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            v.data[r * len..(r + 1) * len]
                .copy_from_slice(&m.data[r * m.cols + start..r * m.cols + start + len]);
        }
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn select_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let m = self.value(a);
        let mut v = Mat::zeros(idx.len(), m.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(m.row(i));
        }
        self.push(Op::SelectRows(a, idx.to_vec()), v)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Per-row zero-mean unit-variance normalization (no affine terms).
    pub fn layer_norm_rows(&mut self, a: VarId, eps: f64) -> VarId {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..v.rows {
            let cols = v.cols;
            let row = &mut v.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a, eps), v)
    }

    /// Cross-entropy from row log-probabilities: mean over rows of -lp[r][target[r]].
    pub fn nll_mean(&mut self, log_probs: VarId, targets: &[usize]) -> VarId {
        let m = self.value(log_probs);
        assert_eq!(m.rows, targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= m.at(r, t);
        }
        let v = Mat::from_vec(1, 1, vec![total / targets.len() as f64]);
        self.push(Op::NllMean(log_probs, targets.to_vec()), v)
    }

    pub fn backward(&self, root: VarId) -> Grads {
        let rm = self.value(root);
        assert_eq!(
            (rm.rows, rm.cols),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut g: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        g[root] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=root).rev() {
            let Some(dy) = g[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    g[id] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let da = dy.matmul(&mb.transpose());
                    let db = ma.transpose().matmul(&dy);
                    accum(&mut g, *a, da);
                    accum(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut g, *a, dy.clone());
                    accum(&mut g, *b, dy);
                }
                Op::Scale(a, s) => {
                    let mut da = dy;
                    for x in da.data.iter_mut() {
                        *x *= s;
                    }
                    accum(&mut g, *a, da);
                }
                Op::Mul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let mut da = dy.clone();
                    for (x, y) in da.data.iter_mut().zip(mb.data.iter()) {
                        *x *= y;
                    }
                    let mut db = dy;
                    for (x, y) in db.data.iter_mut().zip(ma.data.iter()) {
                        *x *= y;
                    }
                    accum(&mut g, *a, da);
                    accum(&mut g, *b, db);
                }
                Op::AddRow(a, row) => {
                    let cols = dy.cols;
                    let mut drow = Mat::zeros(1, cols);
                    for r in 0..dy.rows {
                        for c in 0..cols {
                            drow.data[c] += dy.data[r * cols + c];
                        }
                    }
                    accum(&mut g, *a, dy);
                    accum(&mut g, *row, drow);
                }
                Op::MulRow(a, row) => {
                    let (ma, mr) = (self.value(*a), self.value(*row));
                    let cols = dy.cols;
                    let mut da = dy.clone();
                    let mut drow = Mat::zeros(1, cols);
                    for r in 0..dy.rows {
                        for c in 0..cols {
                            da.data[r * cols + c] *= mr.data[c];
                            drow.data[c] += dy.data[r * cols + c] * ma.data[r * cols + c];
                        }
                    }
                    accum(&mut g, *a, da);
                    accum(&mut g, *row, drow);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = dy;
                    for (x, t) in da.data.iter_mut().zip(y.data.iter()) {
                        *x *= 1.0 - t * t;
                    }
                    accum(&mut g, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = dy;
                    for (x, s) in da.data.iter_mut().zip(y.data.iter()) {
                        *x *= s * (1.0 - s);
                    }
                    accum(&mut g, *a, da);
                }
                Op::Gelu(a) => {
                    let ma = self.value(*a);
                    let mut da = dy;
                    for (x, &inp) in da.data.iter_mut().zip(ma.data.iter()) {
                        *x *= gelu_grad(inp);
                    }
                    accum(&mut g, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let cols = y.cols;
                    let mut da = Mat::zeros(y.rows, cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            da.data[r * cols + c] = yr[c] * (dr[c] - dot);
                        }
                    }
                    accum(&mut g, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let cols = y.cols;
                    let mut da = Mat::zeros(y.rows, cols);
                    for r in 0..y.rows {
                        let dr = dy.row(r);
                        let sum: f64 = dr.iter().sum();
                        for c in 0..cols {
                            da.data[r * cols + c] = dr[c] - y.at(r, c).exp() * sum;
                        }
                    }
                    accum(&mut g, *a, da);
                }
                Op::MeanRows(a) => {
                    let ma = self.value(*a);
                    let inv = 1.0 / ma.rows as f64;
                    let mut da = Mat::zeros(ma.rows, ma.cols);
                    for r in 0..ma.rows {
                        for c in 0..ma.cols {
                            da.data[r * ma.cols + c] = dy.data[c] * inv;
                        }
                    }
                    accum(&mut g, *a, da);
                }
                Op::MeanAll(a) => {
                    let ma = self.value(*a);
                    let s = dy.data[0] / ma.data.len() as f64;
                    let da = Mat::from_vec(ma.rows, ma.cols, vec![s; ma.data.len()]);
                    accum(&mut g, *a, da);
                }
                Op::SumAll(a) => {
                    let ma = self.value(*a);
                    let da = Mat::from_vec(ma.rows, ma.cols, vec![dy.data[0]; ma.data.len()]);
                    accum(&mut g, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let m = self.value(p);
                        let mut dp = Mat::zeros(m.rows, m.cols);
                        for r in 0..m.rows {
                            dp.data[r * m.cols..(r + 1) * m.cols]
                                .copy_from_slice(&dy.data[r * dy.cols + off..r * dy.cols + off + m.cols]);
                        }
                        off += m.cols;
                        accum(&mut g, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let m = self.value(p);
                        let mut dp = Mat::zeros(m.rows, m.cols);
                        dp.data.copy_from_slice(&dy.data[off..off + m.data.len()]);
                        off += m.data.len();
                        accum(&mut g, p, dp);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let ma = self.value(*a);
                    let mut da = Mat::zeros(ma.rows, ma.cols);
                    for r in 0..ma.rows {
                        da.data[r * ma.cols + start..r * ma.cols + start + len]
                            .copy_from_slice(&dy.data[r * len..(r + 1) * len]);
                    }
                    accum(&mut g, *a, da);
                }
                Op::SelectRows(a, idx) => {
                    let ma = self.value(*a);
                    let mut da = Mat::zeros(ma.rows, ma.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..ma.cols {
                            da.data[i * ma.cols + c] += dy.data[r * ma.cols + c];
                        }
                    }
                    accum(&mut g, *a, da);
                }
                Op::Transpose(a) => {
                    accum(&mut g, *a, dy.transpose());
                }
                Op::LayerNormRows(a, eps) => {
                    let ma = self.value(*a);
                    let y = &self.nodes[id].value;
                    let cols = ma.cols as f64;
                    let mut da = Mat::zeros(ma.rows, ma.cols);
                    for r in 0..ma.rows {
                        let xr = ma.row(r);
                        let mean = xr.iter().sum::<f64>() / cols;
                        let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let mean_dy = dr.iter().sum::<f64>() / cols;
                        let mean_dy_y: f64 =
                            dr.iter().zip(yr.iter()).map(|(d, h)| d * h).sum::<f64>() / cols;
                        for c in 0..xr.len() {
                            da.data[r * ma.cols + c] =
                                inv * (dr[c] - mean_dy - yr[c] * mean_dy_y);
                        }
                    }
                    accum(&mut g, *a, da);
                }
                Op::NllMean(a, targets) => {
                    let ma = self.value(*a);
                    let scale = -dy.data[0] / targets.len() as f64;
                    let mut da = Mat::zeros(ma.rows, ma.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        da.data[r * ma.cols + t] = scale;
                    }
                    accum(&mut g, *a, da);
                }
            }
        }
        Grads { g }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accum(g: &mut [Option<Mat>], id: VarId, d: Mat) {
    match &mut g[id] {
        Some(existing) => existing.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}
