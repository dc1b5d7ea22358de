//! Matrix-level reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards from the loss is a valid
//! topological order for gradient propagation.

use super::matrix::gemm;
use super::{gelu, gelu_grad, norm_stats, sigmoid, softmax_in_place, softplus, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One anchor row of a supervised contrastive objective: the indices of its
/// positive and negative rows in the similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveAnchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    ScaleRows { a: Var, col: Var },
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Im2Col3(Var),
    SelectRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    RowSum(Var),
    Focal { logits: Var, targets: Matrix, alpha: f64, gamma: f64 },
    Diou { pred: Var, target: Matrix },
    L2NormalizeRows(Var),
    Contrastive { sim: Var, anchors: Vec<ContrastiveAnchor> },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

const NORMALIZE_EPS: f64 = 1e-12;

impl Graph {
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs, parameters and detached constants all enter as leaves.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = gemm(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols());
        let r = r.data().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow { a, row })
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.shape(), (self.value(a).rows(), 1));
        let c = c.data().to_vec();
        let mut value = self.value(a).clone();
        for (i, k) in c.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        self.push(value, Op::ScaleRows { a, col })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let (mean, is) = norm_stats(xv.row(i));
            inv_std.push(is);
            for j in 0..cols {
                let h = (xv.get(i, j) - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Max pooling over rows with window 2 and stride 2; an odd last row
    /// pools alone. Output has `ceil(rows / 2)` rows.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let out_rows = rows.div_ceil(2);
        let mut out = Matrix::zeros(out_rows, cols);
        let mut argmax = Vec::with_capacity(out_rows * cols);
        for j in 0..out_rows {
            for c in 0..cols {
                let r0 = 2 * j;
                let mut best = r0;
                if r0 + 1 < rows && x.get(r0 + 1, c) > x.get(r0, c) {
                    best = r0 + 1;
                }
                out.set(j, c, x.get(best, c));
                argmax.push(best);
            }
        }
        self.push(out, Op::MaxPool2 { a, argmax })
    }

    /// Unfolds a `T x C` sequence into `T x 3C` rows `[x[t-1], x[t], x[t+1]]`
    /// with zero padding, so a kernel-3 convolution becomes one matmul.
    pub fn im2col3(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, 3 * cols);
        for t in 0..rows {
            for k in 0..3 {
                let src = t as isize + k as isize - 1;
                if src < 0 || src as usize >= rows {
                    continue;
                }
                out.row_mut(t)[k * cols..(k + 1) * cols].copy_from_slice(x.row(src as usize));
            }
        }
        self.push(out, Op::Im2Col3(a))
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(x.row(i));
        }
        let value = Matrix::from_vec_unchecked(idx.len(), cols, data);
        self.push(value, Op::SelectRows { a, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols);
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec_unchecked(rows, cols, data);
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.push(value, Op::RowSum(a))
    }

    /// Elementwise sigmoid focal loss of `logits` against 0/1 `targets`.
    pub fn focal(&mut self, logits: Var, targets: Matrix, alpha: f64, gamma: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let value = x.zip_map(&targets, |x, y| focal_term(x, y, alpha, gamma));
        self.push(value, Op::Focal { logits, targets, alpha, gamma })
    }

    /// Per-row 1D distance-IoU loss between segments expressed as offsets
    /// `(before, after)` from a shared reference point. `pred` and `target`
    /// are `n x 2`; the result is `n x 1`.
    pub fn diou(&mut self, pred: Var, target: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        assert_eq!(p.cols(), 2);
        let value = Matrix::from_fn(p.rows(), 1, |i, _| {
            diou_from_offsets(p.get(i, 0), p.get(i, 1), target.get(i, 0), target.get(i, 1)).0
        });
        self.push(value, Op::Diou { pred, target })
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let r = value.row_mut(i);
            let n = (r.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        self.push(value, Op::L2NormalizeRows(a))
    }

    /// Mean over anchors of `-ln(sum_P e^s / (sum_P e^s + sum_N e^s))` where
    /// `s` is a row of the (log-)similarity matrix `sim`. Returns `0` for an
    /// empty anchor list.
    pub fn contrastive(&mut self, sim: Var, anchors: Vec<ContrastiveAnchor>) -> Var {
        let s = self.value(sim);
        let mut total = 0.0;
        for a in &anchors {
            total += contrastive_anchor_loss(s.row(a.row), &a.positives, &a.negatives);
        }
        let value = Matrix::scalar(if anchors.is_empty() { 0.0 } else { total / anchors.len() as f64 });
        self.push(value, Op::Contrastive { sim, anchors })
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = A'B': dA' = G B'^T, dB' = A'^T G
                let ga = if *ta { gemm(bv, *tb, g, true) } else { gemm(g, false, bv, !*tb) };
                let gb = if *tb { gemm(g, true, av, *ta) } else { gemm(av, !*ta, g, false) };
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |g, y| g * y));
                accumulate(grads, *b, g.zip_map(self.value(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, g.zip_map(bv, |g, y| g / y));
                let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| -g.get(i, j) * out.get(i, j) / bv.get(i, j));
                accumulate(grads, *b, gb);
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, g.clone());
                let mut gr = g.column_means();
                gr.scale_assign(g.rows() as f64);
                accumulate(grads, *row, gr);
            }
            Op::ScaleRows { a, col } => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let k = cv.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|v| *v *= k);
                }
                let gc = Matrix::from_fn(av.rows(), 1, |i, _| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum());
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|v| v * k)),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y)),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Softplus(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * sigmoid(x))),
            Op::Gelu(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * gelu_grad(x))),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(y, g)| y * g).sum();
                    for (o, (y, g)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(gi)) {
                        *o = y * (g - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let (rows, cols) = xhat.shape();
                let mut gx = Matrix::zeros(rows, cols);
                let mut ggain = Matrix::zeros(1, cols);
                let mut gbias = Matrix::zeros(1, cols);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for i in 0..rows {
                    let gi = g.row(i);
                    let hi = xhat.row(i);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..cols {
                        dxhat[j] = gi[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hi[j];
                        ggain.data_mut()[j] += gi[j] * hi[j];
                        gbias.data_mut()[j] += gi[j];
                    }
                    mean_d /= n;
                    mean_dh /= n;
                    let s = inv_std[i];
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = s * (dxhat[j] - mean_d - hi[j] * mean_dh);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, ggain);
                accumulate(grads, *bias, gbias);
            }
            Op::MaxPool2 { a, argmax } => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let cols = av.cols();
                for j in 0..out.rows() {
                    for c in 0..cols {
                        let r = argmax[j * cols + c];
                        ga.data_mut()[r * cols + c] += g.get(j, c);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Im2Col3(a) => {
                let av = self.value(*a);
                let (rows, cols) = av.shape();
                let mut ga = Matrix::zeros(rows, cols);
                for t in 0..rows {
                    for k in 0..3 {
                        let src = t as isize + k as isize - 1;
                        if src < 0 || src as usize >= rows {
                            continue;
                        }
                        let gsrc = &g.row(t)[k * cols..(k + 1) * cols];
                        for (o, v) in ga.row_mut(src as usize).iter_mut().zip(gsrc) {
                            *o += v;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SelectRows { a, idx } => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    accumulate(grads, p, g.slice_rows(offset, offset + r));
                    offset += r;
                }
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |i, _| g.get(i, 0));
                accumulate(grads, *a, ga);
            }
            Op::Focal { logits, targets, alpha, gamma } => {
                let x = self.value(*logits);
                let gx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    g.get(i, j) * focal_term_grad(x.get(i, j), targets.get(i, j), *alpha, *gamma)
                });
                accumulate(grads, *logits, gx);
            }
            Op::Diou { pred, target } => {
                let p = self.value(*pred);
                let gp = {
                    let mut m = Matrix::zeros(p.rows(), 2);
                    for i in 0..p.rows() {
                        let (_, d0, d1) =
                            diou_from_offsets(p.get(i, 0), p.get(i, 1), target.get(i, 0), target.get(i, 1));
                        m.set(i, 0, g.get(i, 0) * d0);
                        m.set(i, 1, g.get(i, 0) * d1);
                    }
                    m
                };
                accumulate(grads, *pred, gp);
            }
            Op::L2NormalizeRows(a) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let x = av.row(i);
                    let gi = g.row(i);
                    let sq: f64 = x.iter().map(|v| v * v).sum();
                    let n = (sq + NORMALIZE_EPS).sqrt();
                    let xg: f64 = x.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (o, (xv, gv)) in ga.row_mut(i).iter_mut().zip(x.iter().zip(gi)) {
                        *o = (gv - xv * xg / (n * n)) / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Contrastive { sim, anchors } => {
                let s = self.value(*sim);
                let mut gs = Matrix::zeros(s.rows(), s.cols());
                let scale = g.item() / anchors.len().max(1) as f64;
                for a in anchors {
                    let row = s.row(a.row);
                    let lse_p = log_sum_exp(a.positives.iter().map(|&j| row[j]));
                    let lse_all = log_sum_exp(a.positives.iter().chain(&a.negatives).map(|&j| row[j]));
                    let out_row = gs.row_mut(a.row);
                    for &j in &a.positives {
                        out_row[j] += scale * ((row[j] - lse_all).exp() - (row[j] - lse_p).exp());
                    }
                    for &j in &a.negatives {
                        out_row[j] += scale * (row[j] - lse_all).exp();
                    }
                }
                accumulate(grads, *sim, gs);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn contrastive_anchor_loss(row: &[f64], positives: &[usize], negatives: &[usize]) -> f64 {
    let lse_p = log_sum_exp(positives.iter().map(|&j| row[j]));
    let lse_all = log_sum_exp(positives.iter().chain(negatives).map(|&j| row[j]));
    lse_all - lse_p
}

/// Sigmoid focal loss of one logit against a 0/1 target.
pub(crate) fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if y > 0.5 {
        // -ln p = softplus(-x)
        alpha * (1.0 - p).powf(gamma) * softplus(-x)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(x)
    }
}

fn focal_term_grad(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if y > 0.5 {
        let q = 1.0 - p;
        alpha * q.powf(gamma) * (-gamma * p * softplus(-x) - q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (gamma * (1.0 - p) * softplus(x) + p)
    }
}

/// DIoU loss for segments `[-ps, pe]` and `[-ts, te]`, plus its partial
/// derivatives with respect to `ps` and `pe`.
pub(crate) fn diou_from_offsets(ps: f64, pe: f64, ts: f64, te: f64) -> (f64, f64, f64) {
    let (s1, e1, s2, e2) = (-ps, pe, -ts, te);
    let iw = e1.min(e2) - s1.max(s2);
    let inter = iw.max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    let iou = inter / union;
    let cw = e1.max(e2) - s1.min(s2);
    let rho = 0.5 * (s1 + e1) - 0.5 * (s2 + e2);
    let loss = 1.0 - iou + rho * rho / (cw * cw);

    let active = if iw > 0.0 { 1.0 } else { 0.0 };
    let dinter_de1 = active * if e1 < e2 { 1.0 } else { 0.0 };
    let dinter_ds1 = -active * if s1 > s2 { 1.0 } else { 0.0 };
    let dunion_de1 = 1.0 - dinter_de1;
    let dunion_ds1 = -1.0 - dinter_ds1;
    let diou_de1 = (dinter_de1 * union - inter * dunion_de1) / (union * union);
    let diou_ds1 = (dinter_ds1 * union - inter * dunion_ds1) / (union * union);
    let dcw_de1 = if e1 > e2 { 1.0 } else { 0.0 };
    let dcw_ds1 = if s1 < s2 { -1.0 } else { 0.0 };
    let pen = |dcw: f64| 2.0 * rho * 0.5 / (cw * cw) - 2.0 * rho * rho * dcw / (cw * cw * cw);
    let dl_de1 = -diou_de1 + pen(dcw_de1);
    let dl_ds1 = -diou_ds1 + pen(dcw_ds1);
    // s1 = -ps
    (loss, -dl_ds1, dl_de1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.5..1.5))
    }

    /// Checks d(sum(w .* f(x)))/dx against central differences for a graph
    /// built by `build` from a single input leaf.
    fn check_unary(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = build(&mut g, xv);
        let w = rand_matrix(&mut rng, g.value(y).rows(), g.value(y).cols());
        let wv = g.leaf(w.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));

        let eval = |m: Matrix| {
            let mut g = Graph::new();
            let xv = g.leaf(m);
            let y = build(&mut g, xv);
            g.value(y).zip_map(&w, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for k in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5 || (a - fd).abs() < 1e-9, "entry {k}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 5, 4);
        check_unary(x.clone(), |g, v| g.exp(v));
        check_unary(x.clone(), |g, v| g.square(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.softplus(v));
        check_unary(x.clone(), |g, v| g.gelu(v));
        check_unary(x.clone(), |g, v| g.transpose(v));
        check_unary(x.clone(), |g, v| g.softmax_rows(v));
        check_unary(x.clone(), |g, v| g.max_pool2(v));
        check_unary(x.clone(), |g, v| g.im2col3(v));
        check_unary(x.clone(), |g, v| g.select_rows(v, vec![3, 0, 3]));
        check_unary(x.clone(), |g, v| g.row_sum(v));
        check_unary(x.clone(), |g, v| g.l2_normalize_rows(v));
        check_unary(x.clone(), |g, v| g.scale(v, -2.5));
        check_unary(x.clone(), |g, v| g.matmul_nt(v, v));
        check_unary(x.clone(), |g, v| g.matmul_t(v, true, v, false));
        let targets = Matrix::from_fn(5, 4, |i, j| if (i + j) % 3 == 0 { 1.0 } else { 0.0 });
        check_unary(x.clone(), move |g, v| g.focal(v, targets.clone(), 0.25, 2.0));
    }

    #[test]
    fn binary_and_broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(&mut rng, 4, 3);
        let other = rand_matrix(&mut rng, 4, 3);
        let row = rand_matrix(&mut rng, 1, 3);
        let col = rand_matrix(&mut rng, 4, 1);
        let gain = rand_matrix(&mut rng, 1, 3);
        let denom = other.map(|v| v.abs() + 0.5);
        let o = other.clone();
        check_unary(x.clone(), move |g, v| {
            let b = g.leaf(o.clone());
            let s = g.add(v, b);
            let d = g.sub(s, v);
            let m = g.mul(d, v);
            g.sub(m, b)
        });
        check_unary(x.clone(), move |g, v| {
            let b = g.leaf(denom.clone());
            let q = g.div(v, b);
            g.div(b, q)
        });
        let r = row.clone();
        check_unary(row.clone(), move |g, v| {
            let a = g.leaf(x.clone());
            g.add_row(a, v)
        });
        check_unary(col.clone(), move |g, v| {
            let a = g.leaf(other.clone());
            g.scale_rows(a, v)
        });
        check_unary(rand_matrix(&mut rng, 4, 3), move |g, v| {
            let ga = g.leaf(gain.clone());
            let b = g.leaf(r.clone());
            g.layer_norm(v, ga, b)
        });
        let x2 = rand_matrix(&mut rng, 4, 3);
        check_unary(rand_matrix(&mut rng, 1, 3), move |g, v| {
            let a = g.leaf(x2.clone());
            let b = g.leaf(Matrix::filled(1, 3, 0.1));
            g.layer_norm(a, v, b)
        });
        let x3 = rand_matrix(&mut rng, 2, 3);
        check_unary(rand_matrix(&mut rng, 3, 3), move |g, v| {
            let a = g.leaf(x3.clone());
            g.concat_rows(vec![a, v, a])
        });
    }

    #[test]
    fn diou_and_contrastive_match_finite_differences() {
        let target = Matrix::from_rows(&[[1.0, 2.0], [0.5, 3.0], [2.0, 0.25]]).unwrap();
        let pred = Matrix::from_rows(&[[1.3, 1.1], [0.2, 3.9], [4.0, 0.7]]).unwrap();
        check_unary(pred, move |g, v| g.diou(v, target.clone()));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = rand_matrix(&mut rng, 4, 4);
        let anchors = vec![
            ContrastiveAnchor { row: 0, positives: vec![1], negatives: vec![2, 3] },
            ContrastiveAnchor { row: 1, positives: vec![0], negatives: vec![2, 3] },
            ContrastiveAnchor { row: 2, positives: vec![0, 1], negatives: vec![3] },
        ];
        check_unary(sim, move |g, v| {
            let l = g.contrastive(v, anchors.clone());
            g.scale(l, 3.0)
        });
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn max_pool_odd_length() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::column(&[1.0, 4.0, 2.0, 0.0, 5.0]));
        let p = g.max_pool2(x);
        assert_eq!(g.value(p).data(), &[4.0, 2.0, 5.0]);
    }

    #[test]
    fn contrastive_examples() {
        // one positive, no negatives
        assert_eq!(contrastive_anchor_loss(&[0.0, 0.3], &[1], &[]), 0.0);
        // equal similarity positive and negative
        let l = contrastive_anchor_loss(&[0.0, 0.7, 0.7], &[1], &[2]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
