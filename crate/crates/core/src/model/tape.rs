//! Reverse-mode differentiation over 2-D tensors.
//!
//! A forward pass appends nodes to the tape, caching whatever the backward
//! rule needs; `backward` seeds a scalar root and accumulates gradients for
//! every node, including parameter leaves. One backward per forward;
//! gradients are owned by the tape and collected per parameter afterwards.

use super::linalg::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A x B
    MatMul(VarId, VarId),
    /// C = A x B^T
    MatMulNt(VarId, VarId),
    /// C = A + row broadcast over A's rows
    AddRow(VarId, VarId),
    /// C = A + B elementwise
    Add(VarId, VarId),
    Scale(VarId, f64),
    /// Per-row layer norm with learnable gain/bias; caches mean and 1/std.
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(VarId),
    SoftmaxRows(VarId),
    SliceCols {
        x: VarId,
        lo: usize,
        hi: usize,
    },
    ConcatCols(Vec<VarId>),
    /// Rows in `indices` replaced by the broadcast `row`.
    ReplaceRows {
        x: VarId,
        row: VarId,
        indices: Vec<usize>,
    },
    /// Output = vstack(row, x).
    PrependRow {
        row: VarId,
        x: VarId,
    },
    SelectRows {
        x: VarId,
        indices: Vec<usize>,
    },
    /// Mean cross-entropy from logits; caches row softmax.
    CrossEntropyMean {
        logits: VarId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    PickElem {
        x: VarId,
        r: usize,
        c: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    /// Parameter slot this leaf binds, if any.
    param: Option<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            param: None,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter slot; its gradient is collected by
    /// `param_grads`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> VarId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].param = Some(slot);
        id
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "bias must be a row vector");
        assert_eq!(x.cols, r.cols, "bias width mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, &b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> VarId {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols as f64;
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut means = Vec::with_capacity(xv.rows);
        let mut inv_stds = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for (c, (o, &v)) in out.row_mut(r).iter_mut().zip(row).enumerate() {
                *o = g.data[c] * ((v - mean) * inv_std) + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for a in v.data.iter_mut() {
            *a = gelu(*a);
        }
        self.push(v, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.row_mut(r) {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, x: VarId, lo: usize, hi: usize) -> VarId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, hi - lo);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[lo..hi]);
        }
        self.push(out, Op::SliceCols { x, lo, hi })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[at..at + pv.cols].copy_from_slice(pv.row(r));
            }
            at += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn replace_rows(&mut self, x: VarId, row: VarId, indices: &[usize]) -> VarId {
        let rv = self.value(row).clone();
        assert_eq!(rv.rows, 1, "replacement must be a row vector");
        let mut v = self.value(x).clone();
        for &i in indices {
            v.row_mut(i).copy_from_slice(&rv.data);
        }
        self.push(
            v,
            Op::ReplaceRows {
                x,
                row,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn prepend_row(&mut self, row: VarId, x: VarId) -> VarId {
        let (rv, xv) = (self.value(row), self.value(x));
        assert_eq!(rv.rows, 1, "prepended row must be a row vector");
        assert_eq!(rv.cols, xv.cols, "prepend width mismatch");
        let mut data = Vec::with_capacity((xv.rows + 1) * xv.cols);
        data.extend_from_slice(&rv.data);
        data.extend_from_slice(&xv.data);
        let v = Tensor::from_vec(xv.rows + 1, xv.cols, data);
        self.push(v, Op::PrependRow { row, x })
    }

    pub fn select_rows(&mut self, x: VarId, indices: &[usize]) -> VarId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(indices.len(), xv.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(xv.row(i));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean cross-entropy between logit rows and integer targets. Produces a
    /// 1x1 scalar node.
    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: &[usize]) -> VarId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut loss = 0.0;
        for r in 0..lv.rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            let log_sum = sum.ln() + max;
            loss += log_sum - row[targets[r]];
            for o in probs.row_mut(r) {
                *o /= sum;
            }
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn pick(&mut self, x: VarId, r: usize, c: usize) -> VarId {
        let v = self.value(x).get(r, c);
        self.push(Tensor::from_vec(1, 1, vec![v]), Op::PickElem { x, r, c })
    }

    fn accum(&mut self, id: VarId, delta: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate on every node
    /// reachable from the root.
    pub fn backward(&mut self, root: VarId) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.nodes[root.0].grad = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // dA = dC x B^T; dB = A^T x dC
                    let da = g.matmul_nt(self.value(b));
                    let db = self.value(a).matmul_tn(&g);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::MatMulNt(a, b) => {
                    // C = A x B^T: dA = dC x B; dB = dC^T x A
                    let da = g.matmul(self.value(b));
                    let db = g.matmul_tn(self.value(a));
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::AddRow(a, row) => {
                    let mut drow = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in drow.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accum(a, g);
                    self.accum(row, drow);
                }
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    d.scale_assign(s);
                    self.accum(a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    inv_std,
                } => {
                    let xv = self.value(x).clone();
                    let gv = self.value(gain).clone();
                    let n = xv.cols as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    let mut dgain = Tensor::zeros(1, xv.cols);
                    let mut dbias = Tensor::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean[r]) * inv_std[r];
                            let dxhat = gr[c] * gv.data[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain.data[c] += gr[c] * xhat;
                            dbias.data[c] += gr[c];
                        }
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean[r]) * inv_std[r];
                            let dxhat = gr[c] * gv.data[c];
                            dx.row_mut(r)[c] = inv_std[r]
                                * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                    self.accum(x, dx);
                    self.accum(gain, dgain);
                    self.accum(bias, dbias);
                }
                Op::Gelu(x) => {
                    let xv = self.value(x).clone();
                    let mut d = g;
                    for (o, &v) in d.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(v);
                    }
                    self.accum(x, d);
                }
                Op::SoftmaxRows(x) => {
                    let p = self.nodes[i].value.clone();
                    let mut dx = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = pr[c] * (gr[c] - inner);
                        }
                    }
                    self.accum(x, dx);
                }
                Op::SliceCols { x, lo, hi } => {
                    let xv_cols = self.value(x).cols;
                    let mut dx = Tensor::zeros(g.rows, xv_cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[lo..hi].copy_from_slice(g.row(r));
                    }
                    self.accum(x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in &parts {
                        let w = self.value(p).cols;
                        let mut dp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        self.accum(p, dp);
                        at += w;
                    }
                }
                Op::ReplaceRows { x, row, indices } => {
                    let mut dx = g.clone();
                    let mut drow = Tensor::zeros(1, g.cols);
                    for &idx in &indices {
                        for (o, &v) in drow.data.iter_mut().zip(dx.row(idx)) {
                            *o += v;
                        }
                        for v in dx.row_mut(idx) {
                            *v = 0.0;
                        }
                    }
                    self.accum(x, dx);
                    self.accum(row, drow);
                }
                Op::PrependRow { row, x } => {
                    let cols = g.cols;
                    let drow = Tensor::from_vec(1, cols, g.row(0).to_vec());
                    let dx = Tensor::from_vec(g.rows - 1, cols, g.data[cols..].to_vec());
                    self.accum(row, drow);
                    self.accum(x, dx);
                }
                Op::SelectRows { x, indices } => {
                    let xv_cols = self.value(x).cols;
                    let xv_rows = self.value(x).rows;
                    let mut dx = Tensor::zeros(xv_rows, xv_cols);
                    for (k, &idx) in indices.iter().enumerate() {
                        for (o, &v) in dx.row_mut(idx).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.accum(x, dx);
                }
                Op::CrossEntropyMean {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.data[0] / targets.len() as f64;
                    let mut d = probs;
                    for (r, &t) in targets.iter().enumerate() {
                        d.row_mut(r)[t] -= 1.0;
                        for v in d.row_mut(r) {
                            *v *= scale;
                        }
                    }
                    self.accum(logits, d);
                }
                Op::PickElem { x, r, c } => {
                    let (rows, cols) = {
                        let xv = self.value(x);
                        (xv.rows, xv.cols)
                    };
                    let mut dx = Tensor::zeros(rows, cols);
                    dx.set(r, c, g.data[0]);
                    self.accum(x, dx);
                }
            }
        }
    }

    /// Collects gradients for parameter leaves into the given slot count;
    /// slots never touched stay zeroed with the provided shapes.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for node in &self.nodes {
            if let (Some(slot), Some(grad)) = (node.param, node.grad.as_ref()) {
                out[slot].add_assign(grad);
            }
        }
        out
    }
}
