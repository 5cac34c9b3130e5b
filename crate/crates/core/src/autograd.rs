//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable parameters or constants; gradients are only materialised for
//! nodes that (transitively) depend on a trainable leaf, but they still flow
//! *through* constant weights, which is what lets adapters sitting upstream
//! of frozen layers learn.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    MeanGroups(Var, usize),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        offsets: Vec<usize>,
    },
    Gather(Var, Vec<usize>),
    Assemble {
        head: Var,
        tail: Var,
        seq_len: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Target>,
        probs: Vec<Vec<f64>>,
    },
    CosineRows(Var, Var),
    NormalizeRows(Var),
    Transpose(Var),
    Sum(Var),
}

/// One supervised position of a [`Graph::cross_entropy`] call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the leaf's shape when nothing reached it.
    pub fn take(&mut self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = graph.value(v).shape();
            Tensor::zeros(r, c)
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width");
        let mut value = self.value(x).clone();
        let cols = value.cols();
        let bias_row = b.data().to_vec();
        for chunk in value.data_mut().chunks_exact_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&bias_row) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mask shape");
        let data = xv.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::MulConst(x, mask), ng)
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            0.5 * v * (1.0 + (GELU_C * (v + 0.044_715 * v * v * v)).tanh())
        });
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols, "layer norm width");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over a batch of equal-length
    /// sequences stacked row-wise (`batch·seq_len` rows each).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert!(seq_len > 0 && rows % seq_len == 0, "rows must be a multiple of seq_len");
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let t = seq_len;
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![0.0; t];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv.row(b * t + i)[off..off + dh];
                    let upto = if causal { i + 1 } else { t };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(upto) {
                        let kj = &kv.row(b * t + j)[off..off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut().take(upto) {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let p = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    for j in 0..upto {
                        p[j] = scores[j] / denom;
                    }
                    let o = &mut out.row_mut(b * t + i)[off..off + dh];
                    for (j, &pj) in p.iter().enumerate().take(upto) {
                        let vj = &vv.row(b * t + j)[off..off + dh];
                        for c in 0..dh {
                            o[c] += pj * vj[c];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            },
            ng,
        )
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(group > 0 && rows % group == 0, "rows must be a multiple of group");
        let n = rows / group;
        let mut out = Tensor::zeros(n, cols);
        for g in 0..n {
            let o = out.row_mut(g);
            for r in 0..group {
                for (a, b) in o.iter_mut().zip(xv.row(g * group + r)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= group as f64;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanGroups(x, group), ng)
    }

    /// Softmax of an `N×1` column within each segment `offsets[i]..offsets[i+1]`.
    pub fn segment_softmax(&mut self, x: Var, offsets: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "segment softmax expects a column");
        assert_eq!(*offsets.last().expect("offsets"), xv.rows());
        let mut out = Tensor::zeros(xv.rows(), 1);
        for w in offsets.windows(2) {
            let seg = &xv.data()[w[0]..w[1]];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = seg.iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (i, e) in exps.iter().enumerate() {
                out.data_mut()[w[0] + i] = e / denom;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentSoftmax(x, offsets), ng)
    }

    /// Per-segment weighted row sum: `out[b] = Σ_{i∈b} weights[i]·values[i]`.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, offsets: Vec<usize>) -> Var {
        let (wv, vv) = (self.value(weights), self.value(values));
        assert_eq!(wv.cols(), 1);
        assert_eq!(wv.rows(), vv.rows());
        assert_eq!(*offsets.last().expect("offsets"), vv.rows());
        let mut out = Tensor::zeros(offsets.len() - 1, vv.cols());
        for (b, w) in offsets.windows(2).enumerate() {
            let o = out.row_mut(b);
            for i in w[0]..w[1] {
                let a = wv.data()[i];
                for (x, y) in o.iter_mut().zip(vv.row(i)) {
                    *x += a * y;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(values);
        self.push(
            out,
            Op::SegmentWeightedSum {
                weights,
                values,
                offsets,
            },
            ng,
        )
    }

    /// Row lookup (embedding tables).
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather(table, ids), ng)
    }

    /// Interleaves one `head` row in front of each block of `seq_len-1` `tail` rows.
    pub fn assemble(&mut self, head: Var, tail: Var, seq_len: usize) -> Var {
        let (hv, tv) = (self.value(head), self.value(tail));
        let batch = hv.rows();
        assert!(seq_len >= 1);
        assert_eq!(tv.rows(), batch * (seq_len - 1), "tail rows");
        assert_eq!(hv.cols(), tv.cols());
        let mut out = Tensor::zeros(batch * seq_len, hv.cols());
        for b in 0..batch {
            out.row_mut(b * seq_len).copy_from_slice(hv.row(b));
            for j in 1..seq_len {
                out.row_mut(b * seq_len + j)
                    .copy_from_slice(tv.row(b * (seq_len - 1) + j - 1));
            }
        }
        let ng = self.ng(head) || self.ng(tail);
        self.push(
            out,
            Op::Assemble {
                head,
                tail,
                seq_len,
            },
            ng,
        )
    }

    /// Weighted softmax cross-entropy summed over `targets`; a `1×1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Target>) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for t in &targets {
            let row = lv.row(t.row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let log_p = row[t.class] - max - denom.ln();
            total -= t.weight * log_p;
            probs.push(exps.iter().map(|e| e / denom).collect());
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::filled(1, 1, total),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Cosine similarity of the row vector `a` with each row of `m`; an `R×1` column.
    ///
    /// Panics on zero-norm inputs; callers validate first.
    pub fn cosine_rows(&mut self, a: Var, m: Var) -> Var {
        let (av, mv) = (self.value(a), self.value(m));
        assert_eq!(av.rows(), 1);
        assert_eq!(av.cols(), mv.cols());
        let na = av.norm();
        assert!(na > 0.0, "cosine of a zero vector");
        let mut out = Tensor::zeros(mv.rows(), 1);
        for r in 0..mv.rows() {
            let row = mv.row(r);
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(nr > 0.0, "cosine of a zero vector");
            let dot: f64 = av.data().iter().zip(row).map(|(x, y)| x * y).sum();
            out.data_mut()[r] = dot / (na * nr);
        }
        let ng = self.ng(a) || self.ng(m);
        self.push(out, Op::CosineRows(a, m), ng)
    }

    /// Each row scaled to unit L2 norm. Panics on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "normalizing a zero row");
            row.iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.ng(x);
        self.push(out, Op::NormalizeRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::filled(1, 1, s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from `loss` (seeded with ones of its shape).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(loss).shape();
        grads[loss.0] = Some(Tensor::filled(r, c, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddBias(x, bias) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, b) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.scale(*s));
                }
            }
            Op::MulConst(x, mask) => {
                if self.ng(*x) {
                    let data = g.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
                    accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"));
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| {
                            let inner = GELU_C * (v + 0.044_715 * v * v * v);
                            let t = inner.tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
                            gy * d
                        })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), data).expect("shape"));
                }
            }
            Op::Tanh(x) => {
                if self.ng(*x) {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gy)| gy * (1.0 - y * y))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for c in 0..cols {
                            dg.data_mut()[c] += gr[c] * xr[c];
                            db.data_mut()[c] += gr[c];
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xr[c];
                        }
                        let o = dx.row_mut(r);
                        for c in 0..cols {
                            o[c] = inv_std[r] / n * (n * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.shape();
                let (heads, t) = (*heads, *seq_len);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = rows / t;
                let mut dq = Tensor::zeros(rows, d);
                let mut dk = Tensor::zeros(rows, d);
                let mut dv = Tensor::zeros(rows, d);
                let mut dp = vec![0.0; t];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..t {
                            let upto = if *causal { i + 1 } else { t };
                            let p = &probs[((b * heads + h) * t + i) * t..][..t];
                            let gi = &g.row(b * t + i)[off..off + dh];
                            let mut dot_pdp = 0.0;
                            for j in 0..upto {
                                let vj = &vv.row(b * t + j)[off..off + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot_pdp += p[j] * dp[j];
                                let dvj = &mut dv.row_mut(b * t + j)[off..off + dh];
                                for c in 0..dh {
                                    dvj[c] += p[j] * gi[c];
                                }
                            }
                            for j in 0..upto {
                                let ds = p[j] * (dp[j] - dot_pdp) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(b * t + j)[off..off + dh];
                                let dqi = &mut dq.row_mut(b * t + i)[off..off + dh];
                                for c in 0..dh {
                                    dqi[c] += ds * kj[c];
                                }
                                let qi = &qv.row(b * t + i)[off..off + dh];
                                let dkj = &mut dk.row_mut(b * t + j)[off..off + dh];
                                for c in 0..dh {
                                    dkj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
                if self.ng(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.ng(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::MeanGroups(x, group) => {
                if self.ng(*x) {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    let inv = 1.0 / *group as f64;
                    for r in 0..rows {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *a = b * inv;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::NormalizeRows(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (y, gy) = (node.value.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in dx.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o = (gi - yi * dot) / n;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.transpose());
                }
            }
            Op::SegmentSoftmax(x, offsets) => {
                if self.ng(*x) {
                    let p = node.value.data();
                    let gy = g.data();
                    let mut dx = Tensor::zeros(p.len(), 1);
                    for w in offsets.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|i| p[i] * gy[i]).sum();
                        for i in w[0]..w[1] {
                            dx.data_mut()[i] = p[i] * (gy[i] - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                offsets,
            } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                if self.ng(*weights) {
                    let mut dw = Tensor::zeros(wv.rows(), 1);
                    for (b, w) in offsets.windows(2).enumerate() {
                        for i in w[0]..w[1] {
                            dw.data_mut()[i] = g.row(b).iter().zip(vv.row(i)).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *weights, dw);
                }
                if self.ng(*values) {
                    let mut dvals = Tensor::zeros(vv.rows(), vv.cols());
                    for (b, w) in offsets.windows(2).enumerate() {
                        for i in w[0]..w[1] {
                            let a = wv.data()[i];
                            for (x, y) in dvals.row_mut(i).iter_mut().zip(g.row(b)) {
                                *x = a * y;
                            }
                        }
                    }
                    accumulate(grads, *values, dvals);
                }
            }
            Op::Gather(table, ids) => {
                if self.ng(*table) {
                    let (rows, cols) = self.value(*table).shape();
                    let mut dt = Tensor::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Assemble {
                head,
                tail,
                seq_len,
            } => {
                let t = *seq_len;
                let batch = g.rows() / t;
                let cols = g.cols();
                if self.ng(*head) {
                    let mut dh = Tensor::zeros(batch, cols);
                    for b in 0..batch {
                        dh.row_mut(b).copy_from_slice(g.row(b * t));
                    }
                    accumulate(grads, *head, dh);
                }
                if self.ng(*tail) {
                    let mut dt = Tensor::zeros(batch * (t - 1), cols);
                    for b in 0..batch {
                        for j in 1..t {
                            dt.row_mut(b * (t - 1) + j - 1).copy_from_slice(g.row(b * t + j));
                        }
                    }
                    accumulate(grads, *tail, dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.ng(*logits) {
                    let (rows, cols) = self.value(*logits).shape();
                    let up = g.data()[0];
                    let mut dl = Tensor::zeros(rows, cols);
                    for (t, p) in targets.iter().zip(probs) {
                        let row = dl.row_mut(t.row);
                        for c in 0..cols {
                            let onehot = if c == t.class { 1.0 } else { 0.0 };
                            row[c] += up * t.weight * (p[c] - onehot);
                        }
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::CosineRows(a, m) => {
                let (av, mv) = (self.value(*a), self.value(*m));
                let na = av.norm();
                let cos = node.value.data();
                let mut da = Tensor::zeros(1, av.cols());
                let mut dm = Tensor::zeros(mv.rows(), mv.cols());
                for r in 0..mv.rows() {
                    let row = mv.row(r);
                    let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.data()[r];
                    for c in 0..av.cols() {
                        da.data_mut()[c] +=
                            gr * (row[c] / (na * nr) - cos[r] * av.data()[c] / (na * na));
                        dm.row_mut(r)[c] =
                            gr * (av.data()[c] / (na * nr) - cos[r] * row[c] / (nr * nr));
                    }
                }
                if self.ng(*a) {
                    accumulate(grads, *a, da);
                }
                if self.ng(*m) {
                    accumulate(grads, *m, dm);
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let (r, c) = self.value(*x).shape();
                    accumulate(grads, *x, Tensor::filled(r, c, g.data()[0]));
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max over entries of `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    /// Checks d(sum(w ⊙ f(x)))/dx against finite differences for a unary op.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let mut rng = seeded_rng(99);
        let probe_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = build(&mut g, xv);
            g.value(y).shape()
        };
        let w = Tensor::randn(probe_shape.0, probe_shape.1, 1.0, &mut rng);
        let loss_of = |g: &mut Graph, y: Var| {
            let prod = g.mul_const(y, w.clone());
            g.sum(prod)
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = build(&mut g, xv);
        let l = loss_of(&mut g, y);
        let mut grads = g.backward(l);
        let analytic = grads.take(&g, xv);
        let numeric = numeric_gradient(&x, 1e-6, |p| {
            let mut g = Graph::new();
            let xv = g.constant(p.clone());
            let y = build(&mut g, xv);
            let l = loss_of(&mut g, y);
            g.scalar(l)
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut seeded_rng(seed))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(|g, x| g.gelu(x), rand(3, 4, 1));
        check(|g, x| g.tanh(x), rand(3, 4, 2));
        check(|g, x| g.scale(x, -2.5), rand(2, 2, 3));
        check(|g, x| g.normalize_rows(x), rand(3, 5, 4));
        check(|g, x| g.transpose(x), rand(2, 3, 5));
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        let w = rand(4, 5, 10);
        let b = rand(1, 5, 11);
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.matmul(x, wv);
                g.add_bias(y, bv)
            },
            rand(3, 4, 12),
        );
        let x = rand(3, 4, 13);
        check(
            move |g, w| {
                let xv = g.constant(x.clone());
                g.matmul(xv, w)
            },
            rand(4, 2, 14),
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let gamma = rand(1, 6, 20);
        let beta = rand(1, 6, 21);
        check(
            move |g, x| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                g.layer_norm(x, gv, bv)
            },
            rand(3, 6, 22),
        );
        let x = rand(3, 6, 23);
        check(
            move |g, gamma| {
                let xv = g.constant(x.clone());
                let bv = g.constant(Tensor::zeros(1, 6));
                g.layer_norm(xv, gamma, bv)
            },
            rand(1, 6, 24),
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        for causal in [false, true] {
            let k = rand(6, 4, 30);
            let v = rand(6, 4, 31);
            check(
                move |g, q| {
                    let kv = g.constant(k.clone());
                    let vv = g.constant(v.clone());
                    g.attention(q, kv, vv, 2, 3, causal)
                },
                rand(6, 4, 32),
            );
            let q = rand(6, 4, 33);
            let v = rand(6, 4, 34);
            check(
                move |g, k| {
                    let qv = g.constant(q.clone());
                    let vv = g.constant(v.clone());
                    g.attention(qv, k, vv, 2, 3, causal)
                },
                rand(6, 4, 35),
            );
            let q = rand(6, 4, 36);
            let k = rand(6, 4, 37);
            check(
                move |g, v| {
                    let qv = g.constant(q.clone());
                    let kv = g.constant(k.clone());
                    g.attention(qv, kv, v, 2, 3, causal)
                },
                rand(6, 4, 38),
            );
        }
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let q = rand(4, 4, 40);
        let k = rand(4, 4, 41);
        let v = rand(4, 4, 42);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let full = g.attention(qv, kv, vv, 2, 4, true);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..4 {
            k2.set(3, c, 100.0);
            v2.set(3, c, -100.0);
        }
        let (qv, kv, vv) = (g.constant(q), g.constant(k2), g.constant(v2));
        let changed = g.attention(qv, kv, vv, 2, 4, true);
        for r in 0..3 {
            assert_eq!(g.value(full).row(r), g.value(changed).row(r));
        }
    }

    #[test]
    fn segment_ops_match_finite_differences() {
        let offsets = vec![0, 2, 5];
        let o2 = offsets.clone();
        check(move |g, x| g.segment_softmax(x, o2.clone()), rand(5, 1, 50));
        let vals = rand(5, 3, 51);
        let o3 = offsets.clone();
        check(
            move |g, w| {
                let vv = g.constant(vals.clone());
                g.segment_weighted_sum(w, vv, o3.clone())
            },
            rand(5, 1, 52),
        );
        let w = rand(5, 1, 53);
        check(
            move |g, v| {
                let wv = g.constant(w.clone());
                g.segment_weighted_sum(wv, v, offsets.clone())
            },
            rand(5, 3, 54),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(|g, x| g.mean_groups(x, 2), rand(4, 3, 60));
        check(|g, t| g.gather(t, vec![2, 0, 2]), rand(3, 4, 61));
        let tail = rand(4, 3, 62);
        check(
            move |g, h| {
                let tv = g.constant(tail.clone());
                g.assemble(h, tv, 3)
            },
            rand(2, 3, 63),
        );
        let m = rand(3, 5, 64);
        check(
            move |g, a| {
                let mv = g.constant(m.clone());
                g.cosine_rows(a, mv)
            },
            rand(1, 5, 65),
        );
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let targets = vec![
            Target { row: 0, class: 2, weight: 0.5 },
            Target { row: 2, class: 0, weight: 0.25 },
        ];
        check(move |g, x| g.cross_entropy(x, targets.clone()), rand(3, 4, 70));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(1, 7));
        let ce = g.cross_entropy(l, vec![Target { row: 0, class: 3, weight: 1.0 }]);
        assert!((g.scalar(ce) - 7f64.ln()).abs() < 1e-12);
    }
}
