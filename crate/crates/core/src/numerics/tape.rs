//! Reverse-mode differentiation over a per-step tape.
//!
//! Nodes are appended in evaluation order and only ever reference earlier
//! nodes, so the recorded graph is acyclic by construction. A tape is built
//! for one forward pass, differentiated once, and dropped.

use super::kernels::{self, check_finite};
use super::scalar::{gemm_into, MatView};
use super::Scalar;
use crate::{MtpError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch geometry for fused causal self-attention over `[batch * seq, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    /// Keys that may be attended to (false on padding), length `batch * seq`.
    pub key_valid: Vec<bool>,
}

impl AttnLayout {
    pub fn dense(batch: usize, seq: usize, n_heads: usize) -> Self {
        AttnLayout {
            batch,
            seq,
            n_heads,
            key_valid: vec![true; batch * seq],
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    differentiated: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(MtpError::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Drops accumulated gradients so the tape may be differentiated again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != value.len() || numel == 0 {
            return Err(MtpError::shape(
                "leaf",
                format!("shape {shape:?} vs {} values", value.len()),
            ));
        }
        self.push("leaf", shape, value, requires_grad, Op::Leaf)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `op(a) @ op(b)` for 2-D operands, `op` optionally transposing.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ra, ca) = two_d("matmul", self.shape(a))?;
        let (rb, cb) = two_d("matmul", self.shape(b))?;
        let va = MatView::new(self.value(a), ra, ca, trans_a);
        let vb = MatView::new(self.value(b), rb, cb, trans_b);
        if va.cols != vb.rows {
            return Err(MtpError::shape(
                "matmul",
                format!("[{}x{}] @ [{}x{}]", va.rows, va.cols, vb.rows, vb.cols),
            ));
        }
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![T::zero(); m * n];
        gemm_into(va, vb, &mut out, false, false);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MtpError::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("add", shape, out, rg, Op::Add(a, b))
    }

    /// Adds a length-`d` row vector to every row of `[n, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = last_dim(self.shape(a));
        if self.nodes[row.0].value.len() != d {
            return Err(MtpError::shape(
                "add_row",
                format!("row of {} vs last extent {d}", self.nodes[row.0].value.len()),
            ));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(d) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x = *x + y;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        self.push("add_row", shape, out, rg, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MtpError::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("mul", shape, out, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("scale", shape, out, rg, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("gelu", shape, out, rg, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(MtpError::shape(
                "layer_norm",
                format!(
                    "gain/bias {}/{} vs last extent {d}",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            ));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_rows(self.value(x), d, self.value(gain), self.value(bias), eps);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            shape,
            y,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(self.shape(a));
        let out = kernels::softmax_rows(self.value(a), d);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("softmax", shape, out, rg, Op::Softmax(a))
    }

    /// Fused multi-head causal self-attention on `[batch*seq, hidden]`
    /// projections. Scores and the weighted value sum accumulate in f64.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let (rows, hidden) = two_d("attention", self.shape(q))?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(MtpError::shape("attention", "q/k/v shapes differ"));
        }
        let AttnLayout {
            batch,
            seq,
            n_heads,
            ref key_valid,
        } = *layout;
        if rows != batch * seq || key_valid.len() != rows || n_heads == 0 || hidden % n_heads != 0 {
            return Err(MtpError::shape(
                "attention",
                format!("rows {rows}, hidden {hidden} vs layout {batch}x{seq}, {n_heads} heads"),
            ));
        }
        let hd = hidden / n_heads;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); rows * hidden];
        let mut probs = vec![0.0f64; batch * n_heads * seq * seq];
        let mut qh = vec![0.0f64; seq * hd];
        let mut kh = vec![0.0f64; seq * hd];
        let mut vh = vec![0.0f64; seq * hd];
        let mut oh = vec![0.0f64; seq * hd];
        for b in 0..batch {
            let valid = &key_valid[b * seq..(b + 1) * seq];
            for h in 0..n_heads {
                let off = h * hd;
                gather_head(qv, b, seq, hidden, off, hd, &mut qh);
                gather_head(kv, b, seq, hidden, off, hd, &mut kh);
                gather_head(vv, b, seq, hidden, off, hd, &mut vh);
                let p = &mut probs[(b * n_heads + h) * seq * seq..][..seq * seq];
                gemm_into(
                    MatView::new(&qh, seq, hd, false),
                    MatView::new(&kh, seq, hd, true),
                    p,
                    false,
                    false,
                );
                for (i, row) in p.chunks_exact_mut(seq).enumerate() {
                    causal_softmax_row(row, i, valid, inv_sqrt);
                }
                gemm_into(
                    MatView::new(p, seq, seq, false),
                    MatView::new(&vh, seq, hd, false),
                    &mut oh,
                    false,
                    false,
                );
                for t in 0..seq {
                    let dst = &mut out[(b * seq + t) * hidden + off..][..hd];
                    for (d, &x) in dst.iter_mut().zip(&oh[t * hd..(t + 1) * hd]) {
                        *d = T::from_f64(x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            vec![rows, hidden],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
        )
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = two_d("embedding", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(MtpError::OutOfRange {
                what: "token id",
                detail: format!("{bad} >= {vocab}"),
            });
        }
        if ids.is_empty() {
            return Err(MtpError::shape("embedding", "no ids"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean masked cross-entropy of `[n, V]` logits. Also returns the
    /// per-row losses (0 on unmasked rows), which carry no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, Vec<f64>)> {
        let (n, vocab) = two_d("cross_entropy", self.shape(logits))?;
        if targets.len() != n || mask.len() != n {
            return Err(MtpError::shape(
                "cross_entropy",
                format!("{n} rows vs {} targets / {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some((&t, _)) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab) {
            return Err(MtpError::OutOfRange {
                what: "target id",
                detail: format!("{t} >= {vocab}"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(MtpError::DegenerateBatch("mask selects no positions".into()));
        }
        let (rows, probs) = kernels::cross_entropy_rows(self.value(logits), vocab, targets, mask);
        let mean = rows.iter().sum::<f64>() / count as f64;
        let rg = self.rg(&[logits]);
        let var = self.push(
            "cross_entropy",
            vec![1],
            vec![T::from_f64(mean)],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )?;
        Ok((var, rows))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().map(|x| x.as_f64()).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![T::from_f64(s)], rg, Op::Sum(a))
    }

    /// `Σ_l weights[l] * inputs[l]` for same-shape inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if self.value(weights).len() != inputs.len() || inputs.is_empty() {
            return Err(MtpError::shape(
                "weighted_sum",
                format!("{} weights for {} inputs", self.value(weights).len(), inputs.len()),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        if inputs.iter().any(|&x| self.shape(x) != shape.as_slice()) {
            return Err(MtpError::shape("weighted_sum", "inputs differ in shape"));
        }
        let w: Vec<f64> = self.value(weights).iter().map(|x| x.as_f64()).collect();
        let n = self.value(inputs[0]).len();
        let mut acc = vec![0.0f64; n];
        for (&x, &wl) in inputs.iter().zip(&w) {
            for (a, &v) in acc.iter_mut().zip(self.value(x)) {
                *a += wl * v.as_f64();
            }
        }
        let out = acc.into_iter().map(T::from_f64).collect();
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        self.push(
            "weighted_sum",
            shape,
            out,
            rg,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Populates gradients of every `requires_grad` node reachable from the
    /// scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.differentiated {
            return Err(MtpError::BackwardTwice);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(MtpError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        check_finite("backward root", &self.nodes[root.0].value)?;
        self.differentiated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(nodes, grads, node, &g)?;
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc_grad<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    node: &Node<T>,
    g: &[T],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ra, ca) = two_d("matmul", &nodes[a.0].shape)?;
            let (rb, cb) = two_d("matmul", &nodes[b.0].shape)?;
            let va = MatView::new(&nodes[a.0].value, ra, ca, *trans_a);
            let vb = MatView::new(&nodes[b.0].value, rb, cb, *trans_b);
            let gv = MatView::new(g, va.rows, vb.cols, false);
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                gemm_into(gv, vb.t(), ga, *trans_a, true);
            }
            if let Some(gb) = acc_grad(nodes, grads, *b) {
                gemm_into(va.t(), gv, gb, *trans_b, true);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = acc_grad(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gr) = acc_grad(nodes, grads, *row) {
                let d = gr.len();
                let mut acc = vec![0.0f64; d];
                for chunk in g.chunks_exact(d) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &y)| *a += y.as_f64());
                }
                gr.iter_mut()
                    .zip(acc)
                    .for_each(|(x, a)| *x = *x + T::from_f64(a));
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                let bv = &nodes[b.0].value;
                for ((x, &gg), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *x = *x + gg * y;
                }
            }
            if let Some(gb) = acc_grad(nodes, grads, *b) {
                let av = &nodes[a.0].value;
                for ((x, &gg), &y) in gb.iter_mut().zip(g).zip(av) {
                    *x = *x + gg * y;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *c);
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                let av = &nodes[a.0].value;
                for ((x, &gg), &inp) in ga.iter_mut().zip(g).zip(av) {
                    *x = *x + gg * kernels::gelu_grad(inp);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.len();
            let gvals = &nodes[gain.0].value;
            if let Some(gg) = acc_grad(nodes, grads, *gain) {
                let mut acc = vec![0.0f64; d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        acc[c] += gr[c].as_f64() * xr[c].as_f64();
                    }
                }
                gg.iter_mut()
                    .zip(acc)
                    .for_each(|(a, v)| *a = *a + T::from_f64(v));
            }
            if let Some(gb) = acc_grad(nodes, grads, *bias) {
                let mut acc = vec![0.0f64; d];
                for gr in g.chunks_exact(d) {
                    acc.iter_mut().zip(gr).for_each(|(a, &v)| *a += v.as_f64());
                }
                gb.iter_mut()
                    .zip(acc)
                    .for_each(|(a, v)| *a = *a + T::from_f64(v));
            }
            if let Some(gx) = acc_grad(nodes, grads, *x) {
                let mut dxhat = vec![0.0f64; d];
                for (r, (gr, xr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..d {
                        dxhat[c] = gr[c].as_f64() * gvals[c].as_f64();
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c].as_f64();
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    let rs = rstd[r].as_f64();
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for c in 0..d {
                        let v = rs * (dxhat[c] - mean_d - xr[c].as_f64() * mean_dx);
                        dst[c] = dst[c] + T::from_f64(v);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                let d = last_dim(&node.shape);
                for ((dst, yr), gr) in ga
                    .chunks_exact_mut(d)
                    .zip(node.value.chunks_exact(d))
                    .zip(g.chunks_exact(d))
                {
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(y, gg)| y.as_f64() * gg.as_f64())
                        .sum();
                    for c in 0..d {
                        let v = yr[c].as_f64() * (gr[c].as_f64() - dot);
                        dst[c] = dst[c] + T::from_f64(v);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, *q, *k, *v, layout, probs, g),
        Op::Embedding { table, ids } => {
            if let Some(gt) = acc_grad(nodes, grads, *table) {
                let d = nodes[table.0].shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if let Some(gl) = acc_grad(nodes, grads, *logits) {
                let vocab = nodes[logits.0].shape[1];
                let scale = g[0].as_f64() / *count as f64;
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    let pr = &probs[r * vocab..(r + 1) * vocab];
                    for c in 0..vocab {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dst[c] = dst[c] + T::from_f64((pr[c].as_f64() - onehot) * scale);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc_grad(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
        }
        Op::WeightedSum { weights, inputs } => {
            let w = &nodes[weights.0].value;
            for (l, &x) in inputs.iter().enumerate() {
                if let Some(gx) = acc_grad(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y * w[l]);
                }
            }
            if let Some(gw) = acc_grad(nodes, grads, *weights) {
                for (l, &x) in inputs.iter().enumerate() {
                    let dot: f64 = nodes[x.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    gw[l] = gw[l] + T::from_f64(dot);
                }
            }
        }
    }
    Ok(())
}

/// Copies head `off..off+hd` of batch row `b` into a contiguous f64 buffer.
fn gather_head<T: Scalar>(src: &[T], b: usize, seq: usize, hidden: usize, off: usize, hd: usize, dst: &mut [f64]) {
    for t in 0..seq {
        let row = &src[(b * seq + t) * hidden + off..][..hd];
        for (d, &x) in dst[t * hd..(t + 1) * hd].iter_mut().zip(row) {
            *d = x.as_f64();
        }
    }
}

/// Turns raw scores of query `i` into probabilities over visible keys
/// `j <= i`; every other entry becomes 0. A row with no visible key is all 0.
fn causal_softmax_row(row: &mut [f64], i: usize, valid: &[bool], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..=i {
        if valid[j] {
            row[j] *= scale;
            max = max.max(row[j]);
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut denom = 0.0;
    for j in 0..=i {
        if valid[j] {
            row[j] = (row[j] - max).exp();
            denom += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    for x in &mut row[..=i] {
        *x /= denom;
    }
    row[i + 1..].fill(0.0);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    q: Var,
    k: Var,
    v: Var,
    layout: &AttnLayout,
    probs: &[f64],
    g: &[T],
) {
    let hidden = nodes[q.0].shape[1];
    let AttnLayout {
        batch, seq, n_heads, ..
    } = *layout;
    let hd = hidden / n_heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let n = qv.len();
    let mut dq = vec![0.0f64; n];
    let mut dk = vec![0.0f64; n];
    let mut dv = vec![0.0f64; n];
    let mut qh = vec![0.0f64; seq * hd];
    let mut kh = vec![0.0f64; seq * hd];
    let mut vh = vec![0.0f64; seq * hd];
    let mut gh = vec![0.0f64; seq * hd];
    let mut ds = vec![0.0f64; seq * seq];
    let mut dqh = vec![0.0f64; seq * hd];
    let mut dkh = vec![0.0f64; seq * hd];
    let mut dvh = vec![0.0f64; seq * hd];
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * hd;
            gather_head(qv, b, seq, hidden, off, hd, &mut qh);
            gather_head(kv, b, seq, hidden, off, hd, &mut kh);
            gather_head(vv, b, seq, hidden, off, hd, &mut vh);
            gather_head(g, b, seq, hidden, off, hd, &mut gh);
            let p = &probs[(b * n_heads + h) * seq * seq..][..seq * seq];
            // dP = dO V^T, then dS = P * (dP - rowsum(P * dP)) / sqrt(hd)
            gemm_into(
                MatView::new(&gh, seq, hd, false),
                MatView::new(&vh, seq, hd, true),
                &mut ds,
                false,
                false,
            );
            for (dsr, pr) in ds.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pj) in dsr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot) * inv_sqrt;
                }
            }
            let dsv = MatView::new(&ds, seq, seq, false);
            gemm_into(dsv, MatView::new(&kh, seq, hd, false), &mut dqh, false, false);
            gemm_into(dsv.t(), MatView::new(&qh, seq, hd, false), &mut dkh, false, false);
            gemm_into(
                MatView::new(p, seq, seq, true),
                MatView::new(&gh, seq, hd, false),
                &mut dvh,
                false,
                false,
            );
            for (full, head) in [(&mut dq, &dqh), (&mut dk, &dkh), (&mut dv, &dvh)] {
                for t in 0..seq {
                    let dst = &mut full[(b * seq + t) * hidden + off..][..hd];
                    for (d, &x) in dst.iter_mut().zip(&head[t * hd..(t + 1) * hd]) {
                        *d += x;
                    }
                }
            }
        }
    }
    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gx) = acc_grad(nodes, grads, var) {
            gx.iter_mut().zip(d).for_each(|(a, x)| *a = *a + T::from_f64(x));
        }
    }
}
