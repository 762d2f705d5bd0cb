//! Reverse-mode tape.
//!
//! Operations append nodes in execution order; [`Tape::backward`] replays
//! them in exact reverse order, accumulating gradients additively.

use super::kernels::{self, Exec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        a: Var,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clear all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- primitives -------------------------------------------------------

    /// `a: [.., k] x b: [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(bv.rank() == 2 && bv.shape()[0] == av.last_dim(), "matmul", || {
            format!("{:?} x {:?}", av.shape(), bv.shape())
        })?;
        let (rows, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), rows, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Per-batch product of rank-3 tensors; with `transpose_b` computes `a b^T`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(
            av.rank() == 3 && bv.rank() == 3 && av.shape()[0] == bv.shape()[0],
            "batch_matmul",
            || format!("{:?} x {:?}", av.shape(), bv.shape()),
        )?;
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        check(kb == k, "batch_matmul", || {
            format!("{:?} x {:?}", av.shape(), bv.shape())
        })?;
        let (ad, bd) = (av.data(), bv.data());
        let blocks = crate::parallel::map_range(batch, |i| {
            let ab = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            if transpose_b {
                let bt = kernels::transpose(bb, n, k);
                kernels::matmul_with(Exec::Sequential, ab, &bt, m, k, n)
            } else {
                kernels::matmul_with(Exec::Sequential, ab, bb, m, k, n)
            }
        });
        let value = Tensor::new(&[batch, m, n], blocks.concat())?;
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s (broadcast over
    /// the leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        check(sb.len() <= sa.len() && sa.ends_with(sb), "add", || {
            format!("{sa:?} + {sb:?}")
        })?;
        let len_b = bv.numel();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(len_b) {
            add_into(chunk, bv.data());
        }
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), "mul", || {
            format!("{:?} * {:?}", av.shape(), bv.shape())
        })?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|x| x * c).collect()).unwrap();
        self.push(value, Op::Scale { a, c }, &[a])
    }

    /// `s * a` for a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        check(sv.numel() == 1, "scale_by", || {
            format!("scalar expected, got {:?}", sv.shape())
        })?;
        let c = sv.item();
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(value, Op::ScaleBy { a, s }, &[a, s]))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false).expect("softmax has no shape constraints")
    }

    /// Softmax over the last dimension of `[.., N, N]` scores where row `i`
    /// only sees columns `0..=i`; masked entries are exactly zero.
    pub fn causal_row_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if causal {
            check(
                av.rank() >= 2 && av.shape()[av.rank() - 2] == width,
                "causal_row_softmax",
                || format!("square trailing dims expected, got {:?}", av.shape()),
            )?;
        }
        let mut data = av.data().to_vec();
        for (r, row) in data.chunks_mut(width.max(1)).enumerate() {
            let visible = if causal { r % width + 1 } else { width };
            let (live, masked) = row.split_at_mut(visible);
            let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in live.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in live.iter_mut() {
                *v /= z;
            }
            masked.iter_mut().for_each(|v| *v = 0.0);
        }
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        check(gv.shape() == [d] && bv.shape() == [d], "layer_norm", || {
            format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape())
        })?;
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Rows of `table: [V, d]` selected by `ids`; output shape `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        check(tv.rank() == 2, "embedding", || format!("table {:?}", tv.shape()))?;
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        check(out_shape.iter().product::<usize>() == ids.len(), "embedding", || {
            format!("{} ids for output {:?}", ids.len(), out_shape)
        })?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenate along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat", || "no inputs".into())?;
        let first = self.value(parts[0]);
        let lead = &first.shape()[..first.rank() - 1];
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            check(&v.shape()[..v.rank() - 1] == lead, "concat", || {
                format!("{:?} vs {:?}", first.shape(), v.shape())
            })?;
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Columns `start .. start + len` of the last dimension.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        check(start + len <= w, "slice", || format!("{start}..{} of {w}", start + len))?;
        let mut data = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Slice { a, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let m = lv.last_dim();
        check(lv.rows() == targets.len(), "cross_entropy", || {
            format!("{} rows, {} targets", lv.rows(), targets.len())
        })?;
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= m {
                return Err(Error::TokenOutOfRange { id: t, vocab: m });
            }
            let row = &lv.data()[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * m..(r + 1) * m].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * m..(r + 1) * m] {
                *p /= z;
            }
            total += z.ln() + max - row[t];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every requires-grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Backward(format!("loss must be scalar, has {numel} elements")));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => add_into(acc, &dg),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.wants(*a) {
                    out.push((*a, kernels::matmul_nt(g, bv.data(), rows, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, kernels::matmul_tn(av.data(), g, rows, k, n)));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                let seq = Exec::Sequential;
                if self.wants(*a) {
                    let blocks = crate::parallel::map_range(batch, |bi| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // out = a b^T, b: [n, k]  =>  da = g b
                            kernels::matmul_with(seq, gb, bb, m, n, k)
                        } else {
                            // b: [k, n]  =>  da = g b^T
                            let bt = kernels::transpose(bb, k, n);
                            kernels::matmul_with(seq, gb, &bt, m, n, k)
                        }
                    });
                    out.push((*a, blocks.concat()));
                }
                if self.wants(*b) {
                    let blocks = crate::parallel::map_range(batch, |bi| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // db = g^T a : [n, k]
                            let gt = kernels::transpose(gb, m, n);
                            kernels::matmul_with(seq, &gt, ab, n, m, k)
                        } else {
                            // db = a^T g : [k, n]
                            let at = kernels::transpose(ab, m, k);
                            kernels::matmul_with(seq, &at, gb, k, m, n)
                        }
                    });
                    out.push((*b, blocks.concat()));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let len_b = self.value(*b).numel();
                    let mut db = vec![0.0; len_b];
                    for chunk in g.chunks(len_b) {
                        add_into(&mut db, chunk);
                    }
                    out.push((*b, db));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale { a, c } => {
                out.push((*a, g.iter().map(|x| x * c).collect()));
            }
            Op::ScaleBy { a, s } => {
                let c = self.value(*s).item();
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|x| x * c).collect()));
                }
                if self.wants(*s) {
                    let ds = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    out.push((*s, vec![ds]));
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        add_into(&mut db, gr);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                out.push((
                    *a,
                    g.iter().zip(av).map(|(q, x)| if *x > 0.0 { *q } else { 0.0 }).collect(),
                ));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                out.push((*table, dt));
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let w = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (dr, gr) in da.chunks_mut(w).zip(g.chunks(len)) {
                    dr[*start..*start + len].copy_from_slice(gr);
                }
                out.push((*a, da));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let m = self.value(*logits).last_dim();
                let mut dl = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..m {
                            dl[r * m + j] = probs[r * m + j] * scale;
                        }
                        dl[r * m + t] -= scale;
                    }
                }
                out.push((*logits, dl));
            }
            Op::Sum { a } => {
                out.push((*a, vec![g[0]; self.value(*a).numel()]));
            }
        }
        out
    }
}
