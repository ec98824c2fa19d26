//! Reverse-mode differentiation over a fixed operator set.
//!
//! Every value on the tape is a row-major matrix. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `x[m×n] + row[1×n]` broadcast over rows.
    AddRow(Var, Var),
    /// `x[m×n] ⊙ row[1×n]` broadcast over rows.
    MulRow(Var, Var),
    /// `x[(g·len)×n] + rows[g×n]`, row `i` of `rows` added to group `i`.
    AddGroupRows {
        x: Var,
        rows: Var,
        group_len: usize,
    },
    RepeatRows(Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    RmsSegments {
        x: Var,
        seg: usize,
        inv_rms: Vec<T>,
    },
    Softmax(Var),
    Silu(Var),
    Attention(Box<AttentionSaved<T>>),
    /// `out[b] = Σ_l w[b,l] · layers[b·L + l]`.
    Fuse {
        weights: Var,
        layers: Var,
    },
    Reshape(Var),
    Mse {
        x: Var,
        target: Vec<T>,
    },
    Sum(Var),
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_len: usize,
    k_len: usize,
    scale: T,
    probs: Vec<T>,
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; `requires_grad` makes it a differentiable leaf.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, value.len(), "input shape mismatch");
        self.push(rows, cols, value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        self.input(rows, cols, value, false)
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = set.get(id);
        let (rows, cols) = p.dims2();
        let v = self.push(rows, cols, p.data.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch ({m}x{k} · {k2}x{n})");
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.needs(a) || self.needs(b);
        self.push(m, n, out, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let g = self.needs(a) || self.needs(b);
        self.push(r, c, out, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o += b;
            }
        }
        let g = self.needs(x) || self.needs(row);
        self.push(r, c, out, Op::AddRow(x, row), g)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &s) in chunk.iter_mut().zip(rv) {
                *o *= s;
            }
        }
        let g = self.needs(x) || self.needs(row);
        self.push(r, c, out, Op::MulRow(x, row), g)
    }

    pub fn add_group_rows(&mut self, x: Var, rows: Var, group_len: usize) -> Var {
        let (r, c) = self.dims(x);
        let (g, c2) = self.dims(rows);
        assert_eq!(c, c2, "add_group_rows column mismatch");
        assert_eq!(g * group_len, r, "add_group_rows group mismatch");
        let rv = self.value(rows);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(c).enumerate() {
            let src = &rv[(i / group_len) * c..(i / group_len + 1) * c];
            for (o, &b) in chunk.iter_mut().zip(src) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(rows);
        self.push(r, c, out, Op::AddGroupRows { x, rows, group_len }, ng)
    }

    /// Tiles a `1×n` row into `times×n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(r, 1, "repeat_rows expects a single row");
        let out = self.value(x).repeat(times);
        let g = self.needs(x);
        self.push(times, c, out, Op::RepeatRows(x), g)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let g = self.needs(x);
        self.push(r, c, out, Op::Scale(x, s), g)
    }

    /// Per-row LayerNorm without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        kernels::layer_norm_rows(self.value(x), r, c, T::lit(eps), &mut out, Some(&mut inv_std));
        let g = self.needs(x);
        self.push(r, c, out, Op::LayerNorm { x, inv_std }, g)
    }

    /// RMS-normalizes every contiguous `seg`-wide slice of each row.
    pub fn rms_segments(&mut self, x: Var, seg: usize, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        assert!(seg > 0 && c % seg == 0, "segment width must divide columns");
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r * c / seg);
        kernels::rms_norm_segments(self.value(x), seg, T::lit(eps), &mut out, &mut inv_rms);
        let g = self.needs(x);
        self.push(r, c, out, Op::RmsSegments { x, seg, inv_rms }, g)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        kernels::softmax_rows(&mut out, r, c);
        let g = self.needs(x);
        self.push(r, c, out, Op::Softmax(x), g)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| kernels::silu(v)).collect();
        let g = self.needs(x);
        self.push(r, c, out, Op::Silu(x), g)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Query rows come in groups of `q_len`, key/value rows in groups of
    /// `k_len`; query group `i` attends only to key group `i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_len: usize, k_len: usize) -> Var {
        let (qr, dm) = self.dims(q);
        let (kr, dk) = self.dims(k);
        assert_eq!(self.dims(v), (kr, dk), "key/value shape mismatch");
        assert_eq!(dm, dk, "query/key width mismatch");
        assert!(heads > 0 && dm % heads == 0, "heads must divide width");
        assert!(q_len > 0 && k_len > 0 && qr % q_len == 0 && kr % k_len == 0);
        let groups = qr / q_len;
        assert_eq!(groups, kr / k_len, "query/key group count mismatch");
        let hd = dm / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));

        let block = q_len * k_len;
        let mut probs = vec![T::zero(); groups * heads * block];
        let mut out = vec![T::zero(); qr * dm];
        let dmi = dm as isize;
        for g in 0..groups {
            for h in 0..heads {
                let qo = g * q_len * dm + h * hd;
                let ko = g * k_len * dm + h * hd;
                let p = &mut probs[(g * heads + h) * block..(g * heads + h + 1) * block];
                T::gemm_acc(
                    q_len,
                    hd,
                    k_len,
                    &qv[qo..],
                    dmi,
                    1,
                    &kv[ko..],
                    1,
                    dmi,
                    p,
                    k_len as isize,
                    1,
                );
                for s in p.iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_rows(p, q_len, k_len);
                T::gemm_acc(
                    q_len,
                    k_len,
                    hd,
                    p,
                    k_len as isize,
                    1,
                    &vv[ko..],
                    dmi,
                    1,
                    &mut out[qo..],
                    dmi,
                    1,
                );
            }
        }
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            q_len,
            k_len,
            scale,
            probs,
        };
        self.push(qr, dm, out, Op::Attention(Box::new(saved)), g)
    }

    /// Attention probabilities of the most recent call that produced `out`,
    /// laid out `[group][head][query][key]`.
    pub fn attention_probs(&self, out: Var) -> Option<&[T]> {
        match &self.node(out).op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// Convex combination of layer rows: `weights[B×L]`, `layers[(B·L)×F]` → `[B×F]`.
    pub fn fuse(&mut self, weights: Var, layers: Var) -> Var {
        let (b, l) = self.dims(weights);
        let (bl, f) = self.dims(layers);
        assert_eq!(b * l, bl, "fuse: weights {b}x{l} vs {bl} layer rows");
        let (w, x) = (self.value(weights), self.value(layers));
        let mut out = vec![T::zero(); b * f];
        for i in 0..b {
            let o = &mut out[i * f..(i + 1) * f];
            for j in 0..l {
                let a = w[i * l + j];
                let row = &x[(i * l + j) * f..(i * l + j + 1) * f];
                for (dst, &src) in o.iter_mut().zip(row) {
                    *dst += a * src;
                }
            }
        }
        let g = self.needs(weights) || self.needs(layers);
        self.push(b, f, out, Op::Fuse { weights, layers }, g)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let out = self.value(x).to_vec();
        let g = self.needs(x);
        self.push(rows, cols, out, Op::Reshape(x), g)
    }

    /// Mean squared error against a constant target; a `1×1` node.
    pub fn mse(&mut self, x: Var, target: Vec<T>) -> Var {
        assert_eq!(self.value(x).len(), target.len(), "mse target length");
        let n = T::from_usize(target.len()).unwrap();
        let loss = self
            .value(x)
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let g = self.needs(x);
        self.push(1, 1, vec![loss], Op::Mse { x, target }, g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let g = self.needs(x);
        self.push(1, 1, vec![s], Op::Sum(x), g)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(da) = self.grad_buf(grads, *a) {
                    kernels::matmul_nt_acc(dy, self.value(*b), da, m, n, k);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), dy, db, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        add_into(d, dy);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    add_into(d, dy);
                }
                if let Some(d) = self.grad_buf(grads, *row) {
                    for chunk in dy.chunks(cols) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (dc, gc) in d.chunks_mut(cols).zip(dy.chunks(cols)) {
                        for ((o, &g), &s) in dc.iter_mut().zip(gc).zip(rv) {
                            *o += g * s;
                        }
                    }
                }
                let xv = self.value(*x);
                if let Some(d) = self.grad_buf(grads, *row) {
                    for (gc, xc) in dy.chunks(cols).zip(xv.chunks(cols)) {
                        for ((o, &g), &xx) in d.iter_mut().zip(gc).zip(xc) {
                            *o += g * xx;
                        }
                    }
                }
            }
            Op::AddGroupRows { x, rows: r, group_len } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    add_into(d, dy);
                }
                if let Some(d) = self.grad_buf(grads, *r) {
                    for (i, chunk) in dy.chunks(cols).enumerate() {
                        let g = i / group_len;
                        add_into(&mut d[g * cols..(g + 1) * cols], chunk);
                    }
                }
            }
            Op::RepeatRows(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for chunk in dy.chunks(cols) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (o, &g) in d.iter_mut().zip(dy) {
                        *o += g * *s;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::layer_norm_backward(&node.value, dy, inv_std, cols, d);
                }
            }
            Op::RmsSegments { x, seg, inv_rms } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::rms_norm_segments_backward(&node.value, dy, inv_rms, *seg, d);
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::softmax_backward(&node.value, dy, rows, cols, d);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((o, &g), &v) in d.iter_mut().zip(dy).zip(xv) {
                        *o += g * kernels::silu_grad(v);
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, cols, dy, grads),
            Op::Fuse { weights, layers } => {
                let (b, l) = self.dims(*weights);
                let f = cols;
                let xv = self.value(*layers);
                let wv = self.value(*weights);
                if let Some(dw) = self.grad_buf(grads, *weights) {
                    for i in 0..b {
                        let g = &dy[i * f..(i + 1) * f];
                        for j in 0..l {
                            let row = &xv[(i * l + j) * f..(i * l + j + 1) * f];
                            dw[i * l + j] += g.iter().zip(row).map(|(&a, &c)| a * c).sum::<T>();
                        }
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *layers) {
                    for i in 0..b {
                        let g = &dy[i * f..(i + 1) * f];
                        for j in 0..l {
                            let a = wv[i * l + j];
                            for (o, &gg) in dx[(i * l + j) * f..(i * l + j + 1) * f].iter_mut().zip(g) {
                                *o += a * gg;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    add_into(d, dy);
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = dy[0] * T::lit(2.0) / T::from_usize(target.len()).unwrap();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((o, &a), &b) in d.iter_mut().zip(xv).zip(target) {
                        *o += scale * (a - b);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for o in d.iter_mut() {
                        *o += dy[0];
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, dm: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let (qr, _) = self.dims(s.q);
        let (kr, _) = self.dims(s.k);
        let groups = qr / s.q_len;
        let hd = dm / s.heads;
        let (ql, kl) = (s.q_len, s.k_len);
        let block = ql * kl;
        let dmi = dm as isize;

        let mut dq = self.needs(s.q).then(|| vec![T::zero(); qr * dm]);
        let mut dk = self.needs(s.k).then(|| vec![T::zero(); kr * dm]);
        let mut dv = self.needs(s.v).then(|| vec![T::zero(); kr * dm]);
        let mut dp = vec![T::zero(); block];
        let mut ds = vec![T::zero(); block];

        for g in 0..groups {
            for h in 0..s.heads {
                let qo = g * ql * dm + h * hd;
                let ko = g * kl * dm + h * hd;
                let p = &s.probs[(g * s.heads + h) * block..(g * s.heads + h + 1) * block];
                if let Some(dv) = dv.as_mut() {
                    T::gemm_acc(kl, ql, hd, p, 1, kl as isize, &dy[qo..], dmi, 1, &mut dv[ko..], dmi, 1);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                dp.iter_mut().for_each(|x| *x = T::zero());
                T::gemm_acc(
                    ql,
                    hd,
                    kl,
                    &dy[qo..],
                    dmi,
                    1,
                    &vv[ko..],
                    1,
                    dmi,
                    &mut dp,
                    kl as isize,
                    1,
                );
                ds.iter_mut().for_each(|x| *x = T::zero());
                kernels::softmax_backward(p, &dp, ql, kl, &mut ds);
                for x in ds.iter_mut() {
                    *x *= s.scale;
                }
                if let Some(dq) = dq.as_mut() {
                    T::gemm_acc(
                        ql,
                        kl,
                        hd,
                        &ds,
                        kl as isize,
                        1,
                        &kv[ko..],
                        dmi,
                        1,
                        &mut dq[qo..],
                        dmi,
                        1,
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    T::gemm_acc(
                        kl,
                        ql,
                        hd,
                        &ds,
                        1,
                        kl as isize,
                        &qv[qo..],
                        dmi,
                        1,
                        &mut dk[ko..],
                        dmi,
                        1,
                    );
                }
            }
        }
        for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if let (Some(buf), Some(d)) = (buf, self.grad_buf(grads, var)) {
                add_into(d, &buf);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter, or `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Vec<T>> {
        self.params.get_mut(&id)
    }

    /// Gradient w.r.t. any differentiable node.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dense per-parameter gradients in registration order (zeros where unused).
    pub fn dense(&self, set: &ParamSet<T>) -> Vec<Vec<T>> {
        set.iter()
            .map(|(id, p)| {
                self.param(id)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.data.len()])
            })
            .collect()
    }
}
