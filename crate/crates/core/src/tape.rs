//! Reverse-mode autodiff on a flat tape.
//!
//! Forward calls record one op per node into an append-only arena; values are
//! computed eagerly through the shared kernels. `backward` replays the ops in
//! exact reverse order, so gradient accumulation order is fixed and two runs
//! on identical inputs produce bitwise-identical gradients.
//!
//! Gradient flow is gated per node by `needs_grad`: a node needs a gradient
//! iff it is a leaf of a tensor with `requires_grad` or any of its inputs
//! needs one. Backward never writes to a node without `needs_grad`; every
//! write is appended to an audit list so tests can verify that frozen
//! parameters stay untouched.

use crate::error::Error;
use crate::kernels;
use crate::kernels::pack_head;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TokenBatch};
use crate::Result;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Target id that cross_entropy skips when averaging.
pub const IGNORE_TARGET: u32 = u32::MAX;

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Sum { x: Var },
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, w: Var, inv: Vec<S> },
    Rope { x: Var, heads: usize, head_dim: usize, seq: usize, theta: f64, pos_offset: usize },
    SiluMul { gate: Var, up: Var },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
        scale: S,
        probs: Vec<S>,
    },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<S>, n_valid: usize },
    KlDiv { student: Var, pt: Vec<S>, ps: Vec<S> },
}

struct Record<S: Scalar> {
    out: Var,
    op: Op<S>,
}

/// Wengert tape: a node arena plus the op list that produced it.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    ops: Vec<Record<S>>,
    consumed: bool,
    grad_writes: Vec<u32>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), consumed: false, grad_writes: Vec::new() }
    }

    /// Drops all recorded state; the tape can record a fresh graph afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.ops.clear();
        self.grad_writes.clear();
        self.consumed = false;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let var = Var(self.nodes.len() as u32);
        self.nodes.push(Node { shape, data, grad: None, needs_grad });
        self.ops.push(Record { out: var, op });
        var
    }

    /// Copies a tensor onto the tape. Gradient participation follows the
    /// tensor's `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// A leaf that never participates in gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "constant shape {:?} does not match {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Re-enters a node's current value as a fresh constant leaf, cutting the
    /// gradient path. This is how teacher logits are detached.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.idx()].shape.clone();
        let data = self.nodes[v.idx()].data.clone();
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.idx()].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.idx()].data.len(), 1);
        self.nodes[v.idx()].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.idx()].grad.as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    /// Node ids written during backward, in write order.
    pub fn grad_write_audit(&self) -> &[u32] {
        &self.grad_writes
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    // ─── op builders ───

    /// a @ b. `b` must be 2-D; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.is_empty() || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ashape, rhs: bshape });
        }
        let k = bshape[0];
        let n = bshape[1];
        let m = self.nodes[a.idx()].data.len() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        let mut oshape = ashape;
        *oshape.last_mut().unwrap() = n;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(oshape, out, ng, Op::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, ng, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data: Vec<S> = self.value(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        self.push(shape, data, ng, Op::Scale { x, c })
    }

    /// Sum of all elements, left to right, producing a [1] scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        let ng = self.needs_grad(x);
        self.push(vec![1], vec![acc], ng, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.idx()].data.len().max(1);
        let s = self.sum(x);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut data = self.value(x).to_vec();
        for_each_lane(&shape, axis, |lane| {
            let mut scratch: Vec<S> = lane.iter().map(|&i| data[i]).collect();
            kernels::softmax_row(&mut scratch);
            for (&i, &v) in lane.iter().zip(&scratch) {
                data[i] = v;
            }
        });
        let ng = self.needs_grad(x);
        Ok(self.push(shape, data, ng, Op::Softmax { x, axis }))
    }

    /// RMS normalization over the last axis with a learned weight vector.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(w) != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.shape(w).to_vec(),
            });
        }
        let rows = self.nodes[x.idx()].data.len() / d.max(1);
        let mut data = vec![S::zero(); rows * d];
        let mut inv = vec![S::zero(); rows];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for r in 0..rows {
                inv[r] =
                    kernels::rmsnorm_row(&xv[r * d..(r + 1) * d], wv, eps, &mut data[r * d..(r + 1) * d]);
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, ng, Op::RmsNorm { x, w, inv }))
    }

    /// Rotary position encoding over heads laid out as contiguous blocks in
    /// the last axis. Rows are (batch, position) with positions starting at
    /// `pos_offset`.
    pub fn rope(
        &mut self,
        x: Var,
        heads: usize,
        head_dim: usize,
        seq: usize,
        theta: f64,
        pos_offset: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width != heads * head_dim || head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rope wants last axis {}x{} with even head_dim, got shape {:?}",
                heads, head_dim, shape
            )));
        }
        let rows = self.nodes[x.idx()].data.len() / width.max(1);
        if seq == 0 || rows % seq != 0 {
            return Err(Error::InvalidArgument(format!(
                "rope rows {rows} not divisible by seq {seq}"
            )));
        }
        let mut data = self.value(x).to_vec();
        for r in 0..rows {
            let pos = r % seq + pos_offset;
            for h in 0..heads {
                let off = r * width + h * head_dim;
                kernels::rope_rotate_row(&mut data[off..off + head_dim], pos, theta);
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(shape, data, ng, Op::Rope { x, heads, head_dim, seq, theta, pos_offset }))
    }

    /// silu(gate) * up, the gated-MLP activation.
    pub fn silu_mul(&mut self, gate: Var, up: Var) -> Result<Var> {
        if self.shape(gate) != self.shape(up) {
            return Err(Error::ShapeMismatch {
                op: "silu_mul",
                lhs: self.shape(gate).to_vec(),
                rhs: self.shape(up).to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(gate)
            .iter()
            .zip(self.value(up))
            .map(|(&g, &u)| kernels::silu(g) * u)
            .collect();
        let ng = self.needs_grad(gate) || self.needs_grad(up);
        let shape = self.shape(gate).to_vec();
        Ok(self.push(shape, data, ng, Op::SiluMul { gate, up }))
    }

    /// Causal multi-head attention. q/k/v are [batch, seq, heads*head_dim]
    /// (or any layout with that many rows); row t attends to rows 0..=t of
    /// its own sequence. Scores are scaled by 1/sqrt(head_dim).
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let width = heads * head_dim;
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            if self.nodes[var.idx()].data.len() != batch * seq * width {
                return Err(Error::InvalidArgument(format!(
                    "attention {name} has {} elements, wants {}x{}x{}",
                    self.nodes[var.idx()].data.len(),
                    batch,
                    seq,
                    width
                )));
            }
        }
        let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut probs = vec![S::zero(); batch * seq * heads * seq];
        let mut out = vec![S::zero(); batch * seq * width];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let mut k_pack = vec![S::zero(); seq * head_dim];
            let mut v_pack = vec![S::zero(); seq * head_dim];
            for b in 0..batch {
                for h in 0..heads {
                    pack_head(kv, b, h, seq, heads, head_dim, &mut k_pack);
                    pack_head(vv, b, h, seq, heads, head_dim, &mut v_pack);
                    for t in 0..seq {
                        let row = b * seq + t;
                        let q_row = &qv[row * width + h * head_dim..row * width + (h + 1) * head_dim];
                        let p_off = (row * heads + h) * seq;
                        kernels::attn_row(
                            q_row,
                            &k_pack[..(t + 1) * head_dim],
                            &v_pack[..(t + 1) * head_dim],
                            t + 1,
                            scale,
                            &mut probs[p_off..p_off + t + 1],
                            &mut out[row * width + h * head_dim..row * width + (h + 1) * head_dim],
                        );
                    }
                }
            }
        }
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            ng,
            Op::CausalAttention { q, k, v, batch, seq, heads, head_dim, scale, probs },
        ))
    }

    /// Row gather: out[r] = table[ids[r]].
    pub fn embedding(&mut self, table: Var, tokens: &TokenBatch) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding table must be 2-D, got {tshape:?}"
            )));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let mut data = vec![S::zero(); tokens.ids.len() * d];
        {
            let tv = self.value(table);
            for (r, &id) in tokens.ids.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
            }
        }
        let ng = self.needs_grad(table);
        Ok(self.push(
            vec![tokens.batch, tokens.seq, d],
            data,
            ng,
            Op::Embedding { table, ids: tokens.ids.clone() },
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// IGNORE_TARGET. Logits are [.., vocab].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap_or(&0);
        let rows = self.nodes[logits.idx()].data.len() / vocab.max(1);
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) =
            targets.iter().find(|&&t| t != IGNORE_TARGET && t as usize >= vocab)
        {
            return Err(Error::InvalidArgument(format!(
                "target {bad} out of range for vocab {vocab}"
            )));
        }
        let n_valid = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
        if n_valid == 0 {
            return Err(Error::InvalidArgument("cross_entropy: every target is masked".into()));
        }
        let mut probs = vec![S::zero(); rows * vocab];
        probs.copy_from_slice(self.value(logits));
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::softmax_row(row);
            if t != IGNORE_TARGET {
                total -= row[t as usize].as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        let loss = S::from_f64(total / n_valid as f64);
        let ng = self.needs_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            ng,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, n_valid },
        ))
    }

    /// KL(teacher ‖ student) from raw logits: mean over rows, sum over the
    /// vocabulary axis. The teacher side is structurally detached; gradient
    /// flows only into `student`.
    pub fn kl_divergence(&mut self, teacher: Var, student: Var) -> Result<Var> {
        if self.shape(teacher) != self.shape(student) {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                lhs: self.shape(teacher).to_vec(),
                rhs: self.shape(student).to_vec(),
            });
        }
        let shape = self.shape(teacher).to_vec();
        let vocab = *shape.last().unwrap_or(&0);
        if vocab == 0 {
            return Err(Error::InvalidArgument("kl_divergence on empty vocab axis".into()));
        }
        let rows = self.nodes[teacher.idx()].data.len() / vocab;
        let mut pt = self.value(teacher).to_vec();
        let mut ps = self.value(student).to_vec();
        let mut total = 0.0f64;
        for r in 0..rows {
            let trow = &mut pt[r * vocab..(r + 1) * vocab];
            kernels::softmax_row(trow);
            let srow = &mut ps[r * vocab..(r + 1) * vocab];
            kernels::softmax_row(srow);
            for (t, s) in trow.iter().zip(srow.iter()) {
                let t = t.as_f64();
                if t > 0.0 {
                    let s = s.as_f64().max(f64::MIN_POSITIVE);
                    total += t * (t.ln() - s.ln());
                }
            }
        }
        let loss = S::from_f64((total / rows.max(1) as f64).max(0.0));
        let ng = self.needs_grad(student);
        Ok(self.push(vec![1], vec![loss], ng, Op::KlDiv { student, pt, ps }))
    }

    // ─── backward ───

    /// Reverse sweep from `loss` (a [1] scalar). Consumes the tape: a second
    /// call without `reset` is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if self.nodes[loss.idx()].data.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.idx()].needs_grad {
            // Nothing trainable feeds the loss; a no-op sweep is still valid.
            return Ok(());
        }
        self.accum(loss, &[S::one()]);

        for i in (0..self.ops.len()).rev() {
            let out = self.ops[i].out;
            let dy = match &self.nodes[out.idx()].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Ops are moved out to appease the borrow checker, then restored.
            let op = std::mem::replace(&mut self.ops[i].op, Op::Leaf);
            self.backward_op(&op, out, &dy);
            self.ops[i].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>, out: Var, dy: &[S]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs_grad(*a) {
                    // dA = dY @ B^T
                    let mut bt = vec![S::zero(); k * n];
                    kernels::transpose(self.value(*b), k, n, &mut bt);
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul(dy, &bt, m, n, k, &mut da);
                    self.accum(*a, &da);
                }
                if self.needs_grad(*b) {
                    // dB = A^T @ dY
                    let mut at = vec![S::zero(); m * k];
                    kernels::transpose(self.value(*a), m, k, &mut at);
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul(&at, dy, k, m, n, &mut db);
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad(*a) {
                    self.accum(*a, dy);
                }
                if self.needs_grad(*b) {
                    self.accum(*b, dy);
                }
            }
            Op::Mul { a, b } => {
                if self.needs_grad(*a) {
                    let da: Vec<S> = dy.iter().zip(self.value(*b)).map(|(d, v)| *d * *v).collect();
                    self.accum(*a, &da);
                }
                if self.needs_grad(*b) {
                    let db: Vec<S> = dy.iter().zip(self.value(*a)).map(|(d, v)| *d * *v).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.needs_grad(*x) {
                    let dx: Vec<S> = dy.iter().map(|d| *d * *c).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Sum { x } => {
                if self.needs_grad(*x) {
                    let dx = vec![dy[0]; self.nodes[x.idx()].data.len()];
                    self.accum(*x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs_grad(*x) {
                    let shape = self.shape(out).to_vec();
                    let p = self.value(out);
                    let mut dx = vec![S::zero(); p.len()];
                    for_each_lane(&shape, *axis, |lane| {
                        let mut dot = S::zero();
                        for &i in lane {
                            dot = dot + dy[i] * p[i];
                        }
                        for &i in lane {
                            dx[i] = p[i] * (dy[i] - dot);
                        }
                    });
                    self.accum(*x, &dx);
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let d = *self.shape(out).last().unwrap();
                let rows = dy.len() / d;
                if self.needs_grad(*w) {
                    let xv = self.value(*x);
                    let mut dw = vec![S::zero(); d];
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let dr = &dy[r * d..(r + 1) * d];
                        for j in 0..d {
                            dw[j] = dw[j] + dr[j] * xr[j] * inv[r];
                        }
                    }
                    self.accum(*w, &dw);
                }
                if self.needs_grad(*x) {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = vec![S::zero(); dy.len()];
                    let dinv = S::from_f64(1.0 / d as f64);
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let dr = &dy[r * d..(r + 1) * d];
                        let mut proj = S::zero();
                        for j in 0..d {
                            proj = proj + dr[j] * wv[j] * xr[j];
                        }
                        let i = inv[r];
                        let coef = i * i * i * dinv * proj;
                        let row = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            row[j] = dr[j] * wv[j] * i - xr[j] * coef;
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::Rope { x, heads, head_dim, seq, theta, pos_offset } => {
                if self.needs_grad(*x) {
                    let width = heads * head_dim;
                    let rows = dy.len() / width;
                    let mut dx = dy.to_vec();
                    for r in 0..rows {
                        let pos = r % seq + pos_offset;
                        for h in 0..*heads {
                            let off = r * width + h * head_dim;
                            kernels::rope_rotate_row_inv(&mut dx[off..off + head_dim], pos, *theta);
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::SiluMul { gate, up } => {
                let gv = self.value(*gate);
                let uv = self.value(*up);
                let dg: Option<Vec<S>> = self.needs_grad(*gate).then(|| {
                    dy.iter()
                        .zip(gv.iter().zip(uv))
                        .map(|(d, (&g, &u))| {
                            let sig = S::one() / (S::one() + (-g).exp());
                            *d * u * sig * (S::one() + g * (S::one() - sig))
                        })
                        .collect()
                });
                let du: Option<Vec<S>> = self
                    .needs_grad(*up)
                    .then(|| dy.iter().zip(gv).map(|(d, &g)| *d * kernels::silu(g)).collect());
                if let Some(dg) = dg {
                    self.accum(*gate, &dg);
                }
                if let Some(du) = du {
                    self.accum(*up, &du);
                }
            }
            Op::CausalAttention { q, k, v, batch, seq, heads, head_dim, scale, probs } => {
                let (batch, seq, heads, hd) = (*batch, *seq, *heads, *head_dim);
                let width = heads * hd;
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let mut dq = vec![S::zero(); qv.len()];
                let mut dk = vec![S::zero(); kv.len()];
                let mut dv = vec![S::zero(); vv.len()];
                let mut k_pack = vec![S::zero(); seq * hd];
                let mut v_pack = vec![S::zero(); seq * hd];
                let mut dp = vec![S::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        pack_head(kv, b, h, seq, heads, hd, &mut k_pack);
                        pack_head(vv, b, h, seq, heads, hd, &mut v_pack);
                        for t in 0..seq {
                            let row = b * seq + t;
                            let head_off = row * width + h * hd;
                            let d_ctx = &dy[head_off..head_off + hd];
                            let p = &probs[(row * heads + h) * seq..(row * heads + h) * seq + t + 1];
                            for j in 0..=t {
                                dp[j] = kernels::dot(d_ctx, &v_pack[j * hd..(j + 1) * hd]);
                            }
                            let mut pdot = S::zero();
                            for j in 0..=t {
                                pdot = pdot + p[j] * dp[j];
                            }
                            let q_row = &qv[head_off..head_off + hd];
                            for j in 0..=t {
                                let ds = p[j] * (dp[j] - pdot) * *scale;
                                kernels::axpy(ds, &k_pack[j * hd..(j + 1) * hd], &mut dq[head_off..head_off + hd]);
                                let krow = b * seq + j;
                                kernels::axpy(ds, q_row, &mut dk[krow * width + h * hd..krow * width + (h + 1) * hd]);
                                kernels::axpy(p[j], d_ctx, &mut dv[krow * width + h * hd..krow * width + (h + 1) * hd]);
                            }
                        }
                    }
                }
                if self.needs_grad(*q) {
                    self.accum(*q, &dq);
                }
                if self.needs_grad(*k) {
                    self.accum(*k, &dk);
                }
                if self.needs_grad(*v) {
                    self.accum(*v, &dv);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs_grad(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![S::zero(); self.nodes[table.idx()].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(
                            S::one(),
                            &dy[r * d..(r + 1) * d],
                            &mut dt[id as usize * d..(id as usize + 1) * d],
                        );
                    }
                    self.accum(*table, &dt);
                }
            }
            Op::CrossEntropy { logits, targets, probs, n_valid } => {
                if self.needs_grad(*logits) {
                    let vocab = *self.shape(*logits).last().unwrap();
                    let coef = dy[0] * S::from_f64(1.0 / *n_valid as f64);
                    let mut dl = vec![S::zero(); probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            drow[j] = prow[j] * coef;
                        }
                        drow[t as usize] = drow[t as usize] - coef;
                    }
                    self.accum(*logits, &dl);
                }
            }
            Op::KlDiv { student, pt, ps } => {
                if self.needs_grad(*student) {
                    let vocab = *self.shape(*student).last().unwrap();
                    let rows = pt.len() / vocab;
                    let coef = dy[0] * S::from_f64(1.0 / rows.max(1) as f64);
                    let ds: Vec<S> =
                        ps.iter().zip(pt).map(|(s, t)| (*s - *t) * coef).collect();
                    self.accum(*student, &ds);
                }
            }
        }
    }

    fn accum(&mut self, v: Var, g: &[S]) {
        let node = &mut self.nodes[v.idx()];
        assert!(node.needs_grad, "backward wrote to a node without needs_grad");
        self.grad_writes.push(v.0);
        let grad = node.grad.get_or_insert_with(|| vec![S::zero(); node.data.len()]);
        debug_assert_eq!(grad.len(), g.len());
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst = *dst + *src;
        }
    }
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = o * len * inner + j * inner + i;
            }
            f(&lane);
        }
    }
}
