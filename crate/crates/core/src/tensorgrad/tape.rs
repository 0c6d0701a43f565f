use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind<S> {
    Add,
    Sub,
    Mul,
    Silu,
    Softplus,
    Sigmoid,
    Scale(S),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Reduce { x: Var, axes: Vec<usize>, kind: ReduceKind },
    Gather { table: Var, plan: Arc<GatherPlan<S>> },
    SliceCols { x: Var, start: usize },
    Composite { sigma: Var, rgb: Var, plan: Arc<CompositePlan<S>>, transmittance: Vec<S> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Constant index/weight pattern for [`Tape::gather`]: output row `i` is
/// `sum_j weights[i*k + j] * table[indices[i*k + j]]`.
#[derive(Debug, Clone)]
pub struct GatherPlan<S> {
    pub rows: usize,
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<S>,
}

/// Constant ray layout for [`Tape::composite`].
#[derive(Debug, Clone)]
pub struct CompositePlan<S> {
    pub rays: usize,
    pub samples: usize,
    /// Interval lengths, `rays * samples`.
    pub deltas: Vec<S>,
    pub background: [S; 3],
}

/// Recording of a differentiable computation.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    /// Clears every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind<S>, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::ShapeMismatch(format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
        }
        match kind {
            ElementwiseKind::Add => self.add(inputs[0], inputs[1]),
            ElementwiseKind::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseKind::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseKind::Silu => Ok(self.silu(inputs[0])),
            ElementwiseKind::Softplus => Ok(self.softplus(inputs[0])),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            ElementwiseKind::Scale(s) => Ok(self.scale(inputs[0], s)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = Broadcast::new(&sa, &sb)?;
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut out = Vec::with_capacity(plan.len());
        plan.for_each(|_, ia, ib| out.push(f(da[ia], db[ib])));
        Ok((Tensor::from_parts(plan.out_shape, out), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let src = &self.nodes[a.0].value;
        let t = Tensor::from_parts(src.shape.clone(), src.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &self.nodes[a.0].value.data, false, &self.nodes[b.0].value.data, false, S::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Sums or averages over `axes`, dropping them from the shape. Reducing
    /// every axis yields shape `[1]`.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::ShapeMismatch(format!("reduce axes {axes:?} invalid for shape {shape:?}")));
        }
        let plan = ReducePlan::new(&shape, &axes);
        let src = &self.nodes[x.0].value.data;
        let mut out = vec![S::zero(); plan.out_len];
        for (i, &v) in src.iter().enumerate() {
            out[plan.map(i)] = out[plan.map(i)] + v;
        }
        if kind == ReduceKind::Mean {
            let c = S::from_usize_lossy(plan.count);
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::Reduce { x, axes, kind }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Sum, x, &axes).expect("all axes are valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Mean, x, &axes).expect("all axes are valid")
    }

    /// Mean of squared differences between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Weighted row gather from a `[n, d]` table producing `[plan.rows, d]`.
    /// Covers embedding lookup (`k = 1`, unit weights) and trilinear
    /// interpolation (`k = 8`).
    pub fn gather(&mut self, table: Var, plan: Arc<GatherPlan<S>>) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!("gather table must be 2-D, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if plan.indices.len() != plan.rows * plan.k || plan.weights.len() != plan.indices.len() {
            return Err(Error::ShapeMismatch("gather plan length mismatch".into()));
        }
        if let Some(&bad) = plan.indices.iter().find(|&&i| i >= n) {
            return Err(Error::ShapeMismatch(format!("gather index {bad} out of range for {n} rows")));
        }
        let src = &self.nodes[table.0].value.data;
        let mut out = vec![S::zero(); plan.rows * d];
        for r in 0..plan.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for j in 0..plan.k {
                let w = plan.weights[r * plan.k + j];
                if w == S::zero() {
                    continue;
                }
                let row = &src[plan.indices[r * plan.k + j] * d..][..d];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = *o + w * v;
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(vec![plan.rows, d], out), Op::Gather { table, plan }, rg))
    }

    /// Embedding lookup: rows `indices` of a `[n, d]` table.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let plan = GatherPlan { rows: indices.len(), k: 1, indices: indices.to_vec(), weights: vec![S::one(); indices.len()] };
        self.gather(table, Arc::new(plan))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || start >= end || end > shape[1] {
            return Err(Error::ShapeMismatch(format!("slice {start}..{end} of {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let w = end - start;
        let src = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols { x, start }, rg))
    }

    /// Front-to-back alpha compositing of `samples` points along each of
    /// `rays` rays. `sigma` holds `rays * samples` densities and `rgb`
    /// `rays * samples * 3` colors; the output is `[rays, 3]`.
    pub fn composite(&mut self, sigma: Var, rgb: Var, plan: Arc<CompositePlan<S>>) -> Result<Var> {
        let count = plan.rays * plan.samples;
        if self.value(sigma).len() != count || self.value(rgb).len() != count * 3 || plan.deltas.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "composite expects {count} densities and {} colors",
                count * 3
            )));
        }
        let sd = &self.nodes[sigma.0].value.data;
        let cd = &self.nodes[rgb.0].value.data;
        let ns = plan.samples;
        let mut out = vec![S::zero(); plan.rays * 3];
        // Transmittance before each sample plus the residual after the last.
        let mut trans = vec![S::zero(); plan.rays * (ns + 1)];
        for r in 0..plan.rays {
            let mut t = S::one();
            let mut acc = [S::zero(); 3];
            for i in 0..ns {
                let p = r * ns + i;
                trans[r * (ns + 1) + i] = t;
                let decay = (-sd[p] * plan.deltas[p]).exp();
                let w = t * (S::one() - decay);
                for c in 0..3 {
                    acc[c] = acc[c] + w * cd[p * 3 + c];
                }
                t = t * decay;
            }
            trans[r * (ns + 1) + ns] = t;
            for c in 0..3 {
                out[r * 3 + c] = acc[c] + t * plan.background[c];
            }
        }
        let rg = self.rg(sigma) || self.rg(rgb);
        Ok(self.push(
            Tensor::from_parts(vec![plan.rays, 3], out),
            Op::Composite { sigma, rgb, plan, transmittance: trans },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!("cross entropy over {shape:?} with {} labels", labels.len())));
        }
        let (b, k) = (shape[0], shape[1]);
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::ShapeMismatch(format!("label out of range for {k} classes")));
        }
        let src = &self.nodes[logits.0].value.data;
        let mut probs = vec![S::zero(); b * k];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss = loss + (z.ln() + mx - row[labels[r]]);
        }
        let loss = loss / S::from_usize_lossy(b);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidBackward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_from(loss, vec![S::one()])
    }

    /// Back-propagates an explicit upstream gradient `seed` into `output`.
    pub fn backward_from(&mut self, output: Var, seed: Vec<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::InvalidBackward("tape was already back-propagated; reset it first".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidBackward("output is not on this tape".into()));
        }
        if seed.len() != self.value(output).len() {
            return Err(Error::InvalidBackward("seed gradient does not match output shape".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let plan = Broadcast::new(self.shape(*a), self.shape(*b)).expect("validated in forward");
                self.accumulate(grads, *a, |ga| plan.for_each(|o, ia, _| ga[ia] = ga[ia] + g[o]));
                self.accumulate(grads, *b, |gb| {
                    plan.for_each(|o, _, ib| gb[ib] = if neg { gb[ib] - g[o] } else { gb[ib] + g[o] })
                });
            }
            Op::Mul(a, b) => {
                let plan = Broadcast::new(self.shape(*a), self.shape(*b)).expect("validated in forward");
                let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                self.accumulate(grads, *a, |ga| plan.for_each(|o, ia, ib| ga[ia] = ga[ia] + g[o] * db[ib]));
                self.accumulate(grads, *b, |gb| plan.for_each(|o, ia, ib| gb[ib] = gb[ib] + g[o] * da[ia]));
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + gi * *s));
            }
            Op::Silu(a) | Op::Softplus(a) | Op::Sigmoid(a) => {
                let xs = &self.nodes[a.0].value.data;
                let ys = &node.value.data;
                let deriv = |x: S, y: S| -> S {
                    match node.op {
                        Op::Silu(_) => {
                            let s = sigmoid(x);
                            s * (S::one() + x * (S::one() - s))
                        }
                        Op::Softplus(_) => sigmoid(x),
                        _ => y * (S::one() - y),
                    }
                };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * deriv(xs[i], ys[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |ga| S::gemm(m, n, k, S::one(), g, false, db, true, S::one(), ga));
                self.accumulate(grads, *b, |gb| S::gemm(k, m, n, S::one(), da, true, g, false, S::one(), gb));
            }
            Op::Reduce { x, axes, kind } => {
                let plan = ReducePlan::new(self.shape(*x), axes);
                let scale = match kind {
                    ReduceKind::Sum => S::one(),
                    ReduceKind::Mean => S::one() / S::from_usize_lossy(plan.count),
                };
                self.accumulate(grads, *x, |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v = *v + g[plan.map(i)] * scale;
                    }
                });
            }
            Op::Gather { table, plan } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for r in 0..plan.rows {
                        let go = &g[r * d..(r + 1) * d];
                        for j in 0..plan.k {
                            let w = plan.weights[r * plan.k + j];
                            if w == S::zero() {
                                continue;
                            }
                            let dst = &mut gt[plan.indices[r * plan.k + j] * d..][..d];
                            for (t, &gv) in dst.iter_mut().zip(go) {
                                *t = *t + w * gv;
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let w = node.value.shape[1];
                self.accumulate(grads, *x, |gx| {
                    for r in 0..node.value.shape[0] {
                        for c in 0..w {
                            gx[r * n + start + c] = gx[r * n + start + c] + g[r * w + c];
                        }
                    }
                });
            }
            Op::Composite { sigma, rgb, plan, transmittance } => {
                self.composite_backward(g, *sigma, *rgb, plan, transmittance, grads);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / S::from_usize_lossy(labels.len());
                self.accumulate(grads, *logits, |gl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == lab { S::one() } else { S::zero() };
                            gl[r * k + j] = gl[r * k + j] + scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    fn composite_backward(
        &self,
        g: &[S],
        sigma: Var,
        rgb: Var,
        plan: &CompositePlan<S>,
        trans: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let ns = plan.samples;
        let cd = &self.nodes[rgb.0].value.data;
        // d color / d rgb_i = w_i
        self.accumulate(grads, rgb, |gc| {
            for r in 0..plan.rays {
                for i in 0..ns {
                    let p = r * ns + i;
                    let w = trans[r * (ns + 1) + i] - trans[r * (ns + 1) + i + 1];
                    for c in 0..3 {
                        gc[p * 3 + c] = gc[p * 3 + c] + w * g[r * 3 + c];
                    }
                }
            }
        });
        // d color / d sigma_k = delta_k * (T_{k+1} c_k - sum_{i>k} w_i c_i - T_{N+1} b)
        self.accumulate(grads, sigma, |gs| {
            for r in 0..plan.rays {
                let gr = &g[r * 3..r * 3 + 3];
                let t_end = trans[r * (ns + 1) + ns];
                let mut tail = (0..3).fold(S::zero(), |acc, c| acc + gr[c] * t_end * plan.background[c]);
                for i in (0..ns).rev() {
                    let p = r * ns + i;
                    let t_next = trans[r * (ns + 1) + i + 1];
                    let w = trans[r * (ns + 1) + i] - t_next;
                    let gc = (0..3).fold(S::zero(), |acc, c| acc + gr[c] * cd[p * 3 + c]);
                    gs[p] = gs[p] + plan.deltas[p] * (t_next * gc - tail);
                    tail = tail + w * gc;
                }
            }
        });
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Index mapping for a rightmost-aligned broadcast of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}")));
            }
            out_shape.push(x.max(y));
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            st
        };
        Ok(Self { a_strides: strides(&pa), b_strides: strides(&pb), same: pa == pb, out_shape })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

struct ReducePlan {
    out_shape: Vec<usize>,
    out_len: usize,
    count: usize,
    /// For each input axis: (extent, stride into the output or 0 if reduced).
    axes: Vec<(usize, usize)>,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        let count = axes.iter().map(|&a| shape[a]).product();
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for &a in kept.iter().rev() {
            out_strides[a] = acc;
            acc *= shape[a];
        }
        let out_len = acc;
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let axes = shape.iter().zip(out_strides).map(|(&e, s)| (e, s)).collect();
        Self { out_shape, out_len, count, axes }
    }

    #[inline]
    fn map(&self, mut flat: usize) -> usize {
        let mut o = 0;
        for &(extent, stride) in self.axes.iter().rev() {
            o += (flat % extent) * stride;
            flat /= extent;
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let s = tape.elementwise(ElementwiseKind::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let z = tape.leaf(t(&[1], &[0.0]));
        let sp = tape.softplus(z);
        assert!((tape.value(sp).data()[0] - 0.693_147).abs() < 1e-6);
        let sg = tape.sigmoid(z);
        assert_eq!(tape.value(sg).data()[0], 0.5);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let m = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let col = tape.leaf(t(&[2, 1], &[100.0, 200.0]));
        let r = tape.add(m, row).unwrap();
        assert_eq!(tape.value(r).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let c = tape.add(m, col).unwrap();
        assert_eq!(tape.value(c).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        let bad = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.add(m, bad), Err(Error::ShapeMismatch(_))));
        assert!(matches!(tape.elementwise(ElementwiseKind::Silu, &[m, m]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = tape.sum(x);
        assert_eq!(tape.value(s).data(), &[6.0]);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 4.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).data(), &[3.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.reduce(ReduceKind::Sum, x, &[1]).unwrap();
        assert_eq!(tape.value(rows).data(), &[6.0, 15.0]);
        let cols = tape.reduce(ReduceKind::Mean, x, &[0]).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(tape.reduce(ReduceKind::Sum, x, &[2]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let b = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let d = tape.scale(a, 2.0);
        assert!(matches!(tape.backward(d), Err(Error::InvalidBackward(_))));
        let l = tape.sum(d);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::InvalidBackward(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn checked_constructor_rejects_bad_data() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite)));
        assert!(matches!(Tensor::new(vec![2], vec![f64::INFINITY, 1.0]), Err(Error::NonFinite)));
        assert!(matches!(Tensor::new(vec![3], vec![1.0, 2.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn composite_with_zero_density_returns_background() {
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::zeros(vec![2, 4]).with_grad());
        let rgb = tape.leaf(Tensor::filled(vec![8, 3], 0.3));
        let plan = CompositePlan { rays: 2, samples: 4, deltas: vec![0.25; 8], background: [1.0, 0.5, 0.0] };
        let c = tape.composite(sigma, rgb, Arc::new(plan)).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 0.5, 0.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 4]).with_grad());
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(ce).unwrap();
        let gl = g.get(l).unwrap();
        assert!((gl[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((gl[1] - 0.125).abs() < 1e-12);
    }
}
