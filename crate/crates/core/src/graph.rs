//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in construction order, so the node
//! list is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse. A graph is built for one batch and dropped afterwards.

use crate::error::{Error, Result};
use crate::numeric::{kl_clamped, log_sum_exp, softmax_into, KL_EPS, NORM_EPS};
use crate::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, norm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Scale,
    Tanh,
    ConcatCols,
    SegmentMean,
    CosineRows,
    SoftmaxRows,
    KlRows,
    SquaredError,
    CrossEntropy,
    Detach,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddRow => "add_row",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SegmentMean => "segment_mean",
            OpKind::CosineRows => "cosine_rows",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::KlRows => "kl_rows",
            OpKind::SquaredError => "squared_error",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Detach => "detach",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Leaf, MatMul, AddRow, Add, Scale, Tanh, ConcatCols, SegmentMean, CosineRows,
            SoftmaxRows, KlRows, SquaredError, CrossEntropy, Detach,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    ConcatCols(Var, Var),
    SegmentMean(Var, usize),
    CosineRows(Var, Var),
    SoftmaxRows(Var),
    KlRows(Var, Var),
    SquaredError(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Detach(#[allow(dead_code)] Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(..) => OpKind::Tanh,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SegmentMean(..) => OpKind::SegmentMean,
            Op::CosineRows(..) => OpKind::CosineRows,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::KlRows(..) => OpKind::KlRows,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
            Op::Detach(..) => OpKind::Detach,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupt: Option<OpKind>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scale the adjoint of every node of `kind` by 1.5 so a
    /// gradient check has something to catch.
    pub fn corrupt_adjoint(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no adjoint is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x + b` with the `1×n` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(
                "add_row",
                format!("1x{}", xv.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::dim(
                "add",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Alignment {
                source_len: av.rows(),
                target_len: bv.rows(),
            });
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(rows, ca + cb, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Mean over each contiguous block of `seg` rows: `(B·seg)×n → B×n`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let av = self.value(a);
        if seg == 0 || !av.rows().is_multiple_of(seg) {
            return Err(Error::dim(
                "segment_mean",
                format!("row count divisible by {seg}"),
                av.rows(),
            ));
        }
        let (groups, n) = (av.rows() / seg, av.cols());
        let mut out = Tensor::zeros(groups, n);
        for g in 0..groups {
            let o = out.row_mut(g);
            for r in 0..seg {
                for (ov, &v) in o.iter_mut().zip(av.row(g * seg + r)) {
                    *ov += v;
                }
            }
            for ov in o.iter_mut() {
                *ov /= seg as f64;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentMean(a, seg), rg))
    }

    /// Cosine similarity between every query row and every memory row:
    /// `(T×d, N×d) → T×N`. Norms are floored at `NORM_EPS`.
    pub fn cosine_rows(&mut self, queries: Var, memory: Var) -> Result<Var> {
        let (q, m) = (self.value(queries), self.value(memory));
        if q.cols() != m.cols() {
            return Err(Error::dim("cosine_rows", m.cols(), q.cols()));
        }
        let (t, n, d) = (q.rows(), m.rows(), q.cols());
        let mut out = vec![0.0; t * n];
        matmul_bt_into(q.data(), m.data(), &mut out, t, d, n);
        let qn: Vec<f64> = (0..t).map(|i| norm(q.row(i)).max(NORM_EPS)).collect();
        let mn: Vec<f64> = (0..n).map(|j| norm(m.row(j)).max(NORM_EPS)).collect();
        for i in 0..t {
            for j in 0..n {
                out[i * n + j] /= qn[i] * mn[j];
            }
        }
        let out = Tensor::matrix(t, n, out)?;
        let rg = self.rg(&[queries, memory]);
        Ok(self.push(out, Op::CosineRows(queries, memory), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            softmax_into(av.row(i), out.row_mut(i));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// `Σ_rows D_KL(p_row || q_row)` as a `1×1` tensor.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if !pv.same_shape(qv) {
            return Err(Error::dim(
                "kl_rows",
                format!("{:?}", pv.shape()),
                format!("{:?}", qv.shape()),
            ));
        }
        let total: f64 = (0..pv.rows()).map(|i| kl_clamped(pv.row(i), qv.row(i))).sum();
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(total), Op::KlRows(p, q), rg))
    }

    /// `Σ (a − b)²` as a `1×1` tensor.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::dim(
                "squared_error",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(total), Op::SquaredError(a, b), rg))
    }

    /// Summed cross-entropy of each logit row against its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::dim("cross_entropy", lv.rows(), labels.len()));
        }
        let k = lv.cols();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::domain(
                    "cross_entropy",
                    format!("label {y} out of range for {k} classes"),
                ));
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Same value as `a`, but no adjoint flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::Detach(a), false)
    }

    /// Reverse sweep from the scalar `loss`. Every differentiable leaf gets
    /// an adjoint (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", "scalar loss", format!("{:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(mut upstream) = grads[idx].take() else {
                continue;
            };
            if self.corrupt == Some(node.op.kind()) {
                upstream = upstream.scale(1.5);
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::new(node.value.shape().to_vec(), vec![0.0; node.value.len()])?);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        let mut z = t.clone();
        z.data_mut().iter_mut().for_each(|x| *x = 0.0);
        z
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut ga = self.zeros_like(*a);
                    matmul_bt_into(up.data(), bv.data(), ga.data_mut(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = self.zeros_like(*b);
                    matmul_at_into(av.data(), up.data(), gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, up.clone());
                if self.requires_grad(*b) {
                    let mut gb = self.zeros_like(*b);
                    for i in 0..up.rows() {
                        for (g, &u) in gb.data_mut().iter_mut().zip(up.row(i)) {
                            *g += u;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, up.scale(*s)),
            Op::Tanh(a) => {
                let mut g = up.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= 1.0 - y * y;
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                for i in 0..up.rows() {
                    let row = up.row(i);
                    ga.row_mut(i).copy_from_slice(&row[..ca]);
                    gb.row_mut(i).copy_from_slice(&row[ca..ca + cb]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SegmentMean(a, seg) => {
                let mut ga = self.zeros_like(*a);
                let inv = 1.0 / *seg as f64;
                for r in 0..ga.rows() {
                    let src = up.row(r / seg);
                    for (g, &u) in ga.row_mut(r).iter_mut().zip(src) {
                        *g = u * inv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CosineRows(qv, mv) => self.cosine_backward(*qv, *mv, &node.value, up, grads),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = self.zeros_like(*a);
                for i in 0..y.rows() {
                    let (yr, ur) = (y.row(i), up.row(i));
                    let s = dot(yr, ur);
                    for ((gv, &yv), &uv) in g.row_mut(i).iter_mut().zip(yr).zip(ur) {
                        *gv = yv * (uv - s);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::KlRows(p, q) => {
                let u = up.item();
                let (pv, qv) = (self.value(*p), self.value(*q));
                if self.requires_grad(*p) {
                    let g = Tensor::new(
                        pv.shape().to_vec(),
                        pv.data()
                            .iter()
                            .zip(qv.data())
                            .map(|(&pi, &qi)| {
                                if pi > 0.0 {
                                    u * ((pi / qi.max(KL_EPS)).ln() + 1.0)
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    )
                    .expect("shape preserved");
                    self.accumulate(grads, *p, g);
                }
                if self.requires_grad(*q) {
                    let g = Tensor::new(
                        qv.shape().to_vec(),
                        pv.data()
                            .iter()
                            .zip(qv.data())
                            .map(|(&pi, &qi)| if qi > KL_EPS { -u * pi / qi } else { 0.0 })
                            .collect(),
                    )
                    .expect("shape preserved");
                    self.accumulate(grads, *q, g);
                }
            }
            Op::SquaredError(a, b) => {
                let u = up.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let diff: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| 2.0 * u * (x - y))
                    .collect();
                let ga = Tensor::new(av.shape().to_vec(), diff).expect("shape preserved");
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ga.scale(-1.0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy(logits, labels) => {
                let u = up.item();
                let lv = self.value(*logits);
                let mut g = self.zeros_like(*logits);
                for (i, &y) in labels.iter().enumerate() {
                    let row = g.row_mut(i);
                    softmax_into(lv.row(i), row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= u);
                }
                self.accumulate(grads, *logits, g);
            }
        }
    }

    fn cosine_backward(
        &self,
        qv: Var,
        mv: Var,
        sim: &Tensor,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (q, m) = (self.value(qv), self.value(mv));
        let (t, n, d) = (q.rows(), m.rows(), q.cols());
        let qn: Vec<f64> = (0..t).map(|i| norm(q.row(i))).collect();
        let mn: Vec<f64> = (0..n).map(|j| norm(m.row(j))).collect();
        let qd: Vec<f64> = qn.iter().map(|v| v.max(NORM_EPS)).collect();
        let md: Vec<f64> = mn.iter().map(|v| v.max(NORM_EPS)).collect();

        // ∂s_ij/∂q_i = m_j/(|q_i||m_j|) − s_ij q_i/|q_i|²; the second term
        // vanishes when the norm floor is active.
        let mut coef = vec![0.0; t * n];
        for i in 0..t {
            for j in 0..n {
                coef[i * n + j] = up.get(i, j) / (qd[i] * md[j]);
            }
        }

        if self.requires_grad(qv) {
            let mut gq = self.zeros_like(qv);
            matmul_into(&coef, m.data(), gq.data_mut(), t, n, d);
            for i in 0..t {
                if qn[i] < NORM_EPS {
                    continue;
                }
                let w: f64 = (0..n).map(|j| up.get(i, j) * sim.get(i, j)).sum::<f64>() / (qd[i] * qd[i]);
                for (g, &x) in gq.row_mut(i).iter_mut().zip(q.row(i)) {
                    *g -= w * x;
                }
            }
            self.accumulate(grads, qv, gq);
        }
        if self.requires_grad(mv) {
            let mut gm = self.zeros_like(mv);
            matmul_at_into(&coef, q.data(), gm.data_mut(), t, n, d);
            for j in 0..n {
                if mn[j] < NORM_EPS {
                    continue;
                }
                let w: f64 = (0..t).map(|i| up.get(i, j) * sim.get(i, j)).sum::<f64>() / (md[j] * md[j]);
                for (g, &x) in gm.row_mut(j).iter_mut().zip(m.row(j)) {
                    *g -= w * x;
                }
            }
            self.accumulate(grads, mv, gm);
        }
    }
}
