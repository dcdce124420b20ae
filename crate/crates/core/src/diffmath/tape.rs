//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller ids and the backward sweep is a single reverse pass. Leaves are
//! either parameters (receive gradients) or constants (never do). A fresh
//! tape is built for every loss evaluation.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    EmbedLookup { table: Var, index: usize },
    Linear { w: Var, b: Option<Var>, x: Var },
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, indices: Vec<usize> },
    Sum(Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers indexed by node. Only nodes downstream of a
/// parameter own a buffer.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn buffer_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
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
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Row `index` of a `[V, d]` table.
    pub fn embed_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {:?}", t.shape()));
        }
        if index >= t.rows() {
            return Err(Error::Index(format!(
                "row {index} of table with {} rows",
                t.rows()
            )));
        }
        let row = Tensor::vector(t.row(index).to_vec());
        Ok(self.push(row, Op::EmbedLookup { table, index }, &[table]))
    }

    /// `w x + b` with `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || wt.shape()[1] != xt.len() {
            return dim_err(format!(
                "linear: weight {:?} vs input {:?}",
                wt.shape(),
                xt.shape()
            ));
        }
        let rows = wt.rows();
        if let Some(b) = b {
            if self.value(b).len() != rows {
                return dim_err(format!("linear: bias {:?} vs {rows} rows", self.value(b).shape()));
            }
        }
        let out = kernels::linear(
            wt.data(),
            rows,
            xt.len(),
            b.map(|b| self.value(b).data()),
            xt.data(),
        );
        let mut inputs = vec![w, x];
        inputs.extend(b);
        Ok(self.push(Tensor::vector(out), Op::Linear { w, b, x }, &inputs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = kernels::tanh(self.value(x).data());
        self.push(Tensor::vector(out), Op::Tanh(x), &[x])
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return dim_err(format!("{what}: lengths {la} and {lb}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = kernels::add(self.value(a).data(), self.value(b).data());
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape().len() != 1 || self.value(b).shape().len() != 1 {
            return dim_err("concat expects vectors".into());
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::vector(out), Op::Concat(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax(self.value(x).data());
        self.push(Tensor::vector(out), Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = kernels::log_softmax(self.value(x).data());
        self.push(Tensor::vector(out), Op::LogSoftmax(x), &[x])
    }

    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if indices.is_empty() {
            return dim_err("gather with no indices".into());
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= xt.len()) {
            return Err(Error::Index(format!("gather index {i} of {}", xt.len())));
        }
        let out = indices.iter().map(|&i| xt.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(x, c), &[x])
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::Dimension("sum of no terms".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse KL `KL(softmax(student) || softmax(teacher))`.
    ///
    /// The teacher logits enter as a constant leaf, so nothing upstream of
    /// them is on this tape. `ln q` is clamped at -80.
    pub fn reverse_kl(&mut self, student_logits: Var, teacher_logits: &[f64]) -> Result<Var> {
        let s = self.value(student_logits);
        if s.len() != teacher_logits.len() {
            return dim_err(format!(
                "reverse_kl: student {} vs teacher {}",
                s.len(),
                teacher_logits.len()
            ));
        }
        if !s.is_finite() || teacher_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("reverse_kl received non-finite logits".into()));
        }
        let neg_log_q: Vec<f64> = super::clamped_log_softmax(teacher_logits)
            .into_iter()
            .map(|v| -v)
            .collect();
        let neg_log_q = self.constant(Tensor::vector(neg_log_q));
        let log_p = self.log_softmax(student_logits);
        let p = self.softmax(student_logits);
        let log_ratio = self.add(log_p, neg_log_q)?;
        let weighted = self.mul(p, log_ratio)?;
        Ok(self.sum(weighted))
    }

    /// Number of constant leaves that ended up with a gradient buffer.
    /// Zero by construction; exposed so callers can assert it.
    pub fn constant_gradient_count(&self, grads: &Gradients) -> usize {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| matches!(n.op, Op::Constant) && grads.grads[*i].is_some())
            .count()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| -> Result<()> {
                if v.0 >= id {
                    return Err(Error::Contract(format!("node {id} reads later node {}", v.0)));
                }
                let n = &self.nodes[v.0];
                if !n.requires_grad {
                    return Ok(());
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf);
                Ok(())
            };
            match &node.op {
                Op::Param | Op::Constant => {}
                Op::EmbedLookup { table, index } => {
                    let d = g.len();
                    acc(*table, &mut |buf| {
                        for (b, gv) in buf[index * d..(index + 1) * d].iter_mut().zip(&g) {
                            *b += gv;
                        }
                    })?;
                }
                Op::Linear { w, b, x } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let cols = xv.len();
                    acc(*w, &mut |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            for (bw, xj) in buf[i * cols..(i + 1) * cols].iter_mut().zip(xv) {
                                *bw += gi * xj;
                            }
                        }
                    })?;
                    if let Some(b) = b {
                        acc(*b, &mut |buf| {
                            for (bb, gi) in buf.iter_mut().zip(&g) {
                                *bb += gi;
                            }
                        })?;
                    }
                    acc(*x, &mut |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            for (bx, wij) in buf.iter_mut().zip(&wv[i * cols..(i + 1) * cols]) {
                                *bx += gi * wij;
                            }
                        }
                    })?;
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |buf| {
                        for ((b, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                            *b += gi * (1.0 - yi * yi);
                        }
                    })?;
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(v, &mut |buf| {
                            for (bb, gi) in buf.iter_mut().zip(&g) {
                                *bb += gi;
                            }
                        })?;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |buf| {
                        for ((x, gi), o) in buf.iter_mut().zip(&g).zip(bv) {
                            *x += gi * o;
                        }
                    })?;
                    acc(*b, &mut |buf| {
                        for ((x, gi), o) in buf.iter_mut().zip(&g).zip(av) {
                            *x += gi * o;
                        }
                    })?;
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    acc(*a, &mut |buf| {
                        for (x, gi) in buf.iter_mut().zip(&g[..na]) {
                            *x += gi;
                        }
                    })?;
                    acc(*b, &mut |buf| {
                        for (x, gi) in buf.iter_mut().zip(&g[na..]) {
                            *x += gi;
                        }
                    })?;
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    acc(*x, &mut |buf| {
                        for ((b, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                            *b += yi * (gi - dot);
                        }
                    })?;
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let total: f64 = g.iter().sum();
                    acc(*x, &mut |buf| {
                        for ((b, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                            *b += gi - yi.exp() * total;
                        }
                    })?;
                }
                Op::Gather { x, indices } => {
                    acc(*x, &mut |buf| {
                        for (&i, gi) in indices.iter().zip(&g) {
                            buf[i] += gi;
                        }
                    })?;
                }
                Op::Sum(x) => {
                    acc(*x, &mut |buf| {
                        for b in buf.iter_mut() {
                            *b += g[0];
                        }
                    })?;
                }
                Op::Scale(x, c) => {
                    acc(*x, &mut |buf| {
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += c * gi;
                        }
                    })?;
                }
            }
            if matches!(node.op, Op::Param) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}
