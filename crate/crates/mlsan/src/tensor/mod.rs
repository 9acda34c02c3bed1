//! Dense f64 tensors with define-by-run reverse-mode autodiff.
//!
//! Tensors are row-major with an explicit shape. The compute graph is
//! rebuilt on every forward pass; `backward` on a scalar loss walks the
//! recorded ops in reverse topological order and accumulates gradients
//! into every `requires_grad` leaf. The only broadcast rule is a row
//! vector applied over the rows of a matrix.

mod gradcheck;

pub use gradcheck::finite_difference_check;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
// Bumped whenever a leaf's data is mutated in place; lets backward detect
// graphs built before the mutation.
static MUTATION_EPOCH: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn current_epoch() -> u64 {
    MUTATION_EPOCH.load(Ordering::Relaxed)
}

fn bump_epoch() -> u64 {
    MUTATION_EPOCH.fetch_add(1, Ordering::Relaxed) + 1
}

/// Which elementwise binary operation to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// rhs is a row vector replicated over the rows of lhs.
    Row,
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Elem(ElemOp, Tensor, Tensor, Broadcast),
    Sigmoid(Tensor),
    Relu(Tensor),
    Scale(Tensor, f64),
    Sum(Tensor),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    EmbedRows(Tensor, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        /// Row-wise softmax probabilities saved from the forward pass.
        probs: Vec<f64>,
    },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
    created_at: u64,
    mutated_at: Cell<u64>,
    backward_done: Cell<bool>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data.borrow())
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape_len(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
            created_at: current_epoch(),
            mutated_at: Cell::new(0),
            backward_done: Cell::new(false),
        }))
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) || shape_len(&shape) != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new(shape, data, false, Op::Leaf))
    }

    /// Leaf with gradient tracking, i.e. a trainable parameter.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) || shape_len(&shape) != data.len() {
            return Err(Error::Dimension {
                op: "param",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new(shape, data, true, Op::Leaf))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape_len(&shape);
        Tensor::new(shape, vec![0.0; n], false, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.0.data.borrow()[0]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0.data.borrow()[i]
    }

    /// In-place write to a leaf. Invalidates graphs built before the write.
    pub fn set(&self, i: usize, v: f64) {
        self.0.data.borrow_mut()[i] = v;
        self.0.mutated_at.set(bump_epoch());
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        debug_assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
        drop(d);
        self.0.mutated_at.set(bump_epoch());
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn rows(&self) -> usize {
        match self.0.shape.len() {
            2 => self.0.shape[0],
            _ => 1,
        }
    }

    fn cols(&self) -> usize {
        match self.0.shape.len() {
            2 => self.0.shape[1],
            _ => self.len(),
        }
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ---- forward ops ----

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.0.shape.len() != 2 || rhs.0.shape.len() != 2 || self.0.shape[1] != rhs.0.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: rhs.0.shape.clone(),
            });
        }
        let (r, k, c) = (self.0.shape[0], self.0.shape[1], rhs.0.shape[1]);
        let a = self.0.data.borrow();
        let b = rhs.0.data.borrow();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        drop(a);
        drop(b);
        let rg = self.0.requires_grad || rhs.0.requires_grad;
        let op = if rg {
            Op::MatMul(self.clone(), rhs.clone())
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(vec![r, c], out, rg, op))
    }

    pub fn elementwise(op: ElemOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = if a.0.shape == b.0.shape {
            Broadcast::None
        } else if a.0.shape.len() == 2 && b.cols() == a.0.shape[1] && b.rows() == 1 {
            Broadcast::Row
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: a.0.shape.clone(),
                rhs: b.0.shape.clone(),
            });
        };
        let ad = a.0.data.borrow();
        let bd = b.0.data.borrow();
        let cols = a.cols();
        let mut out = Vec::with_capacity(ad.len());
        for (i, &av) in ad.iter().enumerate() {
            let bv = match bc {
                Broadcast::None => bd[i],
                Broadcast::Row => bd[i % cols],
            };
            out.push(match op {
                ElemOp::Add => av + bv,
                ElemOp::Sub => av - bv,
                ElemOp::Mul => av * bv,
            });
        }
        drop(ad);
        drop(bd);
        let rg = a.0.requires_grad || b.0.requires_grad;
        let node_op = if rg {
            Op::Elem(op, a.clone(), b.clone(), bc)
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(a.0.shape.clone(), out, rg, node_op))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(ElemOp::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(ElemOp::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(ElemOp::Mul, self, rhs)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| stable_sigmoid(x))
            .collect();
        let rg = self.0.requires_grad;
        let op = if rg { Op::Sigmoid(self.clone()) } else { Op::Leaf };
        Tensor::new(self.0.shape.clone(), out, rg, op)
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let rg = self.0.requires_grad;
        let op = if rg { Op::Relu(self.clone()) } else { Op::Leaf };
        Tensor::new(self.0.shape.clone(), out, rg, op)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|&x| x * c).collect();
        let rg = self.0.requires_grad;
        let op = if rg { Op::Scale(self.clone(), c) } else { Op::Leaf };
        Tensor::new(self.0.shape.clone(), out, rg, op)
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.0.data.borrow().iter().sum();
        let rg = self.0.requires_grad;
        let op = if rg { Op::Sum(self.clone()) } else { Op::Leaf };
        Tensor::new(vec![1], vec![s], rg, op)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.0.shape.len() != 2 || p.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: parts[0].0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
        }
        let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let c = p.cols();
                out.extend_from_slice(&p.0.data.borrow()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| p.0.requires_grad);
        let op = if rg {
            Op::ConcatCols(parts.to_vec())
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(vec![rows, total_cols], out, rg, op))
    }

    /// Vertical stacking of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = parts[0].cols();
        for p in parts {
            if p.0.shape.len() != 2 || p.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: parts[0].0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
        }
        let total_rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(total_rows * cols);
        for p in parts {
            out.extend_from_slice(&p.0.data.borrow());
        }
        let rg = parts.iter().any(|p| p.0.requires_grad);
        let op = if rg {
            Op::ConcatRows(parts.to_vec())
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(vec![total_rows, cols], out, rg, op))
    }

    /// Gathers rows of a 2-D table; gradients scatter-add back into it.
    pub fn embed_rows(table: &Tensor, row_indices: &[usize]) -> Result<Tensor> {
        if table.0.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "embed_rows",
                lhs: table.0.shape.clone(),
                rhs: vec![row_indices.len()],
            });
        }
        let (nrows, d) = (table.0.shape[0], table.0.shape[1]);
        for &r in row_indices {
            if r >= nrows {
                return Err(Error::Index(format!(
                    "row {r} out of range for table with {nrows} rows"
                )));
            }
        }
        let td = table.0.data.borrow();
        let mut out = Vec::with_capacity(row_indices.len() * d);
        for &r in row_indices {
            out.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        drop(td);
        let rg = table.0.requires_grad;
        let op = if rg {
            Op::EmbedRows(table.clone(), row_indices.to_vec())
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(vec![row_indices.len(), d], out, rg, op))
    }

    /// Mean over the batch of the weighted negative log-softmax of the
    /// target class. Log-sum-exp uses max subtraction.
    pub fn softmax_cross_entropy(
        &self,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Tensor> {
        if self.0.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.0.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (self.0.shape[0], self.0.shape[1]);
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "batch of {n} logit rows but {} targets",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= c {
                return Err(Error::Index(format!(
                    "target class {t} out of range for {c} classes"
                )));
            }
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::Config(format!(
                    "{} class weights for {c} classes",
                    w.len()
                )));
            }
            if w.iter().any(|&x| x <= 0.0) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        let d = self.0.data.borrow();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            let lse = max + sum.ln();
            let w = class_weights.map_or(1.0, |w| w[targets[i]]);
            total += w * (lse - row[targets[i]]);
        }
        drop(d);
        let loss = total / n as f64;
        let rg = self.0.requires_grad;
        let op = if rg {
            Op::SoftmaxCrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights: class_weights.map(|w| w.to_vec()),
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(Tensor::new(vec![1], vec![loss], rg, op))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable from it. A second call on the same
    /// loss, or a call after a leaf was mutated, is rejected.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if self.0.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this loss; re-run the forward pass".into(),
            ));
        }
        let order = self.topo_order();
        for node in &order {
            if matches!(node.0.op, Op::Leaf) && node.0.mutated_at.get() > self.0.created_at {
                return Err(Error::State(
                    "stale graph: a leaf was mutated after this loss was computed".into(),
                ));
            }
        }
        self.0.backward_done.set(true);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            node.propagate()?;
        }
        // Intermediate grads are scratch space; only leaves keep theirs.
        for node in &order {
            if !matches!(node.0.op, Op::Leaf) {
                *node.0.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative postorder DFS; child visit order is fixed, so the
        // resulting gradient accumulation order is deterministic.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            node.for_each_parent(|p| {
                if p.0.requires_grad && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            });
        }
        order
    }

    fn for_each_parent(&self, mut f: impl FnMut(&Tensor)) {
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Elem(_, a, b, _) => {
                f(a);
                f(b);
            }
            Op::Sigmoid(a) | Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) => f(a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                for p in parts {
                    f(p);
                }
            }
            Op::EmbedRows(t, _) => f(t),
            Op::SoftmaxCrossEntropy { logits, .. } => f(logits),
        }
    }

    fn propagate(&self) -> Result<()> {
        let grad = match self.0.grad.borrow().clone() {
            Some(g) => g,
            None => return Ok(()),
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k, c) = (a.0.shape[0], a.0.shape[1], b.0.shape[1]);
                if a.0.requires_grad {
                    let bd = b.0.data.borrow();
                    let mut ga = vec![0.0; r * k];
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += grad[i * c + j] * bd[p * c + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    drop(bd);
                    a.accumulate_grad(&ga);
                }
                if b.0.requires_grad {
                    let ad = a.0.data.borrow();
                    let mut gb = vec![0.0; k * c];
                    for i in 0..r {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gb[p * c + j] += av * grad[i * c + j];
                            }
                        }
                    }
                    drop(ad);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Elem(op, a, b, bc) => {
                let cols = a.cols();
                if a.0.requires_grad {
                    match op {
                        ElemOp::Add | ElemOp::Sub => a.accumulate_grad(&grad),
                        ElemOp::Mul => {
                            let bd = b.0.data.borrow();
                            let ga: Vec<f64> = grad
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| {
                                    g * match bc {
                                        Broadcast::None => bd[i],
                                        Broadcast::Row => bd[i % cols],
                                    }
                                })
                                .collect();
                            drop(bd);
                            a.accumulate_grad(&ga);
                        }
                    }
                }
                if b.0.requires_grad {
                    let raw: Vec<f64> = match op {
                        ElemOp::Add => grad.clone(),
                        ElemOp::Sub => grad.iter().map(|&g| -g).collect(),
                        ElemOp::Mul => {
                            let ad = a.0.data.borrow();
                            grad.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()
                        }
                    };
                    match bc {
                        Broadcast::None => b.accumulate_grad(&raw),
                        Broadcast::Row => {
                            let mut gb = vec![0.0; cols];
                            for (i, &g) in raw.iter().enumerate() {
                                gb[i % cols] += g;
                            }
                            b.accumulate_grad(&gb);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.0.data.borrow();
                let ga: Vec<f64> = grad
                    .iter()
                    .zip(y.iter())
                    .map(|(&g, &v)| g * v * (1.0 - v))
                    .collect();
                drop(y);
                a.accumulate_grad(&ga);
            }
            Op::Relu(a) => {
                let x = a.0.data.borrow();
                let ga: Vec<f64> = grad
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                drop(x);
                a.accumulate_grad(&ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                a.accumulate_grad(&ga);
            }
            Op::Sum(a) => {
                let ga = vec![grad[0]; a.len()];
                a.accumulate_grad(&ga);
            }
            Op::ConcatCols(parts) => {
                let rows = self.rows();
                let total_cols = self.cols();
                let mut offset = 0;
                for p in parts {
                    let c = p.cols();
                    if p.0.requires_grad {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(
                                &grad[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        p.accumulate_grad(&gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = self.cols();
                let mut offset = 0;
                for p in parts {
                    let n = p.rows() * cols;
                    if p.0.requires_grad {
                        p.accumulate_grad(&grad[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::EmbedRows(table, indices) => {
                let d = table.0.shape[1];
                let mut gt = vec![0.0; table.len()];
                for (i, &r) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] += grad[i * d + j];
                    }
                }
                table.accumulate_grad(&gt);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (n, c) = (logits.0.shape[0], logits.0.shape[1]);
                let g0 = grad[0] / n as f64;
                let mut gl = vec![0.0; n * c];
                for i in 0..n {
                    let w = weights.as_ref().map_or(1.0, |w| w[targets[i]]);
                    for j in 0..c {
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] = g0 * w * (probs[i * c + j] - indicator);
                    }
                }
                logits.accumulate_grad(&gl);
            }
        }
        Ok(())
    }
}

/// Branch-form logistic sigmoid; never overflows, output strictly in (0,1).
pub fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Clamp into the open interval; exp underflow can round to exactly 1.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), vec![5.0, 7.0]);
    }

    #[test]
    fn matmul_direct() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_mul() {
        let a = t(&[2], &[3.0, 4.0]);
        let b = t(&[2], &[2.0, 0.5]);
        assert_eq!(a.mul(&b).unwrap().data(), vec![6.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = t(&[2, 3], &[1.5, -2.0, 0.25, 3.0, -0.125, 7.0]);
        let z = Tensor::zeros(vec![2, 3]);
        assert_eq!(x.add(&z).unwrap().data(), x.data());
    }

    #[test]
    fn broadcast_row_vector() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2], &[10.0, 100.0]);
        assert_eq!(a.add(&b).unwrap().data(), vec![11.0, 102.0, 13.0, 104.0]);
        let bad = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        let hi = stable_sigmoid(50.0);
        assert!(hi > 1.0 - 1e-15 && hi < 1.0);
        let extreme = stable_sigmoid(1e6);
        assert!(extreme < 1.0 && extreme > 0.0);
        let lo = stable_sigmoid(-1e6);
        assert!(lo > 0.0 && lo < 1e-10);
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = t(&[1, 4], &[0.0; 4]);
        let loss = logits.softmax_cross_entropy(&[0], None).unwrap();
        assert!((loss.value() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_logits_no_overflow() {
        let logits = t(&[1, 2], &[1000.0, 0.0]);
        let loss = logits.softmax_cross_entropy(&[0], None).unwrap();
        assert!(loss.value().is_finite());
        assert!(loss.value() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = t(&[1, 3], &[0.0; 3]);
        assert!(matches!(
            logits.softmax_cross_entropy(&[3], None),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = p(&[3, 5], &[0.3, -1.0, 2.0, 0.7, -0.2, 5.0, 5.0, 5.0, 5.0, 5.0,
                                  -3.0, 0.0, 3.0, 1.0, 2.0]);
        let loss = logits.softmax_cross_entropy(&[0, 1, 2], None).unwrap();
        match &loss.0.op {
            Op::SoftmaxCrossEntropy { probs, .. } => {
                for i in 0..3 {
                    let s: f64 = probs[i * 5..(i + 1) * 5].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            _ => panic!("expected cross entropy node"),
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = p(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_quadratic() {
        let x = p(&[2], &[1.0, -2.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn backward_twice_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::State(_))));
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_stale_graph_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        let loss = x.sum();
        x.set(0, 5.0);
        assert!(matches!(loss.backward(), Err(Error::State(_))));
    }

    #[test]
    fn backward_deterministic_bit_identical() {
        let run = || {
            let x = p(&[2, 2], &[0.3, -0.7, 1.1, 0.9]);
            let w = p(&[2, 2], &[0.5, 0.25, -0.5, 2.0]);
            let loss = x
                .matmul(&w)
                .unwrap()
                .sigmoid()
                .softmax_cross_entropy(&[0, 1], None)
                .unwrap();
            loss.backward().unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        let (g1, g2) = (run(), run());
        assert_eq!(g1.0, g2.0);
        assert_eq!(g1.1, g2.1);
    }

    #[test]
    fn embed_rows_gradient_localized() {
        let table = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = Tensor::embed_rows(&table, &[1]).unwrap();
        picked.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_rows_out_of_range() {
        let table = p(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            Tensor::embed_rows(&table, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn concat_cols_roundtrip_grad() {
        let a = p(&[2, 1], &[1.0, 2.0]);
        let b = p(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let cat = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.data(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        cat.scale(2.0).sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 4]);
    }
}
