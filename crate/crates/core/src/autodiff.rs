//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Leaves
//! are either constants or named parameters; [`Tape::backward`] returns one
//! gradient per registered parameter and nothing for constants. Nodes that do
//! not depend on any parameter are skipped during the backward sweep, so
//! frozen weights cost no gradient work.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{contract, shape, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(usize, usize),
    /// `x · wᵀ (+ b)`
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Gelu(usize),
    GatherRows { table: usize, ids: Vec<usize> },
    Sum(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Register a trainable parameter. Registering the same name twice
    /// returns the existing handle, so each parameter has one accumulator.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&index) = self.params.get(name) {
            return Var { tape: self.id, index };
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v.index);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(contract("variable was not recorded on this tape"));
        }
        Ok(v.index)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("a recorded operation".into()));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.record(value, Op::MatMul(a, b), &[a, b])
    }

    /// Fully-connected layer `x · wᵀ + b` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (x, w) = (self.check(x)?, self.check(w)?);
        let b = b.map(|b| self.check(b)).transpose()?;
        let value = eval_linear(&self.nodes[x].value, &self.nodes[w].value, b.map(|b| &self.nodes[b].value))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        self.record(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.sub(&self.nodes[b].value)?;
        self.record(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y)?;
        self.record(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let a = self.check(a)?;
        let value = self.nodes[a].value.scale(s);
        self.record(value, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let value = self.nodes[a].value.map(gelu);
        self.record(value, Op::Gelu(a), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.check(table)?;
        let value = self.nodes[table].value.gather_rows(ids)?;
        self.record(value, Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let value = Tensor::scalar(self.nodes[a].value.sum());
        self.record(value, Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let value = Tensor::scalar(self.nodes[a].value.sum_squares());
        self.record(value, Op::SumSquares(a), &[a])
    }

    fn eval(&self, op: &Op) -> Result<Option<Tensor>> {
        let v = |i: usize| &self.nodes[i].value;
        Ok(Some(match op {
            Op::Constant | Op::Param => return Ok(None),
            Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
            Op::Linear { x, w, b } => eval_linear(v(*x), v(*w), b.map(v))?,
            Op::Add(a, b) => v(*a).add(v(*b))?,
            Op::Sub(a, b) => v(*a).sub(v(*b))?,
            Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y)?,
            Op::Scale(a, s) => v(*a).scale(*s),
            Op::Gelu(a) => v(*a).map(gelu),
            Op::GatherRows { table, ids } => v(*table).gather_rows(ids)?,
            Op::Sum(a) => Tensor::scalar(v(*a).sum()),
            Op::SumSquares(a) => Tensor::scalar(v(*a).sum_squares()),
        }))
    }

    /// Recompute every recorded node from its inputs and report whether all
    /// values reproduce bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if let Some(value) = self.eval(&node.op)? {
                let same = value.shape() == node.value.shape()
                    && value.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// `∂loss/∂p` for every registered parameter `p`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root + 1];
        adj[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for (name, &index) in &self.params {
            let g = match adj.get_mut(index).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[index].value.shape()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.matmul_nt(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, val(*a).matmul_tn(g)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                if wants(*x) {
                    accumulate(adj, *x, g.matmul(val(*w))?)?;
                }
                if wants(*w) {
                    accumulate(adj, *w, g.matmul_tn(val(*x))?)?;
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = g.col_sums()?.reshape(val(*b).shape().to_vec())?;
                        accumulate(adj, *b, db)?;
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y)?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s))?,
            Op::Gelu(a) => accumulate(adj, *a, g.zip_map(val(*a), |gv, x| gv * gelu_grad(x))?)?,
            Op::GatherRows { table, ids } => {
                let t = val(*table);
                let cols = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * cols..(id + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                accumulate(adj, *table, dt)?;
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(adj, *a, Tensor::filled(val(*a).shape(), s))?;
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.data()[0];
                accumulate(adj, *a, val(*a).scale(s))?;
            }
        }
        Ok(())
    }
}

fn eval_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul_nt(w)?;
    if let Some(b) = b {
        let n = out.cols();
        if b.len() != n {
            return Err(shape(format!("bias of length {} for {n} outputs", b.len())));
        }
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
    match &mut adj[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Plain gradient descent: `p ← p − lr·g` for every named parameter.
///
/// The parameter and gradient name sets must match exactly.
pub fn sgd_step<'a, S: AsRef<str>>(
    params: impl IntoIterator<Item = (S, &'a mut Tensor)>,
    grads: &Gradients,
    lr: f32,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(contract(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    let params: Vec<_> = params.into_iter().collect();
    if params.len() != grads.len() {
        return Err(contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (name, _) in &params {
        match grads.get(name.as_ref()) {
            None => return Err(contract(format!("no gradient for parameter {}", name.as_ref()))),
            Some(_) => {}
        }
    }
    for (name, p) in params {
        let name = name.as_ref();
        let g = grads.get(name).expect("checked above");
        if g.shape() != p.shape() {
            return Err(shape(format!("gradient shape {:?} for parameter {name} of shape {:?}", g.shape(), p.shape())));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
