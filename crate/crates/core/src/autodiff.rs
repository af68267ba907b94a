//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s as a node
//! holding the local partial derivative towards each parent.
//! [`Tape::backward`] sweeps the nodes in reverse creation order and
//! accumulates adjoints.
//!
//! Constants never touch the tape: a `Var` without a tape reference is a
//! plain number, and combining it with a tracked `Var` records only the
//! tracked edge. This lets the same generic numeric code (see [`Real`]) run
//! on `f64` for the quadrature oracles and on `Var` for gradients.
//!
//! Operator overloads cannot return `Result`, so a domain violation inside
//! `a / b` or `x.ln()` is stored as the tape's first fault and the result
//! carries a NaN. [`Tape::fault`] and [`Tape::backward`] surface it. The
//! checked entry point is [`Tape::apply`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Square,
    Sum,
    /// Inputs are `[a_1..a_k, b_1..b_k]`; result is `Σ a_i b_i`.
    Dot,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("log of non-positive value {value} (input node {node})")]
    LogDomain { node: String, value: f64 },
    #[error("division by zero (denominator node {node})")]
    DivisionByZero { node: String },
    #[error("non-finite input {value} to {op} (input node {node})")]
    NonFiniteInput { op: OpKind, node: String, value: f64 },
    #[error("non-finite adjoint {value} at node {node}")]
    NonFiniteAdjoint { node: String, value: f64 },
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity {
        op: OpKind,
        expected: String,
        got: usize,
    },
    #[error("operands belong to different tapes")]
    ForeignTape,
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: OpKind,
    edge_start: usize,
    edge_len: usize,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    edges: Vec<(usize, f64)>,
    labels: HashMap<usize, String>,
    fault: Option<AdError>,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Value on a tape, or a free constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.idx, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            idx: usize::MAX,
            value,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_some()
    }

    fn unary(self, op: OpKind) -> Self {
        apply_or_fault(op, &[self])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(OpKind::Leaf, value, &[])
    }

    /// Leaf with a label used in error reports.
    pub fn named(&self, value: f64, label: impl Into<String>) -> Var<'_> {
        let v = self.var(value);
        self.inner.borrow_mut().labels.insert(v.idx, label.into());
        v
    }

    /// First domain or finiteness violation hit by an operator overload.
    pub fn fault(&self) -> Option<AdError> {
        self.inner.borrow().fault.clone()
    }

    /// Drop all nodes and any recorded fault.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.edges.clear();
        inner.labels.clear();
        inner.fault = None;
    }

    fn push(&self, op: OpKind, value: f64, parents: &[(usize, f64)]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let edge_start = inner.edges.len();
        inner.edges.extend_from_slice(parents);
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            edge_start,
            edge_len: parents.len(),
        });
        Var {
            tape: Some(self),
            idx,
            value,
        }
    }

    fn label_of(&self, idx: usize) -> String {
        let inner = self.inner.borrow();
        match inner.labels.get(&idx) {
            Some(l) => l.clone(),
            None => match inner.nodes.get(idx) {
                Some(n) => format!("#{idx} ({})", n.op),
                None => format!("#{idx}"),
            },
        }
    }

    fn record_fault(&self, err: AdError) {
        let mut inner = self.inner.borrow_mut();
        if inner.fault.is_none() {
            inner.fault = Some(err);
        }
    }

    /// Checked application of `op` to `inputs`.
    pub fn apply<'t>(&'t self, op: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        for v in inputs {
            if let Some(t) = v.tape {
                if !std::ptr::eq(t, self) {
                    return Err(AdError::ForeignTape);
                }
            }
        }
        let out = try_apply(op, inputs)?;
        if out.tape.is_some() || inputs.is_empty() {
            return Ok(out);
        }
        // All-constant inputs: pin the result to this tape so it has a node.
        Ok(self.push(op, out.value, &[]))
    }

    /// Adjoints of every node with respect to `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradient, AdError> {
        if let Some(err) = self.fault() {
            return Err(err);
        }
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.nodes.len()];
        let root_idx = match root.tape {
            Some(t) if std::ptr::eq(t, self) => root.idx,
            Some(_) => return Err(AdError::ForeignTape),
            None => return Ok(Gradient { adjoints: adj }),
        };
        adj[root_idx] = 1.0;
        for i in (0..=root_idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for &(p, d) in &inner.edges[node.edge_start..node.edge_start + node.edge_len] {
                adj[p] += a * d;
            }
        }
        drop(inner);
        if let Some((i, &value)) = adj.iter().enumerate().find(|(_, a)| !a.is_finite()) {
            return Err(AdError::NonFiniteAdjoint {
                node: self.label_of(i),
                value,
            });
        }
        Ok(Gradient { adjoints: adj })
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.tape.is_none() {
            return 0.0;
        }
        self.adjoints.get(v.idx).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }

    pub fn adjoints(&self) -> &[f64] {
        &self.adjoints
    }
}

fn node_name(v: &Var<'_>) -> String {
    match v.tape {
        Some(t) => t.label_of(v.idx),
        None => "constant".to_string(),
    }
}

fn arity(op: OpKind, inputs: &[Var<'_>]) -> Result<(), AdError> {
    let n = inputs.len();
    let (ok, expected) = match op {
        OpKind::Leaf => (n == 0, "0"),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => (n == 2, "2"),
        OpKind::Neg | OpKind::Exp | OpKind::Log | OpKind::Tanh | OpKind::Square => (n == 1, "1"),
        OpKind::Sum => (n >= 1, "at least 1"),
        OpKind::Dot => (n >= 2 && n.is_multiple_of(2), "a positive even number of"),
    };
    if ok {
        Ok(())
    } else {
        Err(AdError::Arity {
            op,
            expected: expected.to_string(),
            got: n,
        })
    }
}

fn try_apply<'t>(op: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>, AdError> {
    arity(op, inputs)?;
    for v in inputs {
        if !v.value.is_finite() {
            return Err(AdError::NonFiniteInput {
                op,
                node: node_name(v),
                value: v.value,
            });
        }
    }
    let x = |i: usize| inputs[i].value;
    let mut partials: Vec<f64> = Vec::with_capacity(inputs.len());
    let value = match op {
        OpKind::Leaf => unreachable!("leaves are created with Tape::var"),
        OpKind::Add => {
            partials.extend([1.0, 1.0]);
            x(0) + x(1)
        }
        OpKind::Sub => {
            partials.extend([1.0, -1.0]);
            x(0) - x(1)
        }
        OpKind::Mul => {
            partials.extend([x(1), x(0)]);
            x(0) * x(1)
        }
        OpKind::Div => {
            if x(1) == 0.0 {
                return Err(AdError::DivisionByZero {
                    node: node_name(&inputs[1]),
                });
            }
            let q = x(0) / x(1);
            partials.extend([1.0 / x(1), -q / x(1)]);
            q
        }
        OpKind::Neg => {
            partials.push(-1.0);
            -x(0)
        }
        OpKind::Exp => {
            let e = x(0).exp();
            partials.push(e);
            e
        }
        OpKind::Log => {
            if x(0) <= 0.0 {
                return Err(AdError::LogDomain {
                    node: node_name(&inputs[0]),
                    value: x(0),
                });
            }
            partials.push(1.0 / x(0));
            x(0).ln()
        }
        OpKind::Tanh => {
            let t = x(0).tanh();
            partials.push(1.0 - t * t);
            t
        }
        OpKind::Square => {
            partials.push(2.0 * x(0));
            x(0) * x(0)
        }
        OpKind::Sum => {
            partials.resize(inputs.len(), 1.0);
            inputs.iter().map(|v| v.value).sum()
        }
        OpKind::Dot => {
            let k = inputs.len() / 2;
            let (a, b) = inputs.split_at(k);
            partials.extend(b.iter().map(|v| v.value));
            partials.extend(a.iter().map(|v| v.value));
            a.iter().zip(b).map(|(u, w)| u.value * w.value).sum()
        }
    };

    let tape = inputs.iter().find_map(|v| v.tape);
    match tape {
        None => Ok(Var::constant(value)),
        Some(t) => {
            if inputs
                .iter()
                .filter_map(|v| v.tape)
                .any(|u| !std::ptr::eq(u, t))
            {
                return Err(AdError::ForeignTape);
            }
            let edges: Vec<(usize, f64)> = inputs
                .iter()
                .zip(&partials)
                .filter(|(v, _)| v.tape.is_some())
                .map(|(v, &d)| (v.idx, d))
                .collect();
            Ok(t.push(op, value, &edges))
        }
    }
}

fn apply_or_fault<'t>(op: OpKind, inputs: &[Var<'t>]) -> Var<'t> {
    match try_apply(op, inputs) {
        Ok(v) => v,
        Err(err) => {
            let tape = inputs.iter().find_map(|v| v.tape);
            match tape {
                Some(t) => {
                    t.record_fault(err);
                    let edges: Vec<(usize, f64)> = inputs
                        .iter()
                        .filter(|v| v.tape.is_some())
                        .map(|v| (v.idx, f64::NAN))
                        .collect();
                    t.push(op, f64::NAN, &edges)
                }
                None => Var::constant(f64::NAN),
            }
        }
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                apply_or_fault($kind, &[self, rhs])
            }
        }
    };
}

binop!(Add, add, OpKind::Add);
binop!(Sub, sub, OpKind::Sub);
binop!(Mul, mul, OpKind::Mul);
binop!(Div, div, OpKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg)
    }
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn square(self) -> Self {
        self * self
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().copied().fold(Self::cst(0.0), |a, b| a + b)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(Self::cst(0.0), |acc, (&u, &w)| acc + u * w)
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        self.unary(OpKind::Exp)
    }
    fn ln(self) -> Self {
        self.unary(OpKind::Log)
    }
    fn tanh(self) -> Self {
        self.unary(OpKind::Tanh)
    }
    fn square(self) -> Self {
        self.unary(OpKind::Square)
    }
    fn sum(xs: &[Self]) -> Self {
        match xs.len() {
            0 => Var::constant(0.0),
            1 => xs[0],
            _ => apply_or_fault(OpKind::Sum, xs),
        }
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        if a.is_empty() {
            return Var::constant(0.0);
        }
        let mut inputs = Vec::with_capacity(2 * a.len());
        inputs.extend_from_slice(a);
        inputs.extend_from_slice(b);
        apply_or_fault(OpKind::Dot, &inputs)
    }
}

/// Named, ordered variational parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    names: Vec<String>,
    values: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, AdError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut pv = Self::new();
        for (name, value) in pairs {
            pv.push(name, value)?;
        }
        Ok(pv)
    }

    /// Append a parameter; returns its position.
    pub fn push(&mut self, name: impl Into<String>, value: f64) -> Result<usize, AdError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AdError::DuplicateName(name));
        }
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.position(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> bool {
        match self.position(name) {
            Some(i) => {
                self.values[i] = value;
                true
            }
            None => false,
        }
    }

    /// Positions of parameters whose name starts with `prefix`.
    pub fn positions_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Register every parameter as a labelled leaf on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, &v)| tape.named(v, n.clone()))
            .collect()
    }
}

/// Largest relative disagreement between the tape gradient of `f` and
/// central finite differences, `max_i |g_ad − g_fd| / max(1, |g_ad|)`.
pub fn fd_check<F>(f: F, at: &ParamVector, step: f64) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(step > 0.0) {
        return Err(AdError::BadStep(step));
    }
    let tape = Tape::new();
    let leaves = at.leaves(&tape);
    let root = f(&tape, &leaves);
    let grad = tape.backward(root)?.wrt_all(&leaves);

    let eval = |values: &[f64]| {
        let t = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|&v| t.var(v)).collect();
        f(&t, &vars).value()
    };
    let mut worst = 0.0_f64;
    let mut values = at.values().to_vec();
    for (i, &g_ad) in grad.iter().enumerate() {
        let orig = values[i];
        values[i] = orig + step;
        let up = eval(&values);
        values[i] = orig - step;
        let down = eval(&values);
        values[i] = orig;
        let g_fd = (up - down) / (2.0 * step);
        let rel = (g_ad - g_fd).abs() / g_ad.abs().max(1.0);
        if rel.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
