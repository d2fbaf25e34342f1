//! Tape-based reverse-mode differentiation over `f64` scalars.
//!
//! A [`Tape`] records every operation as an append-only node list. [`Var`] is a
//! cheap copyable handle into a tape; arithmetic on `Var`s records new nodes.
//! [`Tape::backward`] sweeps the list in reverse and returns the adjoint of
//! every node with respect to a chosen root.
//!
//! The [`Scalar`] trait abstracts over `f64` and `Var`, so model code (network
//! forward passes, ODE right-hand sides, integrators) is written once and runs
//! either on plain floats or on the tape.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("non-finite value {0} cannot be placed on the tape")]
    NonFinite(f64),
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("division by zero")]
    DivisionByZero,
    #[error("{op:?} takes {expected} argument(s), got {got}")]
    Arity { op: Op, expected: usize, got: usize },
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    Square,
    PowI(i32),
    /// `max(x, 0)`; the derivative at exactly zero is 0.
    Max0,
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Offset(f64),
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => a / b,
            Op::Neg => -a,
            Op::Sin => a.sin(),
            Op::Cos => a.cos(),
            Op::Tanh => a.tanh(),
            Op::Exp => a.exp(),
            Op::Square => a * a,
            Op::PowI(n) => a.powi(n),
            Op::Max0 => max0(a),
            Op::Scale(c) => c * a,
            Op::Offset(c) => a + c,
        }
    }

    /// Local partial derivatives with respect to each argument.
    fn partials(self, a: f64, b: f64, out: f64) -> [f64; 2] {
        match self {
            Op::Add => [1.0, 1.0],
            Op::Sub => [1.0, -1.0],
            Op::Mul => [b, a],
            Op::Div => [1.0 / b, -a / (b * b)],
            Op::Neg => [-1.0, 0.0],
            Op::Sin => [a.cos(), 0.0],
            Op::Cos => [-a.sin(), 0.0],
            Op::Tanh => [1.0 - out * out, 0.0],
            Op::Exp => [out, 0.0],
            Op::Square => [2.0 * a, 0.0],
            Op::PowI(0) => [0.0, 0.0],
            Op::PowI(n) => [f64::from(n) * a.powi(n - 1), 0.0],
            Op::Max0 => [if a > 0.0 { 1.0 } else { 0.0 }, 0.0],
            Op::Scale(c) => [c, 0.0],
            Op::Offset(_) => [1.0, 0.0],
        }
    }
}

fn max0(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Leaf,
    Op(Op),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: Kind,
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

/// Append-only record of a computation. Parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places an independent variable on the tape.
    pub fn leaf(&self, value: f64) -> Result<Var<'_>, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite(value));
        }
        Ok(self.push_leaf(value))
    }

    /// Checked application of a primitive.
    pub fn apply<'t>(&'t self, op: Op, args: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        if args.len() != op.arity() {
            return Err(AdError::Arity {
                op,
                expected: op.arity(),
                got: args.len(),
            });
        }
        if args.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(AdError::TapeMismatch);
        }
        if op == Op::Div && args[1].value == 0.0 {
            return Err(AdError::DivisionByZero);
        }
        let b = args.get(1).copied();
        let a = args[0];
        let value = op.eval(a.value, b.map_or(0.0, |b| b.value));
        if !value.is_finite() {
            return Err(AdError::NonFinite(value));
        }
        Ok(match b {
            Some(b) => self.push_binary(op, a, b),
            None => self.push_unary(op, a),
        })
    }

    fn push_leaf(&self, value: f64) -> Var<'_> {
        self.push(Kind::Leaf, [0; 2], [0.0; 2], value)
    }

    fn push_unary<'t>(&'t self, op: Op, a: Var<'t>) -> Var<'t> {
        let value = op.eval(a.value, 0.0);
        let partials = op.partials(a.value, 0.0, value);
        self.push(Kind::Op(op), [a.index, a.index], partials, value)
    }

    fn push_binary<'t>(&'t self, op: Op, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        assert!(std::ptr::eq(a.tape, b.tape), "operands belong to different tapes");
        let value = op.eval(a.value, b.value);
        let partials = op.partials(a.value, b.value, value);
        self.push(Kind::Op(op), [a.index, b.index], partials, value)
    }

    fn push(&self, kind: Kind, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape exceeds u32::MAX nodes");
        nodes.push(Node {
            kind,
            parents,
            partials,
            value,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Reverse sweep from `root`. Nodes recorded after `root` are ignored.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.tape, self), "root belongs to a different tape");
        let nodes = self.nodes.borrow();
        let end = root.index as usize + 1;
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[root.index as usize] = 1.0;
        for i in (0..end).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = &nodes[i];
            match node.kind {
                Kind::Leaf => {}
                Kind::Op(op) => {
                    let [p0, p1] = node.parents;
                    debug_assert!((p0 as usize) < i && (p1 as usize) < i);
                    adjoints[p0 as usize] += adj * node.partials[0];
                    if op.arity() == 2 {
                        adjoints[p1 as usize] += adj * node.partials[1];
                    }
                }
            }
        }
        let leaves = nodes.iter().map(|n| matches!(n.kind, Kind::Leaf)).collect();
        Gradients { adjoints, leaves }
    }

    /// Recomputes every node value from the leaves.
    pub fn replay(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<f64> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.kind {
                Kind::Leaf => node.value,
                Kind::Op(op) => {
                    let a = values[node.parents[0] as usize];
                    let b = if op.arity() == 2 {
                        values[node.parents[1] as usize]
                    } else {
                        0.0
                    };
                    op.eval(a, b)
                }
            };
            values.push(v);
        }
        values
    }

    /// Stored forward values, in recording order.
    pub fn values(&self) -> Vec<f64> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }

    /// True when every node's parents precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes.borrow().iter().enumerate().all(|(i, n)| match n.kind {
            Kind::Leaf => true,
            Kind::Op(_) => n.parents.iter().all(|&p| (p as usize) < i),
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    adjoints: Vec<f64>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Derivative of the root with respect to `var`; 0 if `var` is not an ancestor.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adjoints.get(var.index as usize).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }

    /// `(node id, derivative)` for every leaf on the tape.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adjoints
            .iter()
            .zip(&self.leaves)
            .enumerate()
            .filter(|(_, (_, &leaf))| leaf)
            .map(|(i, (&g, _))| (i, g))
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn id(self) -> usize {
        self.index as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op) -> Self {
        self.tape.push_unary(op, self)
    }
}

macro_rules! var_ops {
    ($($trait:ident $method:ident $op:ident;)*) => {$(
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.push_binary(Op::$op, self, rhs)
            }
        }
    )*};
}

var_ops! {
    Add add Add;
    Sub sub Sub;
    Mul mul Mul;
    Div div Div;
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(Op::Offset(rhs))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(Op::Offset(-rhs))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(Op::Scale(rhs))
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(Op::Scale(1.0 / rhs))
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs) + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }
}

/// Real-number interface shared by `f64` and [`Var`].
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same context as `self` (same tape for `Var`).
    fn constant_like(&self, c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn square(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max0(self) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, c: f64) -> Self {
        c
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn max0(self) -> Self {
        max0(self)
    }
}

impl Scalar for Var<'_> {
    fn value(&self) -> f64 {
        self.value
    }
    fn constant_like(&self, c: f64) -> Self {
        self.tape.push_leaf(c)
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin)
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos)
    }
    fn tanh(self) -> Self {
        self.unary(Op::Tanh)
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp)
    }
    fn square(self) -> Self {
        self.unary(Op::Square)
    }
    fn powi(self, n: i32) -> Self {
        self.unary(Op::PowI(n))
    }
    fn max0(self) -> Self {
        self.unary(Op::Max0)
    }
}

/// Pins a closure to the higher-ranked signature expected by
/// [`value_and_grad`] and [`finite_diff_check`], which closure inference
/// cannot always work out on its own.
pub fn tape_fn<F, E>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    f
}

/// Value and gradient of `f` at `params`, computed on a fresh tape.
pub fn value_and_grad<F, E>(f: F, params: &[f64]) -> Result<(f64, Vec<f64>), E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<AdError>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|&p| tape.leaf(p))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out);
    Ok((out.value(), grads.wrt_all(&vars)))
}

/// Largest coordinate-wise disagreement between the reverse-mode gradient of
/// `f` and a central finite difference with step `h`, measured as
/// `|fd_i - grad_i| / max(1, |grad_i|)`.
pub fn finite_diff_check<F, E>(f: F, params: &[f64], h: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<AdError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, grad) = value_and_grad(&f, params)?;
    let eval = |p: &[f64]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars = p
            .iter()
            .map(|&x| tape.leaf(x))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(f(&tape, &vars)?.value())
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = eval(&probe)?;
        probe[i] = params[i] - h;
        let down = eval(&probe)?;
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
    }
    Ok(worst)
}
