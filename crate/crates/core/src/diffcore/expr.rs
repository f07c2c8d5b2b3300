use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use super::tensor::{Shape, Tensor};
use super::ExprError;

/// Whether a variable is data fed to the model or a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VarKind {
    Input,
    Param,
}

/// A named leaf of an expression graph. Variables are identified by name.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Variable {
    name: Arc<str>,
    kind: VarKind,
    shape: Shape,
}

impl Variable {
    pub fn new(name: impl AsRef<str>, kind: VarKind, shape: Shape) -> Self {
        Variable { name: Arc::from(name.as_ref()), kind, shape }
    }

    pub fn input(name: impl AsRef<str>, shape: Shape) -> Self {
        Variable::new(name, VarKind::Input, shape)
    }

    pub fn param(name: impl AsRef<str>, shape: Shape) -> Self {
        Variable::new(name, VarKind::Param, shape)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> VarKind {
        self.kind
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn expr(&self) -> Expr {
        Expr::leaf(Op::Var(self.clone()), self.shape)
    }
}

/// Elementwise nonlinearities. `Step` is the derivative of `Relu` (zero at
/// exactly 0) and has zero derivative itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Relu,
    Softplus,
    Sigmoid,
    Step,
}

impl Nonlinearity {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Softplus => softplus(z),
            Nonlinearity::Sigmoid => sigmoid(z),
            Nonlinearity::Step => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// ln(1 + e^z), stable for large |z|.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Var(Variable),
    Const(Tensor),
    Add(Expr, Expr),
    Neg(Expr),
    /// Elementwise product of equal shapes.
    Mul(Expr, Expr),
    /// Scalar (first operand) times tensor.
    Scale(Expr, Expr),
    /// Elementwise quotient of equal shapes.
    Div(Expr, Expr),
    MatVec(Expr, Expr),
    /// Transposed matrix times vector.
    MatTVec(Expr, Expr),
    Outer(Expr, Expr),
    /// Sum of elementwise products; Frobenius inner product for matrices.
    Dot(Expr, Expr),
    SqNorm(Expr),
    Sum(Expr),
    Log(Expr),
    Sqrt(Expr),
    Nonlin(Nonlinearity, Expr),
    Clamp { lo: f64, hi: f64, arg: Expr },
    /// Indicator of lo < x < hi; the derivative of `Clamp`.
    InRange { lo: f64, hi: f64, arg: Expr },
}

impl Op {
    pub(crate) fn children(&self) -> Vec<&Expr> {
        match self {
            Op::Var(_) | Op::Const(_) => vec![],
            Op::Neg(a)
            | Op::SqNorm(a)
            | Op::Sum(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Nonlin(_, a)
            | Op::Clamp { arg: a, .. }
            | Op::InRange { arg: a, .. } => vec![a],
            Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::Scale(a, b)
            | Op::Div(a, b)
            | Op::MatVec(a, b)
            | Op::MatTVec(a, b)
            | Op::Outer(a, b)
            | Op::Dot(a, b) => vec![a, b],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Var(_) => "var",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Neg(_) => "neg",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Div(..) => "div",
            Op::MatVec(..) => "matvec",
            Op::MatTVec(..) => "mat_t_vec",
            Op::Outer(..) => "outer",
            Op::Dot(..) => "dot",
            Op::SqNorm(_) => "sq_norm",
            Op::Sum(_) => "sum",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Nonlin(..) => "nonlinearity",
            Op::Clamp { .. } => "clamp",
            Op::InRange { .. } => "in_range",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Shape,
}

/// Immutable, shareable node of a computation DAG.
///
/// Cloning is cheap; structurally shared subgraphs are evaluated once.
#[derive(Clone)]
pub struct Expr(pub(crate) Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({} {})", self.0.op.name(), self.0.shape)
    }
}

impl Expr {
    fn leaf(op: Op, shape: Shape) -> Expr {
        Expr(Arc::new(Node { op, shape }))
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Number of distinct nodes reachable from this expression.
    pub fn node_count(&self) -> usize {
        topo_order(self).len()
    }

    /// Distinct free variables, in first-visit order.
    pub fn variables(&self) -> Vec<Variable> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in topo_order(self) {
            if let Op::Var(v) = e.op() {
                if seen.insert(v.name().to_owned()) {
                    out.push(v.clone());
                }
            }
        }
        out
    }
}

/// Post-order over the DAG: every node appears after all of its operands.
pub(crate) fn topo_order(root: &Expr) -> Vec<Expr> {
    let mut order = Vec::new();
    let mut done: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Expr, bool)> = vec![(root.clone(), false)];
    while let Some((e, expanded)) = stack.pop() {
        if done.contains(&e.id()) {
            continue;
        }
        if expanded {
            done.insert(e.id());
            order.push(e);
        } else {
            stack.push((e.clone(), true));
            for c in e.op().children().into_iter().rev() {
                if !done.contains(&c.id()) {
                    stack.push((c.clone(), false));
                }
            }
        }
    }
    order
}

fn mismatch(op: &'static str, a: Shape, b: Shape) -> ExprError {
    ExprError::ShapeMismatch { op, left: a, right: b }
}

fn node(op: Op, shape: Shape) -> Expr {
    Expr(Arc::new(Node { op, shape }))
}

pub fn constant(t: Tensor) -> Expr {
    let shape = t.shape();
    node(Op::Const(t), shape)
}

pub fn scalar(v: f64) -> Expr {
    constant(Tensor::scalar(v))
}

pub fn add(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a.shape(), b.shape()));
    }
    Ok(node(Op::Add(a.clone(), b.clone()), a.shape()))
}

pub fn neg(a: &Expr) -> Expr {
    node(Op::Neg(a.clone()), a.shape())
}

pub fn sub(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    add(a, &neg(b))
}

pub fn mul(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", a.shape(), b.shape()));
    }
    Ok(node(Op::Mul(a.clone(), b.clone()), a.shape()))
}

pub fn scale(s: &Expr, a: &Expr) -> Result<Expr, ExprError> {
    if s.shape() != Shape::Scalar {
        return Err(mismatch("scale", s.shape(), a.shape()));
    }
    Ok(node(Op::Scale(s.clone(), a.clone()), a.shape()))
}

pub fn div(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if a.shape() != b.shape() {
        return Err(mismatch("div", a.shape(), b.shape()));
    }
    Ok(node(Op::Div(a.clone(), b.clone()), a.shape()))
}

pub fn matvec(m: &Expr, v: &Expr) -> Result<Expr, ExprError> {
    match (m.shape(), v.shape()) {
        (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => {
            Ok(node(Op::MatVec(m.clone(), v.clone()), Shape::Vector(r)))
        }
        (a, b) => Err(mismatch("matvec", a, b)),
    }
}

pub fn mat_t_vec(m: &Expr, v: &Expr) -> Result<Expr, ExprError> {
    match (m.shape(), v.shape()) {
        (Shape::Matrix(r, c), Shape::Vector(n)) if r == n => {
            Ok(node(Op::MatTVec(m.clone(), v.clone()), Shape::Vector(c)))
        }
        (a, b) => Err(mismatch("mat_t_vec", a, b)),
    }
}

pub fn outer(u: &Expr, v: &Expr) -> Result<Expr, ExprError> {
    match (u.shape(), v.shape()) {
        (Shape::Vector(r), Shape::Vector(c)) => {
            Ok(node(Op::Outer(u.clone(), v.clone()), Shape::Matrix(r, c)))
        }
        (a, b) => Err(mismatch("outer", a, b)),
    }
}

pub fn dot(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if a.shape() != b.shape() {
        return Err(mismatch("dot", a.shape(), b.shape()));
    }
    Ok(node(Op::Dot(a.clone(), b.clone()), Shape::Scalar))
}

pub fn sq_norm(a: &Expr) -> Expr {
    node(Op::SqNorm(a.clone()), Shape::Scalar)
}

pub fn sum(a: &Expr) -> Expr {
    node(Op::Sum(a.clone()), Shape::Scalar)
}

pub fn log(a: &Expr) -> Expr {
    node(Op::Log(a.clone()), a.shape())
}

pub fn sqrt(a: &Expr) -> Expr {
    node(Op::Sqrt(a.clone()), a.shape())
}

pub fn nonlin(kind: Nonlinearity, a: &Expr) -> Expr {
    node(Op::Nonlin(kind, a.clone()), a.shape())
}

pub fn relu(a: &Expr) -> Expr {
    nonlin(Nonlinearity::Relu, a)
}

pub fn softplus_expr(a: &Expr) -> Expr {
    nonlin(Nonlinearity::Softplus, a)
}

pub fn sigmoid_expr(a: &Expr) -> Expr {
    nonlin(Nonlinearity::Sigmoid, a)
}

pub fn clamp(a: &Expr, lo: f64, hi: f64) -> Expr {
    node(Op::Clamp { lo, hi, arg: a.clone() }, a.shape())
}

pub(crate) fn in_range(a: &Expr, lo: f64, hi: f64) -> Expr {
    node(Op::InRange { lo, hi, arg: a.clone() }, a.shape())
}

/// `k * a` for a literal `k`.
pub fn scale_by(k: f64, a: &Expr) -> Expr {
    node(Op::Scale(scalar(k), a.clone()), a.shape())
}

/// `a + k` elementwise for a literal `k`.
pub fn add_const(a: &Expr, k: f64) -> Expr {
    let c = constant(Tensor::filled(a.shape(), k));
    node(Op::Add(a.clone(), c), a.shape())
}

/// Sum of a nonempty list of equal-shaped expressions.
pub fn sum_all(terms: &[Expr]) -> Result<Expr, ExprError> {
    let (first, rest) = terms.split_first().ok_or(ExprError::Empty)?;
    rest.iter().try_fold(first.clone(), |acc, t| add(&acc, t))
}

/// Rebuild an operator over new operands, re-checking shapes.
pub(crate) fn rebuild(op: &Op, kids: &[Expr]) -> Result<Expr, ExprError> {
    Ok(match op {
        Op::Var(v) => v.expr(),
        Op::Const(t) => constant(t.clone()),
        Op::Add(..) => add(&kids[0], &kids[1])?,
        Op::Neg(_) => neg(&kids[0]),
        Op::Mul(..) => mul(&kids[0], &kids[1])?,
        Op::Scale(..) => scale(&kids[0], &kids[1])?,
        Op::Div(..) => div(&kids[0], &kids[1])?,
        Op::MatVec(..) => matvec(&kids[0], &kids[1])?,
        Op::MatTVec(..) => mat_t_vec(&kids[0], &kids[1])?,
        Op::Outer(..) => outer(&kids[0], &kids[1])?,
        Op::Dot(..) => dot(&kids[0], &kids[1])?,
        Op::SqNorm(_) => sq_norm(&kids[0]),
        Op::Sum(_) => sum(&kids[0]),
        Op::Log(_) => log(&kids[0]),
        Op::Sqrt(_) => sqrt(&kids[0]),
        Op::Nonlin(k, _) => nonlin(*k, &kids[0]),
        Op::Clamp { lo, hi, .. } => clamp(&kids[0], *lo, *hi),
        Op::InRange { lo, hi, .. } => in_range(&kids[0], *lo, *hi),
    })
}
