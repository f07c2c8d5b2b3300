use std::collections::HashMap;

use super::expr::{rebuild, topo_order, Expr, Op, Variable};
use super::tensor::{Shape, Tensor};
use super::ExprError;

/// Values for the free variables of an expression, keyed by variable name.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn extend(&mut self, other: Bindings) {
        self.values.extend(other.values);
    }
}

fn lookup<'a>(b: &'a Bindings, v: &Variable) -> Result<&'a Tensor, ExprError> {
    let t = b
        .get(v.name())
        .ok_or_else(|| ExprError::Unbound(v.name().to_owned()))?;
    if t.shape() != v.shape() {
        return Err(ExprError::BindingShape {
            name: v.name().to_owned(),
            expected: v.shape(),
            found: t.shape(),
        });
    }
    Ok(t)
}

fn apply(op: &Op, shape: Shape, b: &Bindings, vals: &HashMap<usize, Tensor>) -> Result<Tensor, ExprError> {
    let get = |e: &Expr| &vals[&e.id()];
    Ok(match op {
        Op::Var(v) => lookup(b, v)?.clone(),
        Op::Const(t) => t.clone(),
        Op::Add(x, y) => get(x).zip_map(get(y), |p, q| p + q),
        Op::Neg(x) => get(x).map(|p| -p),
        Op::Mul(x, y) => get(x).zip_map(get(y), |p, q| p * q),
        Op::Scale(s, x) => {
            let k = get(s).item();
            get(x).map(|p| k * p)
        }
        Op::Div(x, y) => get(x).zip_map(get(y), |p, q| p / q),
        Op::MatVec(m, v) => {
            let (m, v) = (get(m), get(v));
            let Shape::Matrix(r, c) = m.shape() else { unreachable!() };
            let out = (0..r)
                .map(|i| {
                    let row = &m.data()[i * c..(i + 1) * c];
                    row.iter().zip(v.data()).map(|(a, b)| a * b).sum()
                })
                .collect();
            Tensor::vector(out)
        }
        Op::MatTVec(m, v) => {
            let (m, v) = (get(m), get(v));
            let Shape::Matrix(r, c) = m.shape() else { unreachable!() };
            let mut out = vec![0.0; c];
            for i in 0..r {
                let vi = v.data()[i];
                for (o, a) in out.iter_mut().zip(&m.data()[i * c..(i + 1) * c]) {
                    *o += a * vi;
                }
            }
            Tensor::vector(out)
        }
        Op::Outer(u, v) => {
            let (u, v) = (get(u), get(v));
            let mut out = Vec::with_capacity(shape.len());
            for &a in u.data() {
                out.extend(v.data().iter().map(|&b| a * b));
            }
            Tensor::new(shape, out)
        }
        Op::Dot(x, y) => Tensor::scalar(get(x).data().iter().zip(get(y).data()).map(|(a, b)| a * b).sum()),
        Op::SqNorm(x) => Tensor::scalar(get(x).data().iter().map(|a| a * a).sum()),
        Op::Sum(x) => Tensor::scalar(get(x).data().iter().sum()),
        Op::Log(x) => get(x).map(f64::ln),
        Op::Sqrt(x) => get(x).map(f64::sqrt),
        Op::Nonlin(k, x) => get(x).map(|z| k.apply(z)),
        Op::Clamp { lo, hi, arg } => get(arg).map(|z| z.clamp(*lo, *hi)),
        Op::InRange { lo, hi, arg } => get(arg).map(|z| if z > *lo && z < *hi { 1.0 } else { 0.0 }),
    })
}

/// Evaluate `e` under `b`. Shared subexpressions are computed once.
///
/// Fails on unbound variables, bindings of the wrong shape, and any
/// non-finite intermediate value.
pub fn evaluate(e: &Expr, b: &Bindings) -> Result<Tensor, ExprError> {
    Ok(evaluate_many(std::slice::from_ref(e), b)?.remove(0))
}

/// Evaluate several expressions sharing one memo table.
pub fn evaluate_many(roots: &[Expr], b: &Bindings) -> Result<Vec<Tensor>, ExprError> {
    let mut vals: HashMap<usize, Tensor> = HashMap::new();
    for root in roots {
        for e in topo_order(root) {
            if vals.contains_key(&e.id()) {
                continue;
            }
            let t = apply(e.op(), e.shape(), b, &vals)?;
            if !t.is_finite() {
                return Err(ExprError::NonFinite(e.op().name()));
            }
            vals.insert(e.id(), t);
        }
    }
    Ok(roots.iter().map(|r| vals[&r.id()].clone()).collect())
}

/// Replace variables by expressions of the same shape.
pub fn substitute(e: &Expr, with: &HashMap<String, Expr>) -> Result<Expr, ExprError> {
    let mut built: HashMap<usize, Expr> = HashMap::new();
    for n in topo_order(e) {
        let out = match n.op() {
            Op::Var(v) => match with.get(v.name()) {
                Some(r) if r.shape() == v.shape() => r.clone(),
                Some(r) => {
                    return Err(ExprError::BindingShape {
                        name: v.name().to_owned(),
                        expected: v.shape(),
                        found: r.shape(),
                    })
                }
                None => n.clone(),
            },
            Op::Const(_) => n.clone(),
            op => {
                let kids: Vec<Expr> = op.children().iter().map(|c| built[&c.id()].clone()).collect();
                rebuild(op, &kids)?
            }
        };
        built.insert(n.id(), out);
    }
    Ok(built.remove(&e.id()).expect("root visited"))
}
