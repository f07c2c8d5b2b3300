use std::collections::HashMap;

use super::expr::*;
use super::tensor::{Shape, Tensor};
use super::ExprError;

fn accumulate(adj: &mut HashMap<usize, Expr>, target: &Expr, contribution: Expr) -> Result<(), ExprError> {
    let id = target.id();
    let next = match adj.remove(&id) {
        Some(prev) => add(&prev, &contribution)?,
        None => contribution,
    };
    adj.insert(id, next);
    Ok(())
}

/// Symbolic reverse-mode derivative of a scalar expression.
///
/// Returns one derivative expression per requested variable, each with that
/// variable's shape. The results are ordinary [`Expr`]s, so they can be
/// evaluated, composed into larger objectives, and differentiated again.
/// Variables the expression does not depend on get a zero constant.
pub fn differentiate(e: &Expr, wrt: &[Variable]) -> Result<Vec<Expr>, ExprError> {
    if e.shape() != Shape::Scalar {
        return Err(ExprError::NotScalar(e.shape()));
    }
    let order = topo_order(e);
    let mut adj: HashMap<usize, Expr> = HashMap::new();
    let mut var_adj: HashMap<String, Expr> = HashMap::new();
    adj.insert(e.id(), scalar(1.0));

    for n in order.iter().rev() {
        let Some(g) = adj.remove(&n.id()) else { continue };
        match n.op() {
            Op::Var(v) => {
                let next = match var_adj.remove(v.name()) {
                    Some(prev) => add(&prev, &g)?,
                    None => g,
                };
                var_adj.insert(v.name().to_owned(), next);
            }
            Op::Const(_) | Op::InRange { .. } | Op::Nonlin(Nonlinearity::Step, _) => {}
            Op::Add(a, b) => {
                accumulate(&mut adj, a, g.clone())?;
                accumulate(&mut adj, b, g)?;
            }
            Op::Neg(a) => accumulate(&mut adj, a, neg(&g))?,
            Op::Mul(a, b) => {
                accumulate(&mut adj, a, mul(&g, b)?)?;
                accumulate(&mut adj, b, mul(&g, a)?)?;
            }
            Op::Scale(s, a) => {
                accumulate(&mut adj, s, dot(&g, a)?)?;
                accumulate(&mut adj, a, scale(s, &g)?)?;
            }
            Op::Div(a, b) => {
                accumulate(&mut adj, a, div(&g, b)?)?;
                // d(a/b)/db = -(a/b)/b
                let q = div(&mul(&g, n)?, b)?;
                accumulate(&mut adj, b, neg(&q))?;
            }
            Op::MatVec(m, v) => {
                accumulate(&mut adj, m, outer(&g, v)?)?;
                accumulate(&mut adj, v, mat_t_vec(m, &g)?)?;
            }
            Op::MatTVec(m, v) => {
                accumulate(&mut adj, m, outer(v, &g)?)?;
                accumulate(&mut adj, v, matvec(m, &g)?)?;
            }
            Op::Outer(u, v) => {
                accumulate(&mut adj, u, matvec(&g, v)?)?;
                accumulate(&mut adj, v, mat_t_vec(&g, u)?)?;
            }
            Op::Dot(a, b) => {
                accumulate(&mut adj, a, scale(&g, b)?)?;
                accumulate(&mut adj, b, scale(&g, a)?)?;
            }
            Op::SqNorm(a) => {
                let two_g = scale_by(2.0, &g);
                accumulate(&mut adj, a, scale(&two_g, a)?)?;
            }
            Op::Sum(a) => {
                let ones = constant(Tensor::filled(a.shape(), 1.0));
                accumulate(&mut adj, a, scale(&g, &ones)?)?;
            }
            Op::Log(a) => accumulate(&mut adj, a, div(&g, a)?)?,
            Op::Sqrt(a) => {
                let twice = add(n, n)?;
                accumulate(&mut adj, a, div(&g, &twice)?)?;
            }
            Op::Nonlin(kind, a) => {
                let slope = match kind {
                    Nonlinearity::Relu => nonlin(Nonlinearity::Step, a),
                    Nonlinearity::Softplus => nonlin(Nonlinearity::Sigmoid, a),
                    // s' = s (1 - s)
                    Nonlinearity::Sigmoid => mul(n, &add_const(&neg(n), 1.0))?,
                    Nonlinearity::Step => unreachable!("handled above"),
                };
                accumulate(&mut adj, a, mul(&g, &slope)?)?;
            }
            Op::Clamp { lo, hi, arg } => {
                accumulate(&mut adj, arg, mul(&g, &in_range(arg, *lo, *hi))?)?;
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|v| {
            var_adj
                .get(v.name())
                .cloned()
                .unwrap_or_else(|| constant(Tensor::zeros(v.shape())))
        })
        .collect())
}
