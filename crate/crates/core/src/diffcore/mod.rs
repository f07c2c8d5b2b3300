//! Symbolic differentiation over small tensor expression graphs.
//!
//! Derivatives are built as new graph nodes (source transformation) rather
//! than recorded on a tape, so a derivative can itself be differentiated.
//! That second-order path is what penalties on input gradients need: the
//! parameter gradient of `cos^2(grad_x f, grad_x g)` differentiates through
//! `grad_x f`.

mod check;
mod eval;
mod expr;
mod grad;
mod tensor;

pub use check::check_gradient;
pub use eval::{evaluate, evaluate_many, substitute, Bindings};
pub use expr::{
    add, add_const, clamp, constant, div, dot, log, mat_t_vec, matvec, mul, neg, nonlin, outer, relu, scalar,
    scale, scale_by, sigmoid, sigmoid_expr, softplus, softplus_expr, sq_norm, sqrt, sub, sum, sum_all, Expr,
    Nonlinearity, VarKind, Variable,
};
pub use grad::differentiate;
pub use tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("variable `{name}` declared {expected} but bound to {found}")]
    BindingShape { name: String, expected: Shape, found: Shape },
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("can only differentiate scalar expressions, got {0}")]
    NotScalar(Shape),
    #[error("empty term list")]
    Empty,
}

#[cfg(test)]
mod tests;
