use super::eval::{evaluate, evaluate_many, Bindings};
use super::expr::{Expr, Variable};
use super::grad::differentiate;
use super::ExprError;

/// Worst component-wise discrepancy between symbolic derivatives and central
/// finite differences `(f(v+h) - f(v-h)) / 2h`.
///
/// Each component's error is `|fd - analytic| / max(1, |analytic|)`.
pub fn check_gradient(e: &Expr, b: &Bindings, wrt: &[Variable], h: f64) -> Result<f64, ExprError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let grads = differentiate(e, wrt)?;
    let analytic = evaluate_many(&grads, b)?;
    let mut probe = b.clone();
    let mut worst: f64 = 0.0;
    for (var, an) in wrt.iter().zip(&analytic) {
        for k in 0..an.data().len() {
            let orig = probe.get(var.name()).ok_or_else(|| ExprError::Unbound(var.name().to_owned()))?.data()[k];
            probe.get_mut(var.name()).unwrap().data_mut()[k] = orig + h;
            let up = evaluate(e, &probe)?.item();
            probe.get_mut(var.name()).unwrap().data_mut()[k] = orig - h;
            let down = evaluate(e, &probe)?.item();
            probe.get_mut(var.name()).unwrap().data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = an.data()[k];
            worst = worst.max((fd - a).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
