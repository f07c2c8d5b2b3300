use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn bind_scalar(name: &str, v: f64) -> Bindings {
    let mut b = Bindings::new();
    b.insert(name, Tensor::scalar(v));
    b
}

#[test]
fn evaluates_hand_examples() {
    let x = Variable::input("x", Shape::Scalar);
    let xx = dot(&x.expr(), &x.expr()).unwrap();
    assert_eq!(evaluate(&xx, &bind_scalar("x", 3.0)).unwrap().item(), 9.0);

    let sp = softplus_expr(&scalar(0.0));
    assert!((evaluate(&sp, &Bindings::new()).unwrap().item() - 2f64.ln()).abs() < 1e-15);

    let r = relu(&scalar(-2.0));
    assert_eq!(evaluate(&r, &Bindings::new()).unwrap().item(), 0.0);
}

#[test]
fn first_derivatives_match_hand_values() {
    let x = Variable::input("x", Shape::Scalar);
    let xx = mul(&x.expr(), &x.expr()).unwrap();
    let d = differentiate(&xx, std::slice::from_ref(&x)).unwrap();
    assert_eq!(evaluate(&d[0], &bind_scalar("x", 3.0)).unwrap().item(), 6.0);

    let sp = softplus_expr(&x.expr());
    let d = differentiate(&sp, std::slice::from_ref(&x)).unwrap();
    assert_eq!(evaluate(&d[0], &bind_scalar("x", 0.0)).unwrap().item(), 0.5);
}

#[test]
fn relu_derivative_is_zero_at_the_kink() {
    let x = Variable::input("x", Shape::Scalar);
    let d = differentiate(&relu(&x.expr()), std::slice::from_ref(&x)).unwrap();
    assert_eq!(evaluate(&d[0], &bind_scalar("x", 0.0)).unwrap().item(), 0.0);
    assert_eq!(evaluate(&d[0], &bind_scalar("x", 1e-300)).unwrap().item(), 1.0);
}

#[test]
fn derivative_of_a_derivative() {
    // d/dθ [ d/dx θx² ] = 2x
    let x = Variable::input("x", Shape::Scalar);
    let th = Variable::param("theta", Shape::Scalar);
    let e = mul(&th.expr(), &mul(&x.expr(), &x.expr()).unwrap()).unwrap();
    let dx = differentiate(&e, std::slice::from_ref(&x)).unwrap().remove(0);
    let dth = differentiate(&dx, std::slice::from_ref(&th)).unwrap().remove(0);
    let mut b = bind_scalar("x", 1.5);
    b.insert("theta", Tensor::scalar(-4.0));
    assert_eq!(evaluate(&dth, &b).unwrap().item(), 3.0);
}

#[test]
fn check_gradient_on_square() {
    let x = Variable::input("x", Shape::Scalar);
    let e = mul(&x.expr(), &x.expr()).unwrap();
    let err = check_gradient(&e, &bind_scalar("x", 3.0), &[x], 1e-5).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn errors_are_reported() {
    let x = Variable::input("x", Shape::Vector(2));
    let e = sq_norm(&x.expr());
    assert_eq!(evaluate(&e, &Bindings::new()), Err(ExprError::Unbound("x".into())));

    let mut b = Bindings::new();
    b.insert("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(evaluate(&e, &b), Err(ExprError::BindingShape { .. })));

    let w = Variable::param("w", Shape::Matrix(2, 3));
    assert!(matches!(matvec(&w.expr(), &x.expr()), Err(ExprError::ShapeMismatch { .. })));

    let l = log(&scalar(0.0));
    assert_eq!(evaluate(&l, &Bindings::new()), Err(ExprError::NonFinite("log")));

    assert!(matches!(differentiate(&x.expr(), std::slice::from_ref(&x)), Err(ExprError::NotScalar(_))));
}

#[test]
fn unreached_variables_get_zero_derivatives() {
    let x = Variable::input("x", Shape::Scalar);
    let y = Variable::input("y", Shape::Vector(3));
    let d = differentiate(&mul(&x.expr(), &x.expr()).unwrap(), std::slice::from_ref(&y)).unwrap();
    let v = evaluate(&d[0], &Bindings::new()).unwrap();
    assert_eq!(v, Tensor::zeros(Shape::Vector(3)));
}

#[test]
fn substitution_replaces_variables() {
    let x = Variable::input("x", Shape::Scalar);
    let e = mul(&x.expr(), &x.expr()).unwrap();
    let mut with = std::collections::HashMap::new();
    with.insert("x".to_string(), scalar(5.0));
    let e2 = substitute(&e, &with).unwrap();
    assert!(e2.variables().is_empty());
    assert_eq!(evaluate(&e2, &Bindings::new()).unwrap().item(), 25.0);
}

/// A graph touching every node kind: returns (expr, input var, param vars).
fn kitchen_sink() -> (Expr, Variable, Vec<Variable>) {
    let x = Variable::input("x", Shape::Vector(3));
    let w = Variable::param("W", Shape::Matrix(2, 3));
    let v = Variable::param("v", Shape::Vector(2));
    let s = Variable::param("s", Shape::Scalar);
    let (xe, we, ve, se) = (x.expr(), w.expr(), v.expr(), s.expr());

    let z = add(&matvec(&we, &xe).unwrap(), &ve).unwrap();
    let a = softplus_expr(&z);
    let b = sigmoid_expr(&z);
    let q = mul(&a, &b).unwrap();
    let r = div(&q, &add_const(&b, 1.0)).unwrap();
    let t = mat_t_vec(&we, &r).unwrap();
    let o = outer(&r, &xe).unwrap();
    let d = dot(&o, &we).unwrap();
    let sn = sq_norm(&t);
    let l = log(&add_const(&sn, 1.0));
    let rt = sqrt(&add_const(&sn, 1.0));
    let sc = sum(&scale(&se, &t).unwrap());
    let cl = sum(&clamp(&b, 0.2, 0.8));
    let rl = sum(&relu(&sub(&z, &ve).unwrap()));
    let total = sum_all(&[d, l, rt, sc, cl, rl, neg(&sum(&ve))]).unwrap();
    (total, x, vec![w, v, s])
}

fn random_bindings(rng: &mut ChaCha8Rng, vars: &[Variable]) -> Bindings {
    let mut b = Bindings::new();
    for v in vars {
        let data = (0..v.shape().len()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        b.insert(v.name(), Tensor::new(v.shape(), data));
    }
    b
}

#[test]
fn every_node_kind_matches_finite_differences() {
    let (e, x, params) = kitchen_sink();
    let mut all = params.clone();
    all.push(x);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_bindings(&mut rng, &all);
        let err = check_gradient(&e, &b, &all, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn second_order_matches_finite_differences() {
    let (e, x, params) = kitchen_sink();
    let gx = differentiate(&e, std::slice::from_ref(&x)).unwrap().remove(0);
    let probe = Variable::input("u", Shape::Vector(3));
    // Scalar functional of the input gradient, differentiated wrt parameters.
    let functional = add(&dot(&gx, &probe.expr()).unwrap(), &sq_norm(&gx)).unwrap();
    let mut all = params.clone();
    all.push(x);
    all.push(probe);
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let b = random_bindings(&mut rng, &all);
        let err = check_gradient(&functional, &b, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let (e, x, params) = kitchen_sink();
    let mut all = params;
    all.push(x);
    let b = random_bindings(&mut ChaCha8Rng::seed_from_u64(9), &all);
    let d = differentiate(&e, &all).unwrap();
    let first = evaluate_many(&d, &b).unwrap();
    let second = evaluate_many(&d, &b).unwrap();
    for (p, q) in first.iter().zip(&second) {
        assert_eq!(p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn expressions_are_shareable_across_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Expr>();
    assert_send_sync::<Bindings>();
}
