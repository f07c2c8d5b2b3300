use approx::assert_relative_eq;
use ndarray::{array, Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{check_gradient, differentiate, evaluate, evaluate_many};
use crate::models::{Activation, MlpGrad, MlpParams};

fn random_net(seed: u64, d: usize, h: usize) -> MlpParams {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::init_with_rng(d, h, Activation::Softplus, &mut r).unwrap();
    p.b1.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    p.b2 = r.gen_range(-0.5..0.5);
    p
}

fn random_batch(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array1<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let x = Array2::from_shape_simple_fn((n, d), || r.gen_range(-1.5..1.5));
    let y = Array1::from_shape_simple_fn(n, || if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    (x, y)
}

fn linear(w: &[f64], b: f64) -> MlpParams {
    // Identity hidden layer with W1 = I makes f(x) = w·x + b.
    let d = w.len();
    MlpParams {
        w1: Array2::eye(d),
        b1: Array1::zeros(d),
        w2: Array1::from(w.to_vec()),
        b2: b,
        activation: Activation::Identity,
    }
}

#[test]
fn nll_hand_values() {
    assert_relative_eq!(nll(0.0, 1.0), 2f64.ln(), epsilon = 1e-15);
    assert_relative_eq!(nll(0.0, 0.0), 2f64.ln(), epsilon = 1e-15);
    // softplus(-10) = ln(1 + e^-10)
    assert_relative_eq!(nll(10.0, 1.0), (-10f64).exp().ln_1p(), max_relative = 1e-12);
    assert_relative_eq!(nll(10.0, 1.0), 4.5398899e-5, max_relative = 1e-7);
    assert!(nll(-700.0, 0.0) >= 0.0 && nll(700.0, 0.0).is_finite());
}

#[test]
fn cos_sq_hand_values() {
    let eps = DEFAULT_DENOM_EPSILON;
    assert_eq!(cos_sq(&[1.0, 0.0], &[0.0, 1.0], eps), 0.0);
    assert_relative_eq!(cos_sq(&[1.0, 0.0], &[1.0, 1.0], eps), 0.5, epsilon = 1e-7);
    assert_relative_eq!(cos_sq(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0], eps), 1.0, epsilon = 1e-7);
    assert_eq!(cos_sq(&[0.0, 0.0], &[1.0, 2.0], eps), 0.0);
}

proptest! {
    #[test]
    fn cos_sq_is_bounded_and_symmetric(g1 in prop::collection::vec(-10.0f64..10.0, 4),
                                       g2 in prop::collection::vec(-10.0f64..10.0, 4)) {
        let c = cos_sq(&g1, &g2, DEFAULT_DENOM_EPSILON);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, cos_sq(&g2, &g1, DEFAULT_DENOM_EPSILON));
    }

    #[test]
    fn cos_sq_is_scale_invariant(g1 in prop::collection::vec(0.5f64..3.0, 3),
                                 g2 in prop::collection::vec(-3.0f64..-0.5, 3),
                                 a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        let eps = DEFAULT_DENOM_EPSILON;
        let s1: Vec<f64> = g1.iter().map(|v| v * a).collect();
        let s2: Vec<f64> = g2.iter().map(|v| v * b).collect();
        prop_assert!((cos_sq(&s1, &s2, eps) - cos_sq(&g1, &g2, eps)).abs() < 1e-6);
    }
}

#[test]
fn manifold_projection_examples() {
    let eps = DEFAULT_DENOM_EPSILON;
    let g1 = [1.0, 0.0, 1.0];
    let g2 = [0.0, 1.0, 1.0];
    let eye = Array2::<f64>::eye(3);
    assert_eq!(manif_cos_sq(&g1, &g2, eye.view(), eps).unwrap(), cos_sq(&g1, &g2, eps));
    assert_relative_eq!(cos_sq(&g1, &g2, eps), 0.25, epsilon = 1e-7);
    let j = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
    assert_eq!(manif_cos_sq(&g1, &g2, j.view(), eps).unwrap(), 0.0);
    let j1 = array![[0.3], [-1.0], [2.0]];
    assert_relative_eq!(manif_cos_sq(&g1, &g2, j1.view(), eps).unwrap(), 1.0, epsilon = 1e-7);
    assert!(manif_cos_sq(&g1[..2], &g2[..2], j.view(), eps).is_err());
}

#[test]
fn lit_at_zero_lambda_is_the_nll_sum() {
    let models = [random_net(1, 3, 6), random_net(2, 3, 6)];
    let (x, y) = random_batch(3, 5, 3);
    let batch = Batch::new(x.view(), y.view());
    let joint = lit_objective(&models, &batch, &PenaltyConfig::new(0.0)).unwrap();
    let b = ensemble_bindings(&models);
    let joint_v = evaluate(&joint, &b).unwrap().item();

    let parts: Vec<f64> = models
        .iter()
        .map(|m| {
            let e = lit_objective(std::slice::from_ref(m), &batch, &PenaltyConfig::new(0.0)).unwrap();
            evaluate(&e, &ensemble_bindings(std::slice::from_ref(m))).unwrap().item()
        })
        .collect();
    assert_eq!(joint_v.to_bits(), (parts[0] + parts[1]).to_bits());

    // single member: the penalty has no pairs whatever λ is
    let single = lit_objective(&models[..1], &batch, &PenaltyConfig::new(5.0)).unwrap();
    assert_eq!(evaluate(&single, &ensemble_bindings(&models[..1])).unwrap().item(), parts[0]);
}

#[test]
fn orthogonal_linear_pair_has_zero_penalty() {
    let models = [linear(&[2.0, 0.0], 0.1), linear(&[0.0, -1.5], -0.2)];
    let x = array![[0.5, 1.0], [-1.0, 0.25], [2.0, -0.5]];
    let y = array![1.0, 0.0, 1.0];
    let batch = Batch::new(x.view(), y.view());
    let e = lit_objective(&models, &batch, &PenaltyConfig::new(3.0)).unwrap();
    let v = evaluate(&e, &ensemble_bindings(&models)).unwrap().item();
    let mut hand = 0.0;
    for m in &models {
        let s: f64 = (0..3).map(|i| nll(m.forward(x.row(i)).unwrap(), y[i])).sum();
        hand += s / 3.0;
    }
    assert_relative_eq!(v, hand, max_relative = 1e-14);
}

fn probs_to_models(p: &[f64]) -> MlpParams {
    // constant-output net: logit = b2
    let mut m = MlpParams::zeros(1, 1, Activation::Identity);
    m.b2 = (p[0] / (1.0 - p[0])).ln();
    m
}

#[test]
fn ncl_examples() {
    let models = [random_net(4, 2, 5), random_net(4, 2, 5)];
    let (x, y) = random_batch(5, 4, 2);
    let batch = Batch::new(x.view(), y.view());
    let b = ensemble_bindings(&models);
    let with = evaluate(&ncl_objective(&models, &batch, 2.0).unwrap(), &b).unwrap().item();
    let without = evaluate(&ncl_objective(&models, &batch, 0.0).unwrap(), &b).unwrap().item();
    assert_relative_eq!(with, without, epsilon = 1e-15);

    let brier: f64 = models
        .iter()
        .map(|m| (0..4).map(|i| (m.predict_proba(x.row(i)).unwrap() - y[i]).powi(2)).sum::<f64>() / 4.0)
        .sum();
    assert_relative_eq!(without, brier, max_relative = 1e-14);

    assert!(ncl_objective(&models[..1], &batch, 1.0).is_err());
}

#[test]
fn ncl_penalty_on_hand_batch() {
    // member 1 predicts (0.8, 0.2), member 2 (0.6, 0.4) on two points.
    let m1 = MlpParams { w1: array![[1.0]], b1: array![0.0], w2: array![(0.8f64 / 0.2).ln()], b2: 0.0, activation: Activation::Identity };
    let m2 = MlpParams { w1: array![[1.0]], b1: array![0.0], w2: array![(0.6f64 / 0.4).ln()], b2: 0.0, activation: Activation::Identity };
    let x = array![[1.0], [-1.0]];
    let y = array![1.0, 0.0];
    let batch = Batch::new(x.view(), y.view());
    let models = [m1, m2];
    let b = ensemble_bindings(&models);
    let pen = evaluate(&ncl_objective(&models, &batch, 1.0).unwrap(), &b).unwrap().item()
        - evaluate(&ncl_objective(&models, &batch, 0.0).unwrap(), &b).unwrap().item();
    // p̄ = (0.7, 0.3), p1 − p̄ = (0.1, −0.1): −2·mean[(p1−p̄)²] = −0.02
    assert_relative_eq!(pen, -0.02, epsilon = 1e-12);
}

#[test]
fn ace_examples() {
    let x = array![[0.0]];
    let y = array![1.0];
    let batch = Batch::new(x.view(), y.view());
    let models = [probs_to_models(&[0.9]), probs_to_models(&[0.1])];
    let b = ensemble_bindings(&models);
    let base = evaluate(&ace_objective(&models, &batch, 0.0).unwrap(), &b).unwrap().item();
    let nll_sum = nll(models[0].b2, 1.0) + nll(models[1].b2, 1.0);
    assert_relative_eq!(base, nll_sum, max_relative = 1e-14);

    let with = evaluate(&ace_objective(&models, &batch, 1.0).unwrap(), &b).unwrap().item();
    let h_pq = -(0.9 * 0.1f64.ln() + 0.1 * 0.9f64.ln());
    let h_qp = -(0.1 * 0.9f64.ln() + 0.9 * 0.1f64.ln());
    // M = 2: λ/(M−1) = 1, two ordered pairs
    assert_relative_eq!(base - with, h_pq + h_qp, max_relative = 1e-12);

    let same = [probs_to_models(&[0.7]), probs_to_models(&[0.7])];
    let b = ensemble_bindings(&same);
    let gap = evaluate(&ace_objective(&same, &batch, 0.0).unwrap(), &b).unwrap().item()
        - evaluate(&ace_objective(&same, &batch, 1.0).unwrap(), &b).unwrap().item();
    let entropy = -(0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
    assert_relative_eq!(gap, 2.0 * entropy, max_relative = 1e-12);
}

fn all_objectives() -> Vec<Objective> {
    vec![
        Objective::Nll,
        Objective::Lit(PenaltyConfig::new(0.7)),
        Objective::Ncl { lambda: 0.9 },
        Objective::Ace { lambda: 0.4 },
    ]
}

#[test]
fn graph_objectives_pass_gradient_check() {
    for (k, obj) in all_objectives().into_iter().enumerate() {
        for seed in 0..3 {
            let s = 100 * k as u64 + seed;
            let models = [random_net(s, 3, 5), random_net(s + 50, 3, 5), random_net(s + 99, 3, 5)];
            let (x, y) = random_batch(s, 4, 3);
            let batch = Batch::new(x.view(), y.view());
            let e = objective_expr(&models, &batch, &obj).unwrap();
            let err = check_gradient(&e, &ensemble_bindings(&models), &ensemble_variables(&models), 1e-5).unwrap();
            assert!(err < 1e-3, "{obj:?} seed {seed}: {err}");
        }
    }
}

fn random_tangents(seed: u64, n: usize, d: usize, k: usize) -> Array3<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((n, d, k), || r.gen_range(-1.0..1.0))
}

fn flatten(g: &MlpGrad) -> Vec<f64> {
    g.slices().iter().flat_map(|s| s.iter().copied()).collect()
}

#[test]
fn closed_form_matches_graph_for_every_objective() {
    let mut objs = all_objectives();
    objs.push(Objective::ManifoldLit(PenaltyConfig::new(1.3)));
    for obj in objs {
        for seed in 0..4 {
            let models = [random_net(seed, 3, 7), random_net(seed + 10, 3, 7)];
            let (x, y) = random_batch(seed + 20, 5, 3);
            let t = random_tangents(seed, 5, 3, 2);
            let w = array![0.5, 1.5, 1.0, 0.2, 1.8];
            let mut batch = Batch::new(x.view(), y.view());
            batch.tangents = Some(t.view());
            if obj == Objective::Nll {
                batch.weights = Some(w.view());
            }
            let caches: Vec<_> = models.iter().map(|m| m.forward_cache(x.view(), None)).collect();
            let (loss, grads) = joint_loss_grad(&models, &caches, &batch, &obj).unwrap();

            let e = objective_expr(&models, &batch, &obj).unwrap();
            let b = ensemble_bindings(&models);
            assert_relative_eq!(loss.total(), evaluate(&e, &b).unwrap().item(), max_relative = 1e-12);
            let vars = ensemble_variables(&models);
            let d = evaluate_many(&differentiate(&e, &vars).unwrap(), &b).unwrap();
            let graph: Vec<f64> = d.iter().flat_map(|t| t.data().to_vec()).collect();
            let closed: Vec<f64> = grads.iter().flat_map(flatten).collect();
            assert_eq!(graph.len(), closed.len());
            for (a, c) in graph.iter().zip(&closed) {
                assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0), "{obj:?}: {a} vs {c}");
            }
        }
    }
}

#[test]
fn closed_form_with_dropout_matches_finite_differences() {
    let obj = Objective::Lit(PenaltyConfig::new(2.0));
    let mut models = vec![random_net(7, 3, 6), random_net(8, 3, 6)];
    let (x, y) = random_batch(9, 6, 3);
    let batch = Batch::new(x.view(), y.view());
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let masks: Vec<Array2<f64>> =
        (0..2).map(|_| Array2::from_shape_simple_fn((6, 6), || if r.gen_bool(0.5) { 2.0 } else { 0.0 })).collect();
    let loss_of = |ms: &[MlpParams]| {
        let caches: Vec<_> = ms.iter().zip(&masks).map(|(m, k)| m.forward_cache(x.view(), Some(k))).collect();
        joint_loss_grad(ms, &caches, &batch, &obj).unwrap()
    };
    let (_, grads) = loss_of(&models);
    let h = 1e-6;
    for m in 0..2 {
        let analytic = flatten(&grads[m]);
        let mut k = 0;
        for t in 0..4 {
            let len = models[m].slices_mut()[t].len();
            for j in 0..len {
                let orig = models[m].slices_mut()[t][j];
                models[m].slices_mut()[t][j] = orig + h;
                let up = loss_of(&models).0.total();
                models[m].slices_mut()[t][j] = orig - h;
                let dn = loss_of(&models).0.total();
                models[m].slices_mut()[t][j] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - analytic[k]).abs() / analytic[k].abs().max(1.0) < 1e-5, "m{m} t{t} j{j}");
                k += 1;
            }
        }
    }
}

#[test]
fn empty_batch_is_rejected() {
    let models = [random_net(1, 2, 3)];
    let x = Array2::<f64>::zeros((0, 2));
    let y = Array1::<f64>::zeros(0);
    let batch = Batch::new(x.view(), y.view());
    assert!(matches!(lit_objective(&models, &batch, &PenaltyConfig::new(1.0)), Err(Error::Empty(_))));
    assert!(PenaltyConfig { lambda: -1.0, denom_epsilon: 1e-8 }.validate().is_err());
    assert!(PenaltyConfig { lambda: 1.0, denom_epsilon: 0.0 }.validate().is_err());
}
