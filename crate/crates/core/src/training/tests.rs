use std::collections::HashSet;
use std::sync::Mutex;

use approx::assert_relative_eq;

use super::*;
use crate::data::{gen_2d_gaps, prepare, GapVariant, SplitKind, SplitSpec};
use crate::diversity::cos_indep_err;
use crate::eval::accuracy;

fn d1(n: usize, seed: u64) -> (Dataset, Dataset) {
    let d = gen_2d_gaps(GapVariant::D1, n, 0.2, seed).unwrap();
    let p = prepare(&d, &SplitSpec::new(SplitKind::Random, seed)).unwrap();
    (p.train, p.valid)
}

fn quick(method: Method, size: usize, lambda: Option<f64>) -> EnsembleConfig {
    EnsembleConfig { epochs: 5, ..EnsembleConfig::new(method, size, lambda, 3) }
}

fn tiny_net() -> MlpParams {
    MlpParams::init(2, 3, Activation::Softplus, 1).unwrap()
}

fn filled_grad(p: &MlpParams, v: f64) -> MlpGrad {
    let mut g = MlpGrad::zeros_like(p);
    g.w1.fill(v);
    g.b1.fill(v);
    g.w2.fill(v);
    g.b2 = v;
    g
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = tiny_net();
    let before = p.clone();
    let mut s = AdamState::new(p.num_params());
    let g = MlpGrad::zeros_like(&p);
    adam_step(&mut p, &g, &mut s, &AdamConfig::new(1e-3)).unwrap();
    assert_eq!(p, before);
    assert_eq!(s.t, 1);
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    for g in [1e-3, 1.0, 250.0, -7.0] {
        let mut p = tiny_net();
        let before = p.clone();
        let mut s = AdamState::new(p.num_params());
        let grad = filled_grad(&p, g);
        adam_step(&mut p, &grad, &mut s, &AdamConfig::new(1e-3)).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
        let expected = 1e-3 * g / (g.abs() + ADAM_EPSILON);
        assert_relative_eq!(before.b2 - p.b2, expected, max_relative = 1e-12);
        assert_relative_eq!(before.w1[[1, 0]] - p.w1[[1, 0]], expected, max_relative = 1e-12);
    }
}

#[test]
fn adam_moves_against_a_constant_gradient() {
    let mut p = tiny_net();
    let start = p.w2[0];
    let mut s = AdamState::new(p.num_params());
    let g = filled_grad(&p, 0.3);
    for _ in 0..100 {
        adam_step(&mut p, &g, &mut s, &AdamConfig::new(1e-2)).unwrap();
    }
    assert!(p.w2[0] < start - 0.5);
    assert_eq!(s.t, 100);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = tiny_net();
    let before = p.clone();
    let mut s = AdamState::new(p.num_params());
    let mut g = MlpGrad::zeros_like(&p);
    g.b1[0] = f64::NAN;
    assert!(matches!(adam_step(&mut p, &g, &mut s, &AdamConfig::new(1e-3)), Err(Error::Divergence { .. })));
    assert_eq!(p, before);
    assert_eq!(s.t, 0);
    let mut wrong = AdamState::new(3);
    let zero = MlpGrad::zeros_like(&p);
    assert!(adam_step(&mut p, &zero, &mut wrong, &AdamConfig::new(1e-3)).is_err());
}

#[test]
fn config_validation() {
    assert!(EnsembleConfig::new(Method::RRs, 2, Some(0.1), 0).validate().is_err());
    assert!(EnsembleConfig::new(Method::LIT, 2, None, 0).validate().is_err());
    assert!(EnsembleConfig::new(Method::LIT, 2, Some(-1.0), 0).validate().is_err());
    assert!(EnsembleConfig::new(Method::NCL, 1, Some(1.0), 0).validate().is_err());
    assert!(EnsembleConfig::new(Method::RRs, 0, None, 0).validate().is_err());
    let mut c = EnsembleConfig::new(Method::RRs, 2, None, 0);
    c.tangent_penalty = true;
    assert!(c.validate().is_err());
    c.tangent_penalty = false;
    c.dropout_rate = 1.0;
    assert!(c.validate().is_err());
    assert!(EnsembleConfig::benchmark(Method::LIT, 13, Some(1e-4), 0).validate().is_ok());
    assert_eq!("lit".parse::<Method>().unwrap(), Method::LIT);
    assert!("boost".parse::<Method>().is_err());

    let parsed: EnsembleConfig = serde_json::from_str(r#"{"method":"RRs","size":3}"#).unwrap();
    assert_eq!(parsed, EnsembleConfig::new(Method::RRs, 3, None, 0));
    assert!(serde_json::from_str::<EnsembleConfig>(r#"{"method":"RRs","size":3,"lamda":1}"#).is_err());
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = d1(120, 1);
    for cfg in [quick(Method::LIT, 2, Some(0.5)), quick(Method::Bag, 2, None), quick(Method::Ada, 2, None)] {
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&cfg, &tr, &va).unwrap();
        assert_eq!(a, b, "{}", cfg.method);
        let p1 = a.predict_proba(va.x.view()).unwrap();
        let p2 = a.predict_proba(va.x.view()).unwrap();
        assert_eq!(p1, p2);
    }
}

#[test]
fn lit_without_penalty_matches_restarts() {
    let (tr, va) = d1(150, 2);
    for base in [EnsembleConfig::new(Method::LIT, 3, Some(0.0), 9), EnsembleConfig::benchmark(Method::LIT, 3, Some(0.0), 9)] {
        let lit = EnsembleConfig { epochs: 8, hidden: 16, ..base };
        let rrs = EnsembleConfig { method: Method::RRs, lambda: None, ..lit.clone() };
        let a = train(&lit, &tr, &va).unwrap();
        let b = train(&rrs, &tr, &va).unwrap();
        for (x, y) in a.members.iter().zip(&b.members) {
            for (s, t) in x.clone().slices_mut().iter().zip(y.clone().slices_mut().iter()) {
                for (u, v) in s.iter().zip(t.iter()) {
                    assert!((u - v).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn joint_training_logs_every_epoch() {
    let (tr, va) = d1(100, 3);
    let e = train(&quick(Method::LIT, 2, Some(1.0)), &tr, &va).unwrap();
    assert_eq!(e.training_log.len(), 5);
    assert!(e.training_log.iter().all(|l| l.member.is_none() && l.penalty >= 0.0 && l.l2 > 0.0));
    assert_eq!(e.member_weights, vec![0.5, 0.5]);
    let r = train(&quick(Method::RRs, 2, None), &tr, &va).unwrap();
    assert_eq!(r.training_log.len(), 10);
    assert_eq!(r.training_log[7].member, Some(1));
}

#[test]
fn restarts_differ_only_by_seed() {
    let (tr, va) = d1(200, 4);
    let cfg = EnsembleConfig { epochs: 40, ..EnsembleConfig::new(Method::RRs, 2, None, 5) };
    let e = train(&cfg, &tr, &va).unwrap();
    assert_ne!(e.members[0], e.members[1]);
    let accs: Vec<f64> = e
        .members
        .iter()
        .map(|m| accuracy(m.predict_proba_batch(tr.x.view()).unwrap().view(), tr.y.view(), 0.5).unwrap())
        .collect();
    assert!((accs[0] - accs[1]).abs() < 0.05, "{accs:?}");
}

#[test]
fn bootstrap_keeps_about_63_percent_unique_rows() {
    let idx = bootstrap_indices(1, 0, 10_000);
    let unique: HashSet<_> = idx.iter().collect();
    let frac = unique.len() as f64 / 1e4;
    assert!((frac - (1.0 - (-1f64).exp())).abs() < 0.01, "{frac}");
    assert_ne!(idx, bootstrap_indices(1, 1, 10_000));
}

#[test]
fn bagging_with_identity_resample_is_single_model_training() {
    let (tr, va) = d1(100, 5);
    let bag = quick(Method::Bag, 1, None);
    let a = train_independent_with(&bag, &tr, &va, |_| (0..tr.len()).collect()).unwrap();
    let b = train(&EnsembleConfig { method: Method::RRs, ..bag.clone() }, &tr, &va).unwrap();
    assert_eq!(a.members, b.members);
}

#[test]
fn ada_alpha_values() {
    assert_eq!(ada_alpha(0.5), Some(0.0));
    assert_eq!(ada_alpha(0.7), Some(0.0));
    assert_relative_eq!(ada_alpha(0.1).unwrap(), 9f64.ln(), epsilon = 1e-15);
    assert_eq!(ada_alpha(0.0), None);
    assert_relative_eq!(ADA_MAX_ALPHA, 1e6f64.ln(), epsilon = 1e-14);
}

#[test]
fn adaboost_weights_stay_a_distribution() {
    // overlapping blobs so that no round is perfect
    let d = gen_2d_gaps(GapVariant::D1, 200, 1.2, 6).unwrap();
    let p = prepare(&d, &SplitSpec::new(SplitKind::Random, 6)).unwrap();
    let cfg = EnsembleConfig { epochs: 10, ..EnsembleConfig::new(Method::Ada, 4, None, 1) };
    let (e, rounds) = train_adaboost_rounds(&cfg, &p.train, &p.valid).unwrap();
    assert_eq!(e.members.len(), 4);
    for r in &rounds {
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(r.weights.iter().all(|&w| w > 0.0));
        assert!(r.error > 0.0 && r.error < 1.0);
    }
    assert!((e.member_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(e.member_weights.iter().all(|&w| w >= 0.0));
}

#[test]
fn adaboost_stops_after_a_perfect_round() {
    let d = gen_2d_gaps(GapVariant::D1, 200, 0.1, 7).unwrap();
    let p = prepare(&d, &SplitSpec::new(SplitKind::Random, 7)).unwrap();
    let cfg = EnsembleConfig { epochs: 30, ..EnsembleConfig::new(Method::Ada, 5, None, 1) };
    let (e, rounds) = train_adaboost_rounds(&cfg, &p.train, &p.valid).unwrap();
    assert_eq!(e.members.len(), 1);
    assert_eq!(rounds.len(), 1);
    assert_eq!(rounds[0].alpha, ADA_MAX_ALPHA);
    assert_eq!(e.member_weights, vec![1.0]);
}

#[test]
fn strong_ncl_degrades_a_member() {
    let (tr, va) = d1(300, 8);
    let cfg = EnsembleConfig { epochs: 150, ..EnsembleConfig::new(Method::NCL, 2, Some(4.0), 2) };
    let e = train(&cfg, &tr, &va).unwrap();
    let worst = e
        .members
        .iter()
        .map(|m| accuracy(m.predict_proba_batch(tr.x.view()).unwrap().view(), tr.y.view(), 0.5).unwrap())
        .fold(f64::MAX, f64::min);
    assert!(worst < 0.75, "worst member accuracy {worst}");
}

#[test]
fn lit_trains_orthogonal_members_on_d1() {
    let (tr, va) = d1(400, 9);
    let cfg = EnsembleConfig::new(Method::LIT, 2, Some(1.0), 4);
    let e = train(&cfg, &tr, &va).unwrap();
    for m in &e.members {
        assert!(accuracy(m.predict_proba_batch(tr.x.view()).unwrap().view(), tr.y.view(), 0.5).unwrap() >= 0.9);
    }
    assert!(cos_indep_err(&e.members[0], &e.members[1], tr.x.view()).unwrap() <= 0.1);
}

#[test]
fn tangent_penalty_needs_tangents() {
    let (tr, va) = d1(100, 1);
    let mut cfg = quick(Method::LIT, 2, Some(1.0));
    cfg.tangent_penalty = true;
    assert!(matches!(train(&cfg, &tr, &va), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported_with_epoch() {
    let (tr, va) = d1(100, 1);
    let cfg = EnsembleConfig { learning_rate: 1e300, ..quick(Method::LIT, 2, Some(1.0)) };
    let err = train(&cfg, &tr, &va).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn lambda_grid_endpoints_and_ratio() {
    let g = lambda_grid(1e-4, 1e1, 16).unwrap();
    assert_eq!(g.len(), 16);
    assert_eq!(g[0], 1e-4);
    assert_eq!(g[15], 1e1);
    let r = g[1] / g[0];
    for w in g.windows(2) {
        assert_relative_eq!(w[1] / w[0], r, max_relative = 1e-12);
    }
    assert_eq!(lambda_grid(0.3, 5.0, 1).unwrap(), vec![0.3]);
    assert!(lambda_grid(0.0, 1.0, 4).is_err());
}

fn small_grid(methods: Vec<Method>, lambdas: Vec<f64>, restarts: usize) -> GridSpec {
    GridSpec {
        dataset: "d1".into(),
        split: SplitKind::Random,
        methods,
        sizes: vec![2],
        lambdas,
        restarts,
        seed: 11,
        template: EnsembleConfig { epochs: 3, ..EnsembleConfig::new(Method::RRs, 2, None, 0) },
    }
}

#[test]
fn grid_counts_resume_and_selection() {
    let data = gen_2d_gaps(GapVariant::D1, 120, 0.3, 1).unwrap();
    let spec = small_grid(vec![Method::LIT], vec![0.1], 3);
    let seen = Mutex::new(Vec::new());
    let recs = spec.run(&data, &HashSet::new(), |r| seen.lock().unwrap().push(r.key.clone())).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(recs.iter().all(|r| r.error.is_none() && r.test.is_some()));
    let sel = select(&recs);
    assert_eq!(sel.len(), 1);
    assert_eq!((sel[0].size, sel[0].lambda, sel[0].runs), (2, Some(0.1), 3));

    let mut done: HashSet<String> = recs.iter().map(|r| r.key.clone()).collect();
    done.remove(&recs[1].key);
    let again = spec.run(&data, &done, |_| {}).unwrap();
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].key, recs[1].key);
    assert_eq!(again[0].test, recs[1].test);

    let two = small_grid(vec![Method::LIT, Method::RRs], vec![0.01, 0.1], 2);
    assert_eq!(two.cells().len(), 2 * 2 + 2);
    // within a restart every method shares the split and seeds
    let c = two.cells();
    assert_eq!(two.config_for(&c[0]).seed, two.config_for(&c[2]).seed);
}

#[test]
fn selection_prefers_higher_validation_auc() {
    let data = gen_2d_gaps(GapVariant::D1, 120, 0.3, 1).unwrap();
    let spec = small_grid(vec![Method::LIT], vec![0.01, 1.0], 2);
    let mut recs = spec.run(&data, &HashSet::new(), |_| {}).unwrap();
    for r in recs.iter_mut() {
        let v = r.valid.as_mut().unwrap();
        v.auc = Some(if r.lambda == Some(1.0) { 0.9 } else { 0.7 });
    }
    let sel = select(&recs);
    assert_eq!(sel[0].lambda, Some(1.0));
    assert_eq!(sel[0].valid_auc, Some(0.9));

    recs[0].error = Some("boom".into());
    recs[0].valid = None;
    recs[0].test = None;
    let sel = select(&recs);
    let failed: usize = sel.iter().map(|s| s.failed).sum();
    assert!(failed <= 1);
}

#[test]
fn failed_runs_are_recorded() {
    let data = gen_2d_gaps(GapVariant::D1, 20, 0.3, 1).unwrap();
    let spec = small_grid(vec![Method::RRs], vec![], 1);
    // three points cannot be split three ways
    let tiny = data.subset(&[0, 1, 2]);
    let recs = spec.run(&tiny, &HashSet::new(), |_| {}).unwrap();
    assert_eq!(recs.len(), 1);
    assert!(recs[0].error.is_some());
    assert!(select(&recs).is_empty());
}
