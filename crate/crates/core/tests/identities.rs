mod common;

use std::sync::Arc;

use common::{logit, ols, spec};
use dtr::data::{augment_stages, ingest_long, ingest_wide, partial, LongSchema, PolicyData, WideSchema};
use dtr::evaluation::{
    clustered_variance, conditional_value, contrast, dr_scores, ipw_terms, merge_results, value_dr, value_ipw,
    value_or, EvalResult, Estimator, Transform,
};
use dtr::nuisance::{fit_g_model, Family, Histories, ModelSpec};
use dtr::policy::{apply_policy, Policy};
use dtr::simulation::{optimal_policy_two_stage, sim_single_stage, sim_two_stage, SingleStageParams, TwoStageParams};
use dtr::table::Table;
use dtr::Error;
use proptest::prelude::*;

fn single(n: usize, seed: u64) -> PolicyData {
    sim_single_stage(n, seed, &SingleStageParams::default()).unwrap().pd
}

fn two(n: usize, seed: u64) -> PolicyData {
    sim_two_stage(n, seed, &TwoStageParams::default()).unwrap().pd
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn ipw_with_empirical_g_matches_hand_computation() {
    let pd = single(300, 4);
    let r = value_ipw(&pd, &Policy::static_policy("one", "1"), &[spec(Family::Empirical, "~1")], 1, 0).unwrap();
    let t = pd.trajectories();
    let treated = t.iter().filter(|t| t.stages[0].action == "1").count() as f64;
    let p1 = treated / pd.n() as f64;
    let oracle: f64 = t
        .iter()
        .map(|t| if t.stages[0].action == "1" { t.utility() / p1 } else { 0.0 })
        .sum::<f64>()
        / pd.n() as f64;
    assert!(close(r.estimate, oracle, 1e-12));
    assert_eq!(r.estimator, Estimator::Ipw);
}

#[test]
fn outcome_regression_with_saturated_q_is_the_arm_mean() {
    let pd = single(400, 5);
    let r = value_or(&pd, &Policy::static_policy("zero", "0"), &[ols("~A")], 1, 0).unwrap();
    let arm: Vec<f64> = pd
        .trajectories()
        .iter()
        .filter(|t| t.stages[0].action == "0")
        .map(|t| t.utility())
        .collect();
    let mean = arm.iter().sum::<f64>() / arm.len() as f64;
    assert!(close(r.estimate, mean, 1e-10));
    assert!(r.naive_variance);
}

#[test]
fn dr_scores_with_zero_q_are_ipw_terms() {
    for pd in [single(200, 1), two(200, 2)] {
        let hs = Histories::new(&pd).unwrap();
        let gm = fit_g_model(&pd, &hs, &[ModelSpec::g_default()], &vec![true; pd.n()]).unwrap();
        let k_max = pd.max_stages();
        let g: Vec<_> = (1..=k_max).map(|k| gm.predict_all(&hs, k).unwrap()).collect();
        let q: Vec<Vec<Vec<f64>>> = (1..=k_max)
            .map(|k| vec![vec![0.0; pd.stage_action_set(k).len()]; pd.n()])
            .collect();
        let at = apply_policy(&Policy::static_policy("one", "1"), &pd).unwrap();
        let z = dr_scores(&pd, &at, &g, &q).unwrap().z1;
        let (w, _) = ipw_terms(&pd, &at, &g).unwrap();
        for (a, b) in z.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn dr_scores_with_exact_q_and_uniform_g() {
    // One stage, two subjects, g = 1/2 everywhere, Q(a) = a.
    let t = Table::read_csv("A,X,U\n1,0,3\n0,0,-1\n".as_bytes()).unwrap();
    let schema = WideSchema {
        actions: vec!["A".into()],
        covariates: vec![("X".into(), vec![Some("X".into())])],
        utility: vec!["U".into()],
        ..Default::default()
    };
    let pd = ingest_wide(&t, &schema).unwrap();
    let hs = Histories::new(&pd).unwrap();
    let gm = fit_g_model(&pd, &hs, &[spec(Family::Empirical, "~1")], &[true, true]).unwrap();
    let g = vec![gm.predict_all(&hs, 1).unwrap()];
    let q = vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
    let at = apply_policy(&Policy::static_policy("one", "1"), &pd).unwrap();
    let z = dr_scores(&pd, &at, &g, &q).unwrap();
    // Subject 1 took A=1: 1 + (3 - 1)/0.5 = 5. Subject 2 did not: Z = Q = 1.
    assert_eq!(z.z1, [5.0, 1.0]);
    assert_eq!(z.stages[0].z[1], [-2.0, 1.0]);
}

#[test]
fn augmentation_keeps_uniform_results() {
    let pd = two(300, 8);
    let policy = optimal_policy_two_stage(&TwoStageParams::default());
    let g = [ModelSpec::g_default()];
    let q = [ModelSpec::q_default()];
    let a = value_dr(&pd, &policy, &g, &q, 2, 3).unwrap();
    let b = value_dr(&augment_stages(&pd, "0").unwrap(), &policy, &g, &q, 2, 3).unwrap();
    assert!((a.estimate - b.estimate).abs() <= 1e-10);
    for (x, y) in a.ic.iter().zip(&b.ic) {
        assert!((x - y).abs() <= 1e-10);
    }
}

fn ragged() -> PolicyData {
    let mut csv = String::from("id,stage,event,A,X,U\n");
    let mut state = 7u64;
    for i in 0..120 {
        state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
        let stages = 1 + (state >> 60) as usize % 2;
        for s in 1..=stages {
            let x = ((state >> (8 * s)) % 100) as f64 / 50.0 - 1.0;
            let a = (state >> (3 + s)) & 1;
            csv.push_str(&format!("{i},{s},0,{a},{x},{}\n", x * a as f64));
        }
        csv.push_str(&format!("{i},{},1,,,{}\n", stages + 1, (state >> 20) % 7));
    }
    let t = Table::read_csv(csv.as_bytes()).unwrap();
    ingest_long(
        &t,
        None,
        &LongSchema {
            id: "id".into(),
            stage: "stage".into(),
            event: "event".into(),
            action: "A".into(),
            covariates: vec!["X".into()],
            utility: "U".into(),
            baseline: vec![],
        },
    )
    .unwrap()
}

#[test]
fn ragged_data_needs_augmentation() {
    let pd = ragged();
    assert!(!pd.is_uniform());
    let policy = Policy::static_policy("one", "1");
    let err = value_dr(&pd, &policy, &[ModelSpec::g_default()], &[ModelSpec::q_default()], 1, 0).unwrap_err();
    assert!(matches!(err, Error::Structure(_)), "{err}");
    let aug = augment_stages(&pd, "0").unwrap();
    let r = value_dr(&aug, &policy, &[ModelSpec::g_default()], &[ModelSpec::q_default()], 2, 0).unwrap();
    assert!(r.estimate.is_finite() && r.std_err() > 0.0);
}

#[test]
fn partial_keeps_every_utility() {
    let pd = two(150, 3);
    let p = partial(&pd, 1).unwrap();
    assert_eq!(p.max_stages(), 1);
    for (a, b) in pd.utility().iter().zip(p.utility()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(matches!(partial(&pd, 2), Err(Error::Range(_))));
}

fn scores(ids: usize, seed: u64) -> Vec<f64> {
    (0..ids).map(|i| ((i as u64 * 2_654_435_761 + seed) % 1000) as f64 / 100.0).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

#[test]
fn smooth_contrast_matches_the_delta_method() {
    let a = EvalResult::from_scores("a", ids(50), &scores(50, 1), Estimator::Dr);
    let b = EvalResult::from_scores("b", ids(50), &scores(50, 7), Estimator::Dr);
    let joint = merge_results(&[a.clone(), b.clone()]).unwrap();
    let ratio = contrast(&joint, &Transform::Function(Arc::new(|t: &[f64]| t[1] / t[0])), "ratio").unwrap();
    assert!(close(ratio.estimate, b.estimate / a.estimate, 1e-12));
    for i in 0..50 {
        let ic = b.ic[i] / a.estimate - b.estimate * a.ic[i] / (a.estimate * a.estimate);
        assert!((ratio.ic[i] - ic).abs() <= 1e-6 * (1.0 + ic.abs()));
    }
}

#[test]
fn merge_rejects_different_ids() {
    let a = EvalResult::from_scores("a", ids(5), &scores(5, 1), Estimator::Dr);
    let mut other = ids(5);
    other[4] = "zz".into();
    let b = EvalResult::from_scores("b", other, &scores(5, 2), Estimator::Dr);
    assert!(matches!(merge_results(&[a, b]), Err(Error::Alignment(_))));
}

#[test]
fn pair_clusters_sum_influence_values() {
    let r = EvalResult::from_scores("a", ids(6), &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0], Estimator::Dr);
    let clusters: Vec<String> = ["x", "x", "y", "y", "z", "z"].iter().map(|s| s.to_string()).collect();
    let c = clustered_variance(&r, &clusters).unwrap();
    let sums = [r.ic[0] + r.ic[1], r.ic[2] + r.ic[3], r.ic[4] + r.ic[5]];
    let oracle = sums.iter().map(|s| s * s).sum::<f64>() / 36.0;
    assert!(close(c.variance_of_mean, oracle, 1e-14));
    assert!(c.clustered);
    let single = clustered_variance(&r, &vec!["all".to_string(); 6]).unwrap();
    assert!(!single.warnings.is_empty());
}

#[test]
fn p_value_and_interval() {
    let r = EvalResult::from_scores("a", ids(4), &[1.0, 1.0, 1.0, 1.0], Estimator::Dr);
    assert_eq!(r.std_err(), 0.0);
    assert_eq!(r.p_value(), 0.0);
    assert_eq!(r.ci95(), [1.0, 1.0]);
    let z = EvalResult::from_scores("z", ids(2), &[-1.0, 1.0], Estimator::Dr);
    assert_eq!(z.estimate, 0.0);
    assert_eq!(z.p_value(), 1.0);
}

fn with_baseline(n: usize, seed: u64) -> PolicyData {
    let sim = sim_single_stage(n, seed, &SingleStageParams::default()).unwrap();
    let schema = WideSchema {
        actions: vec!["A".into()],
        covariates: vec![("Z".into(), vec![Some("Z".into())]), ("L".into(), vec![Some("L".into())])],
        utility: vec!["U".into()],
        baseline: vec!["B".into()],
        ..Default::default()
    };
    ingest_wide(&sim.table, &schema).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn influence_values_are_centered(seed in 0u64..1000, folds in 1usize..4) {
        let pd = single(120, seed);
        let r = value_dr(&pd, &Policy::static_policy("one", "1"), &[logit("~.")], &[ols("~A*.")], folds, seed).unwrap();
        let s: f64 = r.ic.iter().sum();
        prop_assert!(s.abs() <= 1e-9 * r.n as f64 * (1.0 + r.estimate.abs()));
    }

    #[test]
    fn conditional_values_recombine(seed in 0u64..1000) {
        let pd = with_baseline(200, seed);
        let r = value_dr(&pd, &Policy::static_policy("zero", "0"), &[logit("~.")], &[ols("~A*.")], 2, seed).unwrap();
        let parts = conditional_value(&r, &pd, "B").unwrap();
        let total: f64 = parts
            .iter()
            .map(|p| p.metadata["group_size"].as_f64().unwrap() / r.n as f64 * p.estimate)
            .sum();
        prop_assert!((total - r.estimate).abs() <= 1e-10);
    }

    #[test]
    fn linear_contrasts_are_exact(w in prop::collection::vec(-3.0..3.0f64, 3), seed in 0u64..100) {
        let rs: Vec<EvalResult> = (0..3)
            .map(|j| EvalResult::from_scores(&format!("r{j}"), ids(30), &scores(30, seed + j), Estimator::Dr))
            .collect();
        let c = contrast(&merge_results(&rs).unwrap(), &Transform::Linear(w.clone()), "c").unwrap();
        let est: f64 = w.iter().zip(&rs).map(|(w, r)| w * r.estimate).sum();
        prop_assert!((c.estimate - est).abs() <= 1e-10);
        for i in 0..30 {
            let ic: f64 = w.iter().zip(&rs).map(|(w, r)| w * r.ic[i]).sum();
            prop_assert!((c.ic[i] - ic).abs() <= 1e-10);
        }
    }

    #[test]
    fn singleton_clusters_change_nothing(z in prop::collection::vec(-10.0..10.0f64, 2..40)) {
        let r = EvalResult::from_scores("a", ids(z.len()), &z, Estimator::Dr);
        let c = clustered_variance(&r, &r.ids.clone()).unwrap();
        prop_assert!((c.variance_of_mean - r.variance_of_mean).abs() <= 1e-12 * (1.0 + r.variance_of_mean));
    }
}
