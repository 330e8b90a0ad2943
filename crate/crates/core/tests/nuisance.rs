mod common;

use common::{logit, newton_logistic, ols, spec};
use dtr::data::{ingest_wide, HistoryKind, WideSchema};
use dtr::glm::{fit_logistic, fit_multinomial, fit_ols};
use dtr::nuisance::{fit_g_empir, fit_g_model, fit_q_model, make_folds, Family, Histories};
use dtr::simulation::{sim_single_stage, sim_two_stage, SingleStageParams, TwoStageParams};
use dtr::table::{Table, Value};
use dtr::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) })
}

fn bernoulli(x: &DMatrix<f64>, beta: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..x.nrows())
        .map(|i| {
            let eta: f64 = (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum();
            f64::from(u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp())))
        })
        .collect()
}

#[test]
fn ols_solves_the_normal_equations() {
    let x = design(200, 3, 1);
    let y: Vec<f64> = (0..200).map(|i| 1.0 + 2.0 * x[(i, 1)] - x[(i, 2)] + (i % 5) as f64 * 0.1).collect();
    let fit = fit_ols(&x, &y, None).unwrap();
    let xt = x.transpose();
    let oracle = (&xt * &x).cholesky().unwrap().solve(&(&xt * nalgebra::DVector::from_column_slice(&y)));
    for j in 0..3 {
        assert!((fit.coef[j] - oracle[j]).abs() < 1e-10);
    }
}

#[test]
fn aliased_columns_are_flagged() {
    let mut x = design(50, 3, 2);
    for i in 0..50 {
        x[(i, 2)] = 2.0 * x[(i, 1)];
    }
    let y: Vec<f64> = (0..50).map(|i| x[(i, 1)]).collect();
    let fit = fit_ols(&x, &y, None).unwrap();
    assert_eq!(fit.aliased, [false, false, true]);
    assert_eq!(fit.coef[2], 0.0);
}

#[test]
fn multinomial_with_two_classes_is_logistic() {
    let x = design(300, 2, 3);
    let y = bernoulli(&x, &[0.2, 1.0], 4);
    let classes: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    let m = fit_multinomial(&x, &classes, 2, None).unwrap();
    let l = fit_logistic(&x, &y, None).unwrap();
    for j in 0..2 {
        assert!((m.coef[j][0] - l.coef[j]).abs() < 1e-6);
    }
}

#[test]
fn separation_is_reported() {
    let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    assert!(fit_logistic(&x, &y, None).unwrap().separation);
}

#[test]
fn empirical_g_reproduces_the_action_table() {
    let mut t = Table::new();
    t.push_column("A", (0..217).map(|i| Value::Text(if i % 3 == 0 || i < 40 { "cct" } else { "lt" }.into())).collect())
        .unwrap();
    let cct = t.column("A").unwrap().iter().filter(|v| v.as_label().as_deref() == Some("cct")).count();
    t.push_numeric("U", &vec![1.0; 217]).unwrap();
    let schema = WideSchema { actions: vec!["A".into()], utility: vec!["U".into()], ..Default::default() };
    let pd = ingest_wide(&t, &schema).unwrap();
    let hs = Histories::new(&pd).unwrap();
    let g = fit_g_empir(&pd, "~1", HistoryKind::State, false).unwrap();
    let p = g.predict_all(&hs, 1).unwrap();
    assert!((p.prob(0, "cct") - cct as f64 / 217.0).abs() < 1e-15);
    assert!((p.prob(0, "lt") - (217 - cct) as f64 / 217.0).abs() < 1e-15);
}

#[test]
fn stratified_empirical_g_uses_cell_frequencies() {
    let t = Table::read_csv("S,A,U\na,1,0\na,1,0\na,0,0\nb,0,0\n".as_bytes()).unwrap();
    let schema = WideSchema {
        actions: vec!["A".into()],
        covariates: vec![("S".into(), vec![Some("S".into())])],
        utility: vec!["U".into()],
        ..Default::default()
    };
    let pd = ingest_wide(&t, &schema).unwrap();
    let hs = Histories::new(&pd).unwrap();
    let p = fit_g_empir(&pd, "~S", HistoryKind::State, false).unwrap().predict_all(&hs, 1).unwrap();
    assert!((p.prob(0, "1") - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(p.prob(3, "0"), 1.0);
}

#[test]
fn pooled_g_shares_one_fit() {
    let pd = sim_two_stage(300, 1, &TwoStageParams::default()).unwrap().pd;
    let hs = Histories::new(&pd).unwrap();
    let pooled = dtr::nuisance::ModelSpec::new(Family::Logistic, "~C", HistoryKind::State, true);
    let g = fit_g_model(&pd, &hs, &[pooled], &vec![true; pd.n()]).unwrap();
    assert!(g.pooled);
    let p1 = g.predict_all(&hs, 1).unwrap();
    let p2 = g.predict_all(&hs, 2).unwrap();
    let c1 = hs.get(HistoryKind::State, 1).column("C").unwrap().values[0].as_f64().unwrap();
    let c2 = hs.get(HistoryKind::State, 2).column("C").unwrap().values[0].as_f64().unwrap();
    assert_eq!(c1 < c2, p1.prob(0, "1") < p2.prob(0, "1"));
}

#[test]
fn logistic_g_needs_two_actions() {
    let t = Table::read_csv("X,A,U\n0,a,1\n1,b,1\n2,c,1\n0,a,1\n".as_bytes()).unwrap();
    let schema = WideSchema {
        actions: vec!["A".into()],
        covariates: vec![("X".into(), vec![Some("X".into())])],
        utility: vec!["U".into()],
        ..Default::default()
    };
    let pd = ingest_wide(&t, &schema).unwrap();
    let hs = Histories::new(&pd).unwrap();
    let err = fit_g_model(&pd, &hs, &[logit("~X")], &[true; 4]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn q_model_recovers_a_linear_truth() {
    let sim = sim_single_stage(4000, 2, &SingleStageParams::default()).unwrap();
    let pd = sim.pd;
    let hs = Histories::new(&pd).unwrap();
    let u = pd.utility();
    let q = fit_q_model(&pd, &hs, 1, &u, &ols("~A*(Z+L)"), &vec![true; pd.n()]).unwrap();
    let coef = q.fit.coef.clone();
    assert_eq!(q.columns, ["(Intercept)", "A1", "Z", "L", "A1:Z", "A1:L"]);
    let want = [0.0, -2.5, 1.0, 1.0, 3.0, 1.0];
    for (c, w) in coef.iter().zip(want) {
        assert!((c - w).abs() < 0.12, "{coef:?}");
    }
}

#[test]
fn folds_partition_the_ids() {
    let ids: Vec<String> = (0..103).map(|i| i.to_string()).collect();
    let f = make_folds(&ids, 5, 9).unwrap();
    let sizes = f.sizes();
    assert_eq!(sizes.iter().sum::<usize>(), 103);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_eq!(f, make_folds(&ids, 5, 9).unwrap());
    for l in 0..5 {
        let mask = f.train_mask(l);
        assert!(f.test_rows(l).iter().all(|&i| !mask[i]));
        assert_eq!(f.train_rows(l).len() + f.test_rows(l).len(), 103);
    }
    assert!(matches!(make_folds(&ids, 0, 1), Err(Error::Range(_))));
    assert!(matches!(make_folds(&ids, 104, 1), Err(Error::Range(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn irls_matches_newton(seed in 0u64..10_000, b1 in -1.5..1.5f64, b2 in -1.5..1.5f64) {
        let x = design(400, 3, seed);
        let y = bernoulli(&x, &[0.3, b1, b2], seed + 1);
        prop_assume!(y.iter().any(|&v| v == 0.0) && y.iter().any(|&v| v == 1.0));
        let fit = fit_logistic(&x, &y, None).unwrap();
        prop_assume!(!fit.separation);
        let oracle = newton_logistic(&x, &y);
        for (a, b) in fit.coef.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ols_is_equivariant_to_column_order(seed in 0u64..10_000) {
        let x = design(60, 4, seed);
        let y: Vec<f64> = (0..60).map(|i| x[(i, 1)] - 0.5 * x[(i, 3)] + (i as f64).sin()).collect();
        let perm = [0, 3, 1, 2];
        let xp = DMatrix::from_fn(60, 4, |i, j| x[(i, perm[j])]);
        let a = fit_ols(&x, &y, None).unwrap().coef;
        let b = fit_ols(&xp, &y, None).unwrap().coef;
        for j in 0..4 {
            prop_assert!((b[j] - a[perm[j]]).abs() < 1e-9);
        }
    }

    #[test]
    fn g_rows_sum_to_one(seed in 0u64..1000) {
        let pd = sim_two_stage(150, seed, &TwoStageParams::default()).unwrap().pd;
        let hs = Histories::new(&pd).unwrap();
        for s in [logit("~."), spec(Family::Multinomial, "~L+C"), spec(Family::Empirical, "~1")] {
            let g = fit_g_model(&pd, &hs, &[s], &vec![true; pd.n()]).unwrap();
            for k in 1..=2 {
                for row in &g.predict_all(&hs, k).unwrap().p {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }
}
