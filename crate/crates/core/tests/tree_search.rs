mod common;

use common::brute_tree_objective;
use dtr::tree::{exact_tree_search, predict_tree, tree_objective, ScoredSample};
use proptest::prelude::*;

fn labels(m: usize) -> Vec<String> {
    (0..m).map(|a| format!("a{a}")).collect()
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn sample() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    (1usize..=14, 1usize..=3, 2usize..=3, 1usize..=2).prop_flat_map(|(n, p, m, depth)| {
        (
            prop::collection::vec(prop::collection::vec(prop_oneof![(0..4).prop_map(f64::from), -5.0..5.0f64], p), n),
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, m), n),
            Just(depth),
        )
    })
}

fn search(rows: &[Vec<f64>], gamma: &[Vec<f64>], depth: usize) -> (Vec<String>, f64) {
    let s = ScoredSample::new(rows, gamma.to_vec()).unwrap();
    let (tree, obj) = exact_tree_search(&s, depth, &labels(gamma[0].len()), &names(rows[0].len())).unwrap();
    (predict_tree(&tree, rows).unwrap(), obj)
}

#[test]
fn stump_on_a_hand_example() {
    let rows = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
    let gamma = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 2.0]];
    let s = ScoredSample::new(&rows, gamma).unwrap();
    let (tree, obj) = exact_tree_search(&s, 1, &labels(2), &names(1)).unwrap();
    assert_eq!(obj, 6.0);
    assert_eq!(tree.nodes[0].value, 2.5);
    assert_eq!(predict_tree(&tree, &rows).unwrap(), ["a0", "a0", "a1", "a1"]);
    assert_eq!(tree_objective(&tree, &s, &labels(2)), obj);
}

#[test]
fn depth_two_captures_an_interaction() {
    let mut rows = Vec::new();
    let mut gamma = Vec::new();
    for x in 0..2 {
        for y in 0..2 {
            rows.push(vec![f64::from(x), f64::from(y)]);
            gamma.push(if x == y { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        }
    }
    assert_eq!(search(&rows, &gamma, 1).1, 2.0);
    assert_eq!(search(&rows, &gamma, 2).1, 4.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_exhaustive_enumeration((rows, gamma, depth) in sample()) {
        let (_, obj) = search(&rows, &gamma, depth);
        let oracle = brute_tree_objective(&rows, &gamma, depth);
        prop_assert!((obj - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "{obj} vs {oracle}");
    }

    #[test]
    fn reported_objective_is_the_tree_value((rows, gamma, depth) in sample()) {
        let s = ScoredSample::new(&rows, gamma.clone()).unwrap();
        let acts = labels(gamma[0].len());
        let (tree, obj) = exact_tree_search(&s, depth, &acts, &names(rows[0].len())).unwrap();
        prop_assert!((tree_objective(&tree, &s, &acts) - obj).abs() <= 1e-9 * (1.0 + obj.abs()));
    }

    #[test]
    fn deeper_trees_never_do_worse((rows, gamma, _) in sample()) {
        prop_assert!(search(&rows, &gamma, 2).1 >= search(&rows, &gamma, 1).1 - 1e-9);
    }

    #[test]
    fn invariant_to_row_order((rows, gamma, depth) in sample(), seed in any::<u64>()) {
        let n = rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let prow: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let pgam: Vec<Vec<f64>> = order.iter().map(|&i| gamma[i].clone()).collect();
        let (a, oa) = search(&rows, &gamma, depth);
        let (b, ob) = search(&prow, &pgam, depth);
        prop_assert!((oa - ob).abs() <= 1e-9 * (1.0 + oa.abs()));
        let back: Vec<String> = order.iter().map(|&i| a[i].clone()).collect();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn row_shifts_move_the_objective_only(
        (rows, gamma, depth) in sample(),
        shift in prop::collection::vec(-2.0..2.0f64, 14),
    ) {
        let shifted: Vec<Vec<f64>> = gamma
            .iter()
            .zip(&shift)
            .map(|(g, c)| g.iter().map(|v| v + c).collect())
            .collect();
        let (_, o1) = search(&rows, &gamma, depth);
        let (_, o2) = search(&rows, &shifted, depth);
        let total: f64 = shift.iter().take(rows.len()).sum();
        prop_assert!((o2 - o1 - total).abs() <= 1e-8 * (1.0 + o1.abs() + total.abs()));
    }

    #[test]
    fn monotone_feature_maps_keep_recommendations((rows, gamma, depth) in sample()) {
        let mapped: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| 3.0 * x + 1.0).collect()).collect();
        prop_assert_eq!(search(&rows, &gamma, depth), search(&mapped, &gamma, depth));
    }
}
