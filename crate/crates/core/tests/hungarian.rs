mod common;

use camoseg::losses::hungarian_match;
use common::{brute_force_min_cost, rng, uniform_vec};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn random_matrices_match_exhaustive_minimum() {
    let mut r = rng(21);
    for _ in 0..300 {
        let (p, g) = (r.random_range(1..=6), r.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..p).map(|_| uniform_vec(&mut r, g, 0.0, 10.0)).collect();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.total_cost, brute_force_min_cost(&cost));
    }
}

#[test]
fn integer_ties_match_exhaustive_minimum() {
    let mut r = rng(22);
    for _ in 0..300 {
        let (p, g) = (r.random_range(1..=6), r.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| r.random_range(0..3) as f64).collect()).collect();
        assert_eq!(hungarian_match(&cost).unwrap().total_cost, brute_force_min_cost(&cost));
    }
}

#[test]
fn ragged_rows_are_rejected() {
    assert!(hungarian_match(&[vec![1.0, 2.0], vec![1.0]]).is_err());
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(p, g)| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, g), p))
}

proptest! {
    #[test]
    fn assignment_is_injective_and_complete(cost in matrix()) {
        let m = hungarian_match(&cost).unwrap();
        let (p, g) = (cost.len(), cost[0].len());
        prop_assert_eq!(m.pairs.len(), p.min(g));
        let mut rows: Vec<usize> = m.pairs.iter().map(|x| x.0).chain(m.unmatched_predictions.iter().copied()).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..p).collect::<Vec<_>>());
        let mut cols: Vec<usize> = m.pairs.iter().map(|x| x.1).chain(m.unmatched_targets.iter().copied()).collect();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..g).collect::<Vec<_>>());
        let sum: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        prop_assert_eq!(sum, m.total_cost);
    }

    #[test]
    fn transpose_has_same_optimum(cost in matrix()) {
        let tr: Vec<Vec<f64>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        let a = hungarian_match(&cost).unwrap().total_cost;
        let b = hungarian_match(&tr).unwrap().total_cost;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn shifting_a_row_keeps_the_assignment(cost in matrix(), shift in -5.0f64..5.0) {
        prop_assume!(cost.len() <= cost[0].len());
        let mut shifted = cost.clone();
        shifted[0].iter_mut().for_each(|v| *v += shift);
        let a = hungarian_match(&cost).unwrap();
        let b = hungarian_match(&shifted).unwrap();
        let expect = a.total_cost + shift;
        prop_assert!((b.total_cost - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }
}
