//! Minimum-cost bipartite matching (Kuhn–Munkres with potentials) and a
//! lexicographic tie-break among optimal assignments.

use crate::error::{Error, Result};

/// Injective prediction → ground-truth assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub pair_costs: Vec<f64>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_targets: Vec<usize>,
    /// Sum of `pair_costs` in pair order.
    pub total_cost: f64,
}

impl MatchAssignment {
    fn from_rows(cost: &[Vec<f64>], row_to_col: &[Option<usize>], cols: usize) -> Self {
        let mut pairs = Vec::new();
        let mut unmatched_predictions = Vec::new();
        let mut used = vec![false; cols];
        for (i, c) in row_to_col.iter().enumerate() {
            match c {
                Some(j) => {
                    pairs.push((i, *j));
                    used[*j] = true;
                }
                None => unmatched_predictions.push(i),
            }
        }
        let pair_costs: Vec<f64> = pairs.iter().map(|&(i, j)| cost[i][j]).collect();
        Self {
            total_cost: pair_costs.iter().sum(),
            pairs,
            pair_costs,
            unmatched_predictions,
            unmatched_targets: (0..cols).filter(|&j| !used[j]).collect(),
        }
    }

    /// Ground-truth index matched to prediction `i`.
    pub fn target_of(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == i).map(|p| p.1)
    }
}

/// Optimal assignment for an `n × m` matrix with `n <= m`; returns the column
/// of every row.
fn solve_wide(a: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    // 1-based potentials formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal row → column map for any rectangular matrix.
fn solve(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        solve_wide(cost, rows, cols).into_iter().map(Some).collect()
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let col_to_row = solve_wide(&t, cols, rows);
        let mut out = vec![None; rows];
        for (j, i) in col_to_row.into_iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }
}

fn assignment_cost(cost: &[Vec<f64>], rows: &[Option<usize>]) -> f64 {
    rows.iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|j| cost[i][j]))
        .sum()
}

/// Optimal completion of a partial assignment: rows `< start` are fixed as
/// given, remaining rows are matched optimally to the unused columns.
fn complete(cost: &[Vec<f64>], fixed: &[Option<usize>], start: usize, cols: usize) -> Vec<Option<usize>> {
    let rows = cost.len();
    let mut used = vec![false; cols];
    for j in fixed[..start].iter().flatten() {
        used[*j] = true;
    }
    let free_cols: Vec<usize> = (0..cols).filter(|&j| !used[j]).collect();
    let sub: Vec<Vec<f64>> = (start..rows)
        .map(|i| free_cols.iter().map(|&j| cost[i][j]).collect())
        .collect();
    let sol = solve(&sub, rows - start, free_cols.len());
    let mut out = fixed[..start].to_vec();
    out.extend(sol.into_iter().map(|c| c.map(|k| free_cols[k])));
    out
}

/// Minimum-cost assignment of predictions (rows) to ground truths (columns);
/// among optimal assignments the pair list sorted by prediction is
/// lexicographically smallest.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for (i, r) in cost.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::shape(format!("cost row {i} has {} entries, expected {cols}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite cost at ({i}, {j})")));
        }
    }
    let mut best = solve(cost, rows, cols);
    let opt = assignment_cost(cost, &best);
    let tol = 1e-12 * (1.0 + opt.abs());
    let quota = rows.min(cols);
    for i in 0..rows {
        let matched_before = best[..i].iter().flatten().count();
        let candidates: Vec<usize> = match best[i] {
            Some(j) => (0..j).collect(),
            None => (0..cols).collect(),
        };
        if matched_before >= quota {
            break;
        }
        for j in candidates {
            if best[..i].contains(&Some(j)) {
                continue;
            }
            let mut fixed = best[..i].to_vec();
            fixed.push(Some(j));
            let trial = complete(cost, &fixed, i + 1, cols);
            if trial.iter().flatten().count() == quota && assignment_cost(cost, &trial) <= opt + tol {
                best = trial;
                break;
            }
        }
    }
    Ok(MatchAssignment::from_rows(cost, &best, cols))
}
