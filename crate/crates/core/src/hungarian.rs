//! Minimum-cost bipartite assignment with a deterministic tie-break.

use crate::error::{Error, Result};

/// Assignment between predictions (rows) and ground truths (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
    pub cost: f64,
}

/// Row-major cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{rows}×{cols} cost matrix with {} entries", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged cost matrix"));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Optimal assignment of `rows ≤ cols` by successive shortest augmenting
/// paths with potentials, `O(rows²·cols)`. Returns the column of each row.
fn solve_wide(rows: &[usize], cols: &[usize], cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
    let mut col_of = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = cols[j - 1];
        }
    }
    col_of
}

/// Optimal pairs over the given row and column subsets, either orientation.
fn solve(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    if rows.len() <= cols.len() {
        let assigned = solve_wide(rows, cols, |r, k| c.at(r, k));
        rows.iter().copied().zip(assigned).collect()
    } else {
        let assigned = solve_wide(cols, rows, |k, r| c.at(r, k));
        let mut pairs: Vec<(usize, usize)> = assigned.into_iter().zip(cols.iter().copied()).collect();
        pairs.sort_unstable();
        pairs
    }
}

fn total(c: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, k)| c.at(r, k)).sum()
}

/// Minimum-cost assignment of `min(rows, cols)` pairs. Among optimal
/// assignments (within `1e-9` relative), returns the lexicographically
/// smallest pair list.
pub fn hungarian_match(c: &CostMatrix) -> Result<MatchResult> {
    if let Some(bad) = c.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("cost matrix contains {bad}")));
    }
    let all_rows: Vec<usize> = (0..c.rows).collect();
    let all_cols: Vec<usize> = (0..c.cols).collect();
    let target = c.rows.min(c.cols);
    let best = total(c, &solve(c, &all_rows, &all_cols));
    let tol = 1e-9 * best.abs().max(1.0);

    // Fix pairs greedily in prediction order, taking the smallest ground
    // truth that keeps the remainder optimal.
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    for r in 0..c.rows {
        if fixed.len() == target {
            break;
        }
        let free_rows: Vec<usize> = (r + 1..c.rows).collect();
        let mut chosen = None;
        for k in 0..c.cols {
            if fixed.iter().any(|p| p.1 == k) {
                continue;
            }
            let free_cols: Vec<usize> = (0..c.cols).filter(|&j| j != k && !fixed.iter().any(|p| p.1 == j)).collect();
            let rest = solve(c, &free_rows, &free_cols);
            if fixed.len() + 1 + rest.len() != target {
                continue;
            }
            let cost = fixed_cost + c.at(r, k) + total(c, &rest);
            if (cost - best).abs() <= tol {
                chosen = Some(k);
                break;
            }
        }
        if let Some(k) = chosen {
            fixed_cost += c.at(r, k);
            fixed.push((r, k));
        }
    }
    let unmatched_predictions = (0..c.rows).filter(|r| !fixed.iter().any(|p| p.0 == *r)).collect();
    let unmatched_ground_truths = (0..c.cols).filter(|k| !fixed.iter().any(|p| p.1 == *k)).collect();
    Ok(MatchResult {
        cost: total(c, &fixed),
        pairs: fixed,
        unmatched_predictions,
        unmatched_ground_truths,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::oracle::assignment_oracle;

    #[test]
    fn small_examples() {
        let r = hungarian_match(&CostMatrix::from_rows(&[vec![7.0]]).unwrap()).unwrap();
        assert_eq!((r.pairs, r.cost), (vec![(0, 0)], 7.0));
        let r = hungarian_match(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()).unwrap();
        assert_eq!((r.pairs, r.cost), (vec![(0, 0), (1, 1)], 2.0));
        let empty = hungarian_match(&CostMatrix::new(3, 0, vec![]).unwrap()).unwrap();
        assert!(empty.pairs.is_empty() && empty.unmatched_predictions == vec![0, 1, 2]);
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let c = CostMatrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(hungarian_match(&c), Err(Error::Numeric(_))));
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = CostMatrix::new(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(hungarian_match(&flat).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        // Three predictions compete for one ground truth at equal cost.
        let tall = CostMatrix::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let r = hungarian_match(&tall).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched_predictions, vec![1, 2]);
    }

    #[test]
    fn matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| if case % 3 == 0 { rng.gen_range(0..4) as f64 } else { rng.gen_range(-5.0..5.0) })
                .collect();
            let c = CostMatrix::new(rows, cols, data).unwrap();
            let got = hungarian_match(&c).unwrap();
            let (cost, pairs) = assignment_oracle(&c);
            assert!((got.cost - cost).abs() < 1e-9, "case {case}: {} vs {cost}", got.cost);
            assert_eq!(got.pairs, pairs, "case {case}");
            assert_eq!(got.pairs.len(), rows.min(cols));
        }
    }
}
