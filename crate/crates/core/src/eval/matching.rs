//! Optimal assignment on IoU matrices.

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(row, column)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost assignment of every row of a `n × m` matrix (`n ≤ m`) to a
/// distinct column (Kuhn–Munkres with potentials). Returns the column of
/// each row.
fn assign_min(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
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
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Maximizes total IoU over one-to-one pairings of a row-major
/// `rows × cols` matrix; zero-IoU pairs are dropped afterwards.
pub fn hungarian_match(iou: &[f64], rows: usize, cols: usize) -> MatchResult {
    assert_eq!(iou.len(), rows * cols, "matrix size");
    let mut pairs = Vec::new();
    if rows > 0 && cols > 0 {
        if rows <= cols {
            let cost: Vec<f64> = iou.iter().map(|v| -v).collect();
            for (r, c) in assign_min(&cost, rows, cols).into_iter().enumerate() {
                pairs.push((r, c));
            }
        } else {
            let mut cost = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    cost[c * rows + r] = -iou[r * cols + c];
                }
            }
            for (c, r) in assign_min(&cost, cols, rows).into_iter().enumerate() {
                pairs.push((r, c));
            }
            pairs.sort();
        }
    }
    pairs.retain(|&(r, c)| iou[r * cols + c] > 0.0);
    let unmatched_rows = (0..rows).filter(|r| !pairs.iter().any(|p| p.0 == *r)).collect();
    let unmatched_cols = (0..cols).filter(|c| !pairs.iter().any(|p| p.1 == *c)).collect();
    MatchResult {
        pairs,
        unmatched_rows,
        unmatched_cols,
    }
}

/// Best total over all injective pairings, by exhaustive search.
pub fn brute_force_total(iou: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(iou: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        // Row r may stay unmatched when there are more rows than columns.
        let mut best = if rows > cols { go(iou, rows, cols, r + 1, used) } else { f64::NEG_INFINITY };
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.max(iou[r * cols + c] + go(iou, rows, cols, r + 1, used));
                used[c] = false;
            }
        }
        if best == f64::NEG_INFINITY {
            go(iou, rows, cols, r + 1, used)
        } else {
            best
        }
    }
    go(iou, rows, cols, 0, &mut vec![false; cols])
}

pub fn total(iou: &[f64], cols: usize, m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(r, c)| iou[r * cols + c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_cases() {
        assert_eq!(hungarian_match(&[0.9, 0.1, 0.1, 0.9], 2, 2).pairs, vec![(0, 0), (1, 1)]);
        let m = hungarian_match(&[0.2, 0.8], 1, 2);
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.unmatched_cols, vec![0]);
        let m = hungarian_match(&[0.0, 0.0, 0.0, 0.5], 2, 2);
        assert_eq!(m.pairs, vec![(1, 1)]);
        assert_eq!(m.unmatched_rows, vec![0]);
        assert!(hungarian_match(&[], 0, 3).pairs.is_empty());
    }

    #[test]
    fn random_5x5_against_all_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
            let r = hungarian_match(&m, 5, 5);
            assert!((total(&m, 5, &r) - brute_force_total(&m, 5, 5)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_rectangular_up_to_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let (rows, cols) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let m: Vec<f64> = (0..rows * cols)
                .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() })
                .collect();
            let r = hungarian_match(&m, rows, cols);
            assert!((total(&m, cols, &r) - brute_force_total(&m, rows, cols)).abs() < 1e-12);
            let mut seen_c = vec![false; cols];
            for &(_, c) in &r.pairs {
                assert!(!seen_c[c]);
                seen_c[c] = true;
            }
        }
    }
}
