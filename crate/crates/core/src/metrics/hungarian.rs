//! Minimum-cost perfect assignment (Kuhn-Munkres with potentials, O(n^3)).

use ndarray::Array2;

/// Solves min-cost perfect assignment on a square cost matrix.
/// Returns the total cost and `row_to_col` mapping.
///
/// Panics if the matrix is not square or is empty.
pub fn assign_min(cost: &Array2<f64>) -> (f64, Vec<usize>) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assign_min requires a square matrix");
    assert!(n > 0, "assign_min requires a non-empty matrix");

    // 1-indexed arrays; index 0 is the sentinel column holding the row
    // currently being inserted.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0_usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0_usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
        // Augment along the alternating path back to the sentinel.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0_usize; n];
    for j in 1..=n {
        debug_assert!(p[j] >= 1);
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[[i, row_to_col[i]]]).sum();
    (total, row_to_col)
}

/// Maximum-agreement assignment for a rectangular count table.
/// Pads to square with zeros and minimizes negated counts. Returns the
/// number of agreements under the best cluster-to-label matching.
pub fn best_match_count(table: &Array2<f64>) -> f64 {
    let n = table.nrows().max(table.ncols());
    let mut cost = Array2::zeros((n, n));
    for ((i, j), &c) in table.indexed_iter() {
        cost[[i, j]] = -c;
    }
    let (total, _) = assign_min(&cost);
    -total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &Array2<f64>) -> f64 {
        let n = cost.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, cost, &mut best);
        best
    }

    fn permute(perm: &mut Vec<usize>, k: usize, cost: &Array2<f64>, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let total: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            permute(perm, k + 1, cost, best);
            perm.swap(k, i);
        }
    }

    #[test]
    fn hand_case_three_by_three() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let (total, cols) = assign_min(&cost);
        assert_eq!(total, 5.0);
        // Optimal: row0->col1 (1), row1->col0 (2), row2->col2 (2).
        assert_eq!(cols, vec![1, 0, 2]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=6 {
            for _ in 0..40 {
                let cost =
                    Array2::from_shape_fn((n, n), |_| rng.random_range(-10.0_f64..10.0));
                let (total, cols) = assign_min(&cost);
                let expected = brute_force_min(&cost);
                assert!(
                    (total - expected).abs() < 1e-9,
                    "n={n}: got {total}, brute force {expected}"
                );
                // cols must be a permutation.
                let mut seen = vec![false; n];
                for &c in &cols {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
            }
        }
    }

    #[test]
    fn rectangular_tables_pad_cleanly() {
        // 2 clusters, 3 labels: best matching pairs cluster 0 with label 2
        // and cluster 1 with label 0.
        let table = array![[1.0, 2.0, 7.0], [6.0, 1.0, 1.0]];
        assert_eq!(best_match_count(&table), 13.0);
        // Transposed orientation gives the same agreement count.
        let t = table.t().to_owned();
        assert_eq!(best_match_count(&t), 13.0);
    }
}
