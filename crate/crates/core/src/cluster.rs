//! K-means and the temperature-scaled soft assignment head.
//!
//! Two views of "which cluster does this point belong to" coexist here and
//! they are not interchangeable:
//!
//! * [`kmeans_fit`] / [`nearest_assign`] use Euclidean distance. This is the
//!   clustering that gets reported and evaluated.
//! * [`soft_assign`] turns cosine similarity against the current centers
//!   into a per-row distribution via a softmax at temperature `tau`. This is
//!   the differentiable head the training loss goes through; gradients flow
//!   to the latent codes only, never to the centers.
//!
//! [`cluster_loss`] on a batch of soft assignments `P` is
//!
//! ```text
//! L_c = sum_k pbar_k ln pbar_k - (1/B) sum_{i,k} P_ik ln P_ik,
//! pbar_k = (1/B) sum_i P_ik
//! ```
//!
//! i.e. the negated mutual information between the sample index and the
//! cluster variable: minimizing it rewards assignments that are confident
//! per row yet balanced across the batch. It sits in `[-ln K, 0]`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norms below this are treated as zero for cosine purposes: the pair's
/// similarity is reported as 0 with zero gradient, and the pair is counted.
const DEGENERATE_NORM: f64 = 1e-30;

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct KmeansFit {
    /// `(k, d)` centers.
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned center.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given
/// seed. Clusters that empty out are re-seeded to the point farthest from
/// its current center. Assignment ties go to the lowest center index.
pub fn kmeans_fit(x: &Array2<f64>, k: usize, seed: u64) -> Result<KmeansFit> {
    let n = x.nrows();
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} points cannot fill {k} clusters")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(x, k, &mut rng)?;
    let mut assignments = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (best, d) = nearest_center(x.row(i), &centers);
            if best != assignments[i] {
                assignments[i] = best;
                changed = true;
            }
            dist[i] = d;
        }

        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centers.dim());
        for i in 0..n {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &x.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed to the farthest point, excluding points that are
                // alone in their cluster (stealing those just moves the
                // hole around).
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap())
                    .ok_or_else(|| Error::invalid("cannot re-seed empty cluster"))?;
                counts[assignments[far]] -= 1;
                let mut row = sums.row_mut(assignments[far]);
                row -= &x.row(far);
                assignments[far] = c;
                counts[c] = 1;
                sums.row_mut(c).assign(&x.row(far));
                dist[far] = 0.0;
                changed = true;
            }
        }
        for c in 0..k {
            let mut row = centers.row_mut(c);
            row.assign(&sums.row(c));
            row /= counts[c] as f64;
        }
        if !changed {
            converged = true;
            break;
        }
    }

    // Make assignments consistent with the final centers even when the
    // iteration cap was hit mid-update.
    let mut inertia = 0.0;
    for i in 0..n {
        let (best, d) = nearest_center(x.row(i), &centers);
        assignments[i] = best;
        inertia += d;
    }
    Ok(KmeansFit {
        centers,
        assignments,
        inertia,
        iterations,
        converged,
    })
}

/// Best of `tries` independent seedings by inertia. Lloyd's algorithm
/// is sensitive to its initial draw when an embedding folds clusters
/// near each other; restarts make the fit reliable without changing
/// its contract. Try 0 reproduces `kmeans_fit(x, k, seed)`.
pub fn kmeans_fit_best(x: &Array2<f64>, k: usize, seed: u64, tries: usize) -> Result<KmeansFit> {
    let mut best: Option<KmeansFit> = None;
    for t in 0..tries.max(1) as u64 {
        let fit = kmeans_fit(x, k, seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one try runs"))
}

fn plus_plus_init(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));

    let mut min_d2 = vec![0.0f64; n];
    for i in 0..n {
        min_d2[i] = sq_dist(x.row(i), centers.row(0));
    }
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        if !total.is_finite() {
            // Squared distances can overflow even when the inputs are finite.
            return Err(Error::NonFinite(
                "k-means distances overflowed to non-finite values".into(),
            ));
        }
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining points coincide with existing centers.
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            let d = sq_dist(x.row(i), centers.row(c));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(centers)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(p: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = p
            .iter()
            .zip(center.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Euclidean nearest-center labels; this is the clustering that reports and
/// evaluation use.
pub fn nearest_assign(z: &Array2<f64>, centers: &Array2<f64>) -> Vec<usize> {
    assert_eq!(z.ncols(), centers.ncols(), "dimension mismatch");
    (0..z.nrows())
        .map(|i| nearest_center(z.row(i), centers).0)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SoftAssign {
    /// `(B, K)` row-stochastic assignment probabilities.
    pub probs: Array2<f64>,
    /// Count of `(row, center)` pairs where a zero norm made the cosine
    /// undefined and 0 was substituted.
    pub degenerate_pairs: usize,
}

/// Softmax over `cos(z_i, u_k) / tau` per row, stabilized by max
/// subtraction. With `tau = 0.1` the exponents span `[-10, 10]`.
pub fn soft_assign(z: &Array2<f64>, centers: &Array2<f64>, tau: f64) -> SoftAssign {
    let (sims, degenerate_pairs) = cosine_matrix(z, centers);
    let mut probs = sims;
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    if degenerate_pairs > 0 {
        log::debug!("soft_assign: {degenerate_pairs} zero-norm cosine pairs substituted with 0");
    }
    SoftAssign {
        probs,
        degenerate_pairs,
    }
}

fn cosine_matrix(z: &Array2<f64>, centers: &Array2<f64>) -> (Array2<f64>, usize) {
    assert_eq!(z.ncols(), centers.ncols(), "dimension mismatch");
    assert!(z.nrows() > 0 && centers.nrows() > 0, "empty input");
    let row_norm = |r: ndarray::ArrayView1<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z_norms: Vec<f64> = z.rows().into_iter().map(row_norm).collect();
    let c_norms: Vec<f64> = centers.rows().into_iter().map(row_norm).collect();
    let mut degenerate = 0;
    let mut sims = z.dot(&centers.t());
    for (i, mut row) in sims.rows_mut().into_iter().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            if z_norms[i] < DEGENERATE_NORM || c_norms[k] < DEGENERATE_NORM {
                *v = 0.0;
                degenerate += 1;
            } else {
                *v /= z_norms[i] * c_norms[k];
            }
        }
    }
    (sims, degenerate)
}

/// Row argmax with ties to the lowest index.
pub fn hard_assign(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `L_c` from a row-stochastic `P`; `0 ln 0` counts as 0 so hard
/// assignments are legal inputs.
pub fn cluster_loss(probs: &Array2<f64>) -> f64 {
    let b = probs.nrows() as f64;
    let k = probs.ncols();
    let mut pbar = vec![0.0f64; k];
    for row in probs.rows() {
        for (j, &p) in row.iter().enumerate() {
            pbar[j] += p;
        }
    }
    let marginal: f64 = pbar
        .iter()
        .map(|&s| {
            let p = s / b;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    let conditional: f64 = probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
        / b;
    marginal - conditional
}

#[derive(Debug, Clone)]
pub struct ClusterLoss {
    pub loss: f64,
    /// `dL_c/dz`, centers held constant.
    pub grad_z: Array2<f64>,
    pub probs: Array2<f64>,
    pub degenerate_pairs: usize,
}

/// Loss and gradient of `L_c` with respect to the latent batch, with the
/// soft assignment computed inside. The chain is
/// `z -> cosine -> softmax/tau -> L_c`; centers contribute no gradient.
pub fn cluster_objective(z: &Array2<f64>, centers: &Array2<f64>, tau: f64) -> ClusterLoss {
    assert!(tau > 0.0, "tau must be positive");
    let b = z.nrows();
    let k = centers.nrows();
    let (sims, degenerate_pairs) = cosine_matrix(z, centers);

    let mut probs = sims.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let loss = cluster_loss(&probs);

    let bf = b as f64;
    let mut pbar = vec![0.0f64; k];
    for row in probs.rows() {
        for (j, &p) in row.iter().enumerate() {
            pbar[j] += p;
        }
    }
    for v in pbar.iter_mut() {
        *v /= bf;
    }

    // dL/dP_ik = (ln pbar_k - ln P_ik) / B, then through the softmax:
    // dL/dS_ik = (P_ik / tau) (dL/dP_ik - sum_j dL/dP_ij P_ij).
    let mut ds = Array2::<f64>::zeros((b, k));
    for i in 0..b {
        let mut dot = 0.0;
        let mut dp = vec![0.0f64; k];
        for j in 0..k {
            let p = probs[[i, j]];
            dp[j] = (pbar[j].ln() - p.ln()) / bf;
            dot += dp[j] * p;
        }
        for j in 0..k {
            ds[[i, j]] = probs[[i, j]] / tau * (dp[j] - dot);
        }
    }

    // Cosine gradient: d cos(z, u)/dz = u/(|z||u|) - cos * z/|z|^2.
    let mut grad_z = Array2::<f64>::zeros(z.dim());
    for i in 0..b {
        let zi = z.row(i);
        let zn = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if zn < DEGENERATE_NORM {
            continue;
        }
        for j in 0..k {
            let uj = centers.row(j);
            let un = uj.iter().map(|v| v * v).sum::<f64>().sqrt();
            if un < DEGENERATE_NORM {
                continue;
            }
            let s = sims[[i, j]];
            let coeff = ds[[i, j]];
            if coeff == 0.0 {
                continue;
            }
            for (d, g) in grad_z.row_mut(i).iter_mut().enumerate() {
                *g += coeff * (uj[d] / (zn * un) - s * zi[d] / (zn * zn));
            }
        }
    }

    ClusterLoss {
        loss,
        grad_z,
        probs,
        degenerate_pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_input;
    use ndarray::array;

    #[test]
    fn soft_assign_hand_case() {
        // cos = 1 against the first center, 0 against the second; tau 0.1.
        let z = array![[1.0, 0.0]];
        let centers = array![[2.0, 0.0], [0.0, 3.0]];
        let sa = soft_assign(&z, &centers, 0.1);
        assert!((sa.probs[[0, 0]] - 0.9999546021312976).abs() < 1e-12);
        assert_eq!(sa.degenerate_pairs, 0);
    }

    #[test]
    fn soft_assign_rows_sum_to_one_and_scale_invariant() {
        let z = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let centers = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [-1.0, 2.0, 0.0]];
        let a = soft_assign(&z, &centers, 0.1);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let b = soft_assign(&z.mapv(|v| v * 37.5), &centers, 0.1);
        for (x, y) in a.probs.iter().zip(b.probs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_assign_counts_zero_norm_pairs() {
        let z = array![[0.0, 0.0], [1.0, 0.0]];
        let centers = array![[1.0, 0.0], [0.0, 1.0]];
        let sa = soft_assign(&z, &centers, 0.1);
        assert_eq!(sa.degenerate_pairs, 2);
        // A zero row scores cosine 0 everywhere: uniform assignment.
        assert!((sa.probs[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_uniform_is_zero() {
        let p = Array2::from_elem((6, 3), 1.0 / 3.0);
        assert!(cluster_loss(&p).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_hard_balanced_is_minus_ln_k() {
        let p = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!((cluster_loss(&p) - (-(2.0f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_single_cluster_collapse_is_zero() {
        let p = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert!(cluster_loss(&p).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_stays_in_range() {
        let z = array![[0.4, 0.1], [-0.3, 0.9], [1.0, 1.0], [0.0, -2.0]];
        let centers = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let l = cluster_objective(&z, &centers, 0.1).loss;
        let k = 3.0f64;
        assert!(l <= 1e-12 && l >= -k.ln() - 1e-12, "loss {l}");
    }

    #[test]
    fn cluster_objective_grad_matches_finite_differences() {
        let z0 = array![
            [0.4, 0.1, -0.2],
            [-0.3, 0.9, 0.5],
            [1.0, 1.0, -1.0],
            [0.2, -2.0, 0.3]
        ];
        let centers = array![[1.0, 0.0, 0.5], [0.0, 1.0, -0.5]];
        let report = grad_check_input(
            &z0,
            |z| {
                let c = cluster_objective(z, &centers, 0.1);
                (c.loss, c.grad_z)
            },
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn hard_assign_breaks_ties_low() {
        let p = array![[0.4, 0.4, 0.2], [0.1, 0.5, 0.4]];
        assert_eq!(hard_assign(&p), vec![0, 1]);
    }

    #[test]
    fn kmeans_recovers_two_tight_pairs() {
        // Brute-force oracle over all 2-partitions agrees: each pair is a
        // cluster and the centers are the pair means.
        let x = array![[0.0, 0.0], [0.2, 0.0], [10.0, 10.0], [10.2, 10.0]];
        let fit = kmeans_fit(&x, 2, 13).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.assignments[0], fit.assignments[1]);
        assert_eq!(fit.assignments[2], fit.assignments[3]);
        assert_ne!(fit.assignments[0], fit.assignments[2]);
        let mut means: Vec<Vec<f64>> = fit
            .centers
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        means.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((means[0][0] - 0.1).abs() < 1e-12 && means[0][1].abs() < 1e-12);
        assert!((means[1][0] - 10.1).abs() < 1e-12 && (means[1][1] - 10.0).abs() < 1e-12);

        // Exhaustive check: no 2-partition beats the returned inertia.
        let best = brute_force_sse(&x, 2);
        assert!(fit.inertia <= best + 1e-9, "{} vs {}", fit.inertia, best);
    }

    fn brute_force_sse(x: &Array2<f64>, k: usize) -> f64 {
        let n = x.nrows();
        assert_eq!(k, 2);
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let (mut sse, mut any) = (0.0, true);
            for part in 0..2 {
                let rows: Vec<usize> = (0..n)
                    .filter(|&i| ((mask >> i) & 1) as usize == part)
                    .collect();
                if rows.is_empty() {
                    any = false;
                    break;
                }
                let mut mean = vec![0.0; x.ncols()];
                for &r in &rows {
                    for (j, m) in mean.iter_mut().enumerate() {
                        *m += x[[r, j]];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows.len() as f64;
                }
                for &r in &rows {
                    for (j, m) in mean.iter().enumerate() {
                        sse += (x[[r, j]] - m) * (x[[r, j]] - m);
                    }
                }
            }
            if any && sse < best {
                best = sse;
            }
        }
        best
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let x = Array2::from_shape_fn((40, 3), |_| rng.random_range(-5.0..5.0));
        let a = kmeans_fit(&x, 4, 99).unwrap();
        let b = kmeans_fit(&x, 4, 99).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn kmeans_fills_every_cluster() {
        // More clusters than natural structure: duplicates force re-seeding.
        let x = array![
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [5.0, 5.0],
            [5.0, 5.0],
            [9.0, 0.0]
        ];
        let fit = kmeans_fit(&x, 3, 1).unwrap();
        let mut counts = vec![0; 3];
        for &a in &fit.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn kmeans_rejects_more_clusters_than_points() {
        let x = array![[0.0], [1.0]];
        assert!(kmeans_fit(&x, 3, 0).is_err());
    }

    #[test]
    fn nearest_assign_matches_fit_assignments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        let x = Array2::from_shape_fn((30, 2), |_| rng.random_range(-3.0..3.0));
        let fit = kmeans_fit(&x, 3, 5).unwrap();
        assert_eq!(nearest_assign(&x, &fit.centers), fit.assignments);
    }
}
