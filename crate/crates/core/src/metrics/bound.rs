//! Consistency check between the demographic-parity gap of a downstream
//! classifier and an information estimate of what the representation leaks.
//!
//! A large gap is only possible when the representation carries enough
//! group information: h(eta * gap) lower-bounds I(Z;G), and the trained
//! variational bound upper-bounds it. `lower > estimate` therefore signals
//! that the estimator's predictor is undertrained, which is reported as a
//! flag rather than an error.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{Predictor, PredictorMode, SensitiveBatch};
use crate::metrics::{gdp, h_lemma1};
use crate::nn::AdamState;

/// Rows used for the information estimate are capped at this count;
/// the pairwise term is quadratic in the batch.
const CLUB_MAX_ROWS: usize = 2048;
const CLUB_TRAIN_STEPS: usize = 150;
const CLUB_TRAIN_LR: f64 = 1e-2;
const CLUB_HIDDEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Smallest group frequency.
    pub eta: f64,
    /// Demographic-parity gap of the supplied predictions.
    pub gdp: f64,
    /// h(eta * gdp): information the observed gap requires.
    pub lower: f64,
    /// Variational upper estimate of I(Z;G) from a freshly trained
    /// group predictor.
    pub club_estimate: f64,
    /// True when lower > club_estimate.
    pub flagged: bool,
}

/// Builds the bound consistency report for a batch of embeddings `z`,
/// their sensitive groups, and some classifier's hard predictions.
pub fn bound_report(
    z: &Array2<f64>,
    groups: &[usize],
    predictions: &[usize],
    seed: u64,
) -> Result<BoundReport> {
    let n = z.nrows();
    if groups.len() != n || predictions.len() != n {
        return Err(Error::invalid(format!(
            "row counts disagree: z has {n}, groups {}, predictions {}",
            groups.len(),
            predictions.len()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    let n_groups = groups.iter().max().unwrap() + 1;
    if n_groups < 2 {
        return Err(Error::invalid("need at least 2 sensitive groups"));
    }

    let mut counts = vec![0_usize; n_groups];
    for &g in groups {
        counts[g] += 1;
    }
    if let Some(t) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("sensitive group {t} has no samples")));
    }
    let eta = counts.iter().map(|&c| c as f64 / n as f64).fold(f64::INFINITY, f64::min);

    let gap = gdp(predictions, groups)?;
    let lower = h_lemma1(eta * gap)?;
    let club_estimate = club_estimate(z, groups, n_groups, seed)?;

    Ok(BoundReport {
        eta,
        gdp: gap,
        lower,
        club_estimate,
        flagged: lower > club_estimate,
    })
}

/// Trains a throwaway group predictor on (z, groups) and evaluates the
/// pairwise information bound on one batch (subsampled by stride when the
/// set is large).
fn club_estimate(z: &Array2<f64>, groups: &[usize], n_groups: usize, seed: u64) -> Result<f64> {
    let (z_eval, groups_eval) = if z.nrows() > CLUB_MAX_ROWS {
        let stride = z.nrows().div_ceil(CLUB_MAX_ROWS);
        let idx: Vec<usize> = (0..z.nrows()).step_by(stride).collect();
        let sub = Array2::from_shape_fn((idx.len(), z.ncols()), |(i, j)| z[[idx[i], j]]);
        let sub_groups: Vec<usize> = idx.iter().map(|&i| groups[i]).collect();
        (sub, sub_groups)
    } else {
        (z.clone(), groups.to_vec())
    };
    let sensitive = SensitiveBatch::Discrete {
        groups: groups_eval,
        n_groups,
    };

    let mut predictor = Predictor::new(
        z.ncols(),
        &[CLUB_HIDDEN],
        PredictorMode::Discrete { n_groups },
        seed,
    )?;
    let mut adam = AdamState::new(&predictor.net);
    for _ in 0..CLUB_TRAIN_STEPS {
        predictor.train_step(&z_eval, &sensitive, &mut adam, CLUB_TRAIN_LR)?;
    }
    let (estimate, _) = predictor.club_loss(&z_eval, &sensitive)?;
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn constant_classifier_never_flags() {
        // gap = 0, so the lower bound is h(0) = 0 and the (nonnegative
        // up to machine noise) estimate cannot fall below it strictly.
        let z = noise(80, 4, 1);
        let groups: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let preds = vec![0_usize; 80];
        let report = bound_report(&z, &groups, &preds, 9).unwrap();
        assert_eq!(report.gdp, 0.0);
        assert_eq!(report.lower, 0.0);
        assert!(!report.flagged);
    }

    #[test]
    fn eta_is_min_group_frequency() {
        let z = noise(80, 3, 2);
        let mut groups = vec![0_usize; 60];
        groups.extend(vec![1_usize; 20]);
        let preds: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let report = bound_report(&z, &groups, &preds, 9).unwrap();
        assert_eq!(report.eta, 0.25);
    }

    #[test]
    fn leaky_embedding_with_matching_predictions_is_consistent() {
        // z encodes the group directly and predictions equal the group:
        // the gap is 1, the lower bound is h(eta) > 0, and a trained
        // predictor pushes the estimate well above it.
        let n = 120;
        let mut z = noise(n, 3, 3);
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &g) in groups.iter().enumerate() {
            z[[i, 0]] += if g == 0 { -4.0 } else { 4.0 };
        }
        let report = bound_report(&z, &groups, &groups.clone(), 9).unwrap();
        assert_eq!(report.gdp, 1.0);
        assert!(report.lower > 0.0);
        assert!(report.club_estimate > report.lower, "{report:?}");
        assert!(!report.flagged);
    }

    #[test]
    fn impossible_gap_on_clean_embedding_flags() {
        // z is pure noise (no group information) but the predictions are
        // forced to equal the groups, claiming a gap of 1. The estimate
        // stays near 0 while the lower bound is h(0.5) > 0. The sample
        // count is large enough that the predictor cannot memorize noise.
        let n = 2000;
        let z = noise(n, 3, 4);
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let report = bound_report(&z, &groups, &groups.clone(), 9).unwrap();
        assert_eq!(report.gdp, 1.0);
        assert!(report.lower > 0.1);
        assert!(report.flagged, "{report:?}");
    }

    #[test]
    fn input_validation() {
        let z = noise(10, 2, 5);
        let groups = vec![0_usize; 10];
        let preds = vec![0_usize; 10];
        // Single global group.
        assert!(bound_report(&z, &groups, &preds, 9).is_err());
        // Length mismatch.
        let groups: Vec<usize> = (0..10).map(|i| i % 2).collect();
        assert!(bound_report(&z, &groups[..9], &preds, 9).is_err());
        // Group id hole.
        let mut holey = groups.clone();
        holey[0] = 3;
        assert!(bound_report(&z, &holey, &preds, 9).is_err());
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let n = CLUB_MAX_ROWS + 500;
        let z = noise(n, 2, 6);
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let preds = vec![0_usize; n];
        let report = bound_report(&z, &groups, &preds, 9).unwrap();
        assert!(report.club_estimate.is_finite());
    }
}
