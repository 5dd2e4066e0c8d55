//! Maximal-correlation estimators.
//!
//! [`rho_star_neural`] trains a pair of small networks to maximize the
//! Pearson correlation between learned 1-d projections of its two inputs.
//! [`rho_star_ace_oracle`] is the slow reference: quantile binning plus
//! alternating conditional expectations on the discretized joint, with a
//! singular-value noise-floor correction so independent data reads near 0.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Mlp, MlpSpec};

/// Minimum sample count for the neural estimator.
pub const RHO_MIN_SAMPLES: usize = 30;
const VAR_FLOOR: f64 = 1e-12;

/// Knobs for [`rho_star_neural`]. Defaults are calibrated so independent
/// inputs score near 0 and deterministic monotone relationships score
/// near 1.
#[derive(Debug, Clone)]
pub struct RhoStarConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RhoStarConfig {
    fn default() -> Self {
        // 100 full-batch epochs saturate the deterministic anchor while
        // keeping the held-in overfit floor on independent pairs near the
        // sample canonical-correlation noise (about sqrt(k/n)).
        Self {
            hidden: 16,
            epochs: 100,
            lr: 5e-3,
        }
    }
}

/// One-hot encodes integer labels into an n x n_classes matrix.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (i, &l) in labels.iter().enumerate() {
        debug_assert!(l < n_classes);
        out[[i, l]] = 1.0;
    }
    out
}

/// Wraps a scalar series as an n x 1 matrix.
pub fn column_matrix(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("shape matches length")
}

/// Centers each column and divides by its population standard deviation.
/// Zero-variance columns are centered only.
fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n;
        if var > VAR_FLOOR {
            let inv = 1.0 / var.sqrt();
            col.mapv_inplace(|v| v * inv);
        }
    }
    out
}

struct PearsonGrads {
    rho: f64,
    du: Array2<f64>,
    dv: Array2<f64>,
}

/// Pearson correlation of two n x 1 columns and the gradients of -rho^2
/// with respect to each entry. Returns None when either side has
/// (numerically) zero variance.
fn pearson_with_grads(u: &Array2<f64>, v: &Array2<f64>) -> Option<PearsonGrads> {
    let n = u.nrows() as f64;
    let um = u.sum() / n;
    let vm = v.sum() / n;
    let uc = u.mapv(|x| x - um);
    let vc = v.mapv(|x| x - vm);
    let suu: f64 = uc.iter().map(|x| x * x).sum();
    let svv: f64 = vc.iter().map(|x| x * x).sum();
    if suu < VAR_FLOOR || svv < VAR_FLOOR {
        return None;
    }
    let suv: f64 = uc.iter().zip(vc.iter()).map(|(a, b)| a * b).sum();
    let denom = (suu * svv).sqrt();
    let rho = suv / denom;
    // d(rho)/du_i = vc_i / denom - rho * uc_i / suu; the mean-adjustment
    // term vanishes because the centered columns sum to zero.
    let scale = -2.0 * rho;
    let du = Array2::from_shape_fn(u.raw_dim(), |(i, _)| {
        scale * (vc[[i, 0]] / denom - rho * uc[[i, 0]] / suu)
    });
    let dv = Array2::from_shape_fn(v.raw_dim(), |(i, _)| {
        scale * (uc[[i, 0]] / denom - rho * vc[[i, 0]] / svv)
    });
    Some(PearsonGrads { rho, du, dv })
}

/// Neural maximal-correlation estimate between row-aligned matrices.
///
/// Two [d, hidden, 1] networks are trained jointly by full-batch Adam on
/// the loss -rho^2; the best |rho| seen across epochs is returned, clamped
/// to [0, 1]. Inputs are standardized per column first, so a constant
/// input yields 0. Requires at least [`RHO_MIN_SAMPLES`] rows.
pub fn rho_star_neural(
    x: &Array2<f64>,
    g: &Array2<f64>,
    seed: u64,
    cfg: &RhoStarConfig,
) -> Result<f64> {
    if x.nrows() != g.nrows() {
        return Err(Error::invalid(format!(
            "row counts disagree: {} vs {}",
            x.nrows(),
            g.nrows()
        )));
    }
    if x.nrows() < RHO_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "need at least {RHO_MIN_SAMPLES} samples, got {}",
            x.nrows()
        )));
    }
    if x.ncols() == 0 || g.ncols() == 0 {
        return Err(Error::invalid("inputs must have at least one column"));
    }

    let xs = standardize_columns(x);
    let gs = standardize_columns(g);

    let spec_f = MlpSpec::relu_linear(vec![x.ncols(), cfg.hidden, 1])?;
    let spec_h = MlpSpec::relu_linear(vec![g.ncols(), cfg.hidden, 1])?;
    let mut f = Mlp::init(spec_f, seed);
    let mut h = Mlp::init(spec_h, seed.wrapping_add(1));
    let mut adam_f = AdamState::new(&f);
    let mut adam_h = AdamState::new(&h);

    let mut best = 0.0_f64;
    for _ in 0..cfg.epochs {
        let fwd_f = f.forward(&xs);
        let fwd_h = h.forward(&gs);
        let Some(p) = pearson_with_grads(fwd_f.output(), fwd_h.output()) else {
            // Constant projection: the correlation gradient is undefined
            // and full-batch training cannot recover, so stop.
            break;
        };
        if p.rho.abs() > best {
            best = p.rho.abs();
        }
        if !p.rho.is_finite() {
            return Err(Error::NonFinite("correlation during rho* training".into()));
        }
        let grads_f = f.backward(&fwd_f, &p.du);
        let grads_h = h.backward(&fwd_h, &p.dv);
        adam_step(&mut f, &grads_f, &mut adam_f, cfg.lr);
        adam_step(&mut h, &grads_h, &mut adam_h, cfg.lr);
    }
    Ok(best.clamp(0.0, 1.0))
}

/// Assigns each value to a quantile bin, returning dense ids in
/// 0..n_bins_used. Heavy ties collapse bins; the bin count never exceeds
/// min(requested, n).
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let b = bins.min(n).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    // Left boundaries of bins 1..b; a value belongs to the last bin whose
    // boundary does not exceed it.
    let boundaries: Vec<f64> = (1..b).map(|j| sorted[j * n / b]).collect();
    let raw: Vec<usize> = values
        .iter()
        .map(|&v| boundaries.iter().take_while(|&&c| c <= v).count())
        .collect();
    dense_remap(&raw)
}

fn dense_remap(ids: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = ids.to_vec();
    seen.sort_unstable();
    seen.dedup();
    ids.iter()
        .map(|id| seen.binary_search(id).expect("id came from the same slice"))
        .collect()
}

/// Reference maximal-correlation estimate via alternating conditional
/// expectations on a quantile-binned joint distribution.
///
/// The raw ACE value carries an upward finite-sample bias of roughly
/// (sqrt(Kx - 1) + sqrt(Kg - 1)) / sqrt(n) (the spectral edge of a noise
/// contingency table), so the estimate is debiased in the squared domain:
/// sqrt(max(0, rho^2 - edge^2)). Independent data then reads near 0.
pub fn rho_star_ace_oracle(x: &[f64], g: &[f64], bins: usize) -> Result<f64> {
    if x.len() != g.len() {
        return Err(Error::invalid(format!(
            "series lengths disagree: {} vs {}",
            x.len(),
            g.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    if x.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("inputs must be finite"));
    }

    let xb = quantile_bins(x, bins);
    let gb = quantile_bins(g, bins);
    let kx = xb.iter().max().unwrap() + 1;
    let kg = gb.iter().max().unwrap() + 1;
    if kx < 2 || kg < 2 {
        // A constant side has maximal correlation 0 by convention.
        return Ok(0.0);
    }

    let n = x.len() as f64;
    let mut joint = Array2::<f64>::zeros((kx, kg));
    for (&a, &b) in xb.iter().zip(&gb) {
        joint[[a, b]] += 1.0 / n;
    }
    let px: Array1<f64> = joint.rows().into_iter().map(|r| r.sum()).collect();
    let pg: Array1<f64> = joint.columns().into_iter().map(|c| c.sum()).collect();

    // Power iteration on score vectors a (over x-bins) and c (over g-bins).
    let mut c: Array1<f64> = (0..kg).map(|t| t as f64).collect();
    normalize_scores(&mut c, &pg);
    let mut rho = 0.0_f64;
    for _ in 0..1000 {
        // a_s = E[c | X = s], then standardize under px.
        let mut a = Array1::zeros(kx);
        for s in 0..kx {
            let mut acc = 0.0;
            for t in 0..kg {
                acc += joint[[s, t]] * c[t];
            }
            a[s] = acc / px[s];
        }
        if !normalize_scores(&mut a, &px) {
            rho = 0.0;
            break;
        }
        // c_t = E[a | G = t]; its norm under pg is the current correlation.
        for t in 0..kg {
            let mut acc = 0.0;
            for s in 0..kx {
                acc += joint[[s, t]] * a[s];
            }
            c[t] = acc / pg[t];
        }
        let norm = weighted_norm(&c, &pg);
        if norm < 1e-15 {
            rho = 0.0;
            break;
        }
        let prev = rho;
        rho = norm;
        c.mapv_inplace(|v| v / norm);
        if (rho - prev).abs() < 1e-12 {
            break;
        }
    }

    let edge = (((kx - 1) as f64).sqrt() + ((kg - 1) as f64).sqrt()) / n.sqrt();
    let debiased = (rho * rho - edge * edge).max(0.0).sqrt();
    Ok(debiased.clamp(0.0, 1.0))
}

/// Centers and scales a score vector to unit variance under weights p.
/// Returns false when the variance is numerically zero.
fn normalize_scores(scores: &mut Array1<f64>, p: &Array1<f64>) -> bool {
    let mean: f64 = scores.iter().zip(p.iter()).map(|(s, w)| s * w).sum();
    scores.mapv_inplace(|v| v - mean);
    let norm = weighted_norm(scores, p);
    if norm < 1e-15 {
        return false;
    }
    scores.mapv_inplace(|v| v / norm);
    true
}

fn weighted_norm(scores: &Array1<f64>, p: &Array1<f64>) -> f64 {
    scores
        .iter()
        .zip(p.iter())
        .map(|(s, w)| w * s * s)
        .sum::<f64>()
        .sqrt()
}
