//! The auxiliary predictor and the contrastive upper bound on the mutual
//! information between latent codes and the sensitive attribute.
//!
//! A predictor `q(G|Z)` is trained to model the sensitive attribute from
//! the latent code: a softmax head over group ids when the attribute is
//! discrete, a Gaussian head (mean and log-variance) when it is continuous.
//! With that predictor frozen, the batch estimate
//!
//! ```text
//! L_s = (1/B) sum_i [ log q(G_i|Z_i) - (1/B) sum_j log q(G_j|Z_i) ]
//! ```
//!
//! upper-bounds `I(Z;G)` when `q` is close to the true conditional. All
//! `B^2` pairs participate. Two properties are load-bearing and tested:
//! the bound collapses to exactly zero when the predictor ignores its
//! input, and its gradient reaches only the latent codes, never the
//! predictor parameters.
//!
//! Numerical guards: probabilities are floored at `1e-12` before any log;
//! the predicted log-variance is clamped to `[-10, 10]` (gradients vanish
//! outside, which is the point of a clamp).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, Mlp, MlpSpec};

pub const PROB_FLOOR: f64 = 1e-12;
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Sensitive attribute values for one batch, aligned with batch rows.
#[derive(Debug, Clone)]
pub enum SensitiveBatch {
    Discrete { groups: Vec<usize>, n_groups: usize },
    Continuous { values: Vec<f64> },
}

impl SensitiveBatch {
    pub fn len(&self) -> usize {
        match self {
            SensitiveBatch::Discrete { groups, .. } => groups.len(),
            SensitiveBatch::Continuous { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, batch: usize) -> Result<()> {
        if self.len() != batch {
            return Err(Error::invalid(format!(
                "sensitive batch has {} rows, latent batch has {batch}",
                self.len()
            )));
        }
        if let SensitiveBatch::Discrete { groups, n_groups } = self {
            if *n_groups < 2 {
                return Err(Error::invalid("need at least 2 groups"));
            }
            if let Some(&bad) = groups.iter().find(|&&g| g >= *n_groups) {
                return Err(Error::invalid(format!(
                    "group id {bad} out of range for {n_groups} groups"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorMode {
    Discrete { n_groups: usize },
    Continuous,
}

/// `q(G|Z)` as a small MLP. Discrete mode ends in a softmax over groups;
/// continuous mode ends in a linear layer producing `[mean, raw log-var]`.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub net: Mlp,
    pub mode: PredictorMode,
}

impl Predictor {
    pub fn new(latent_dim: usize, hidden: &[usize], mode: PredictorMode, seed: u64) -> Result<Predictor> {
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(hidden);
        let spec = match mode {
            PredictorMode::Discrete { n_groups } => {
                if n_groups < 2 {
                    return Err(Error::config("discrete predictor needs at least 2 groups"));
                }
                sizes.push(n_groups);
                MlpSpec::relu_softmax(sizes)?
            }
            PredictorMode::Continuous => {
                sizes.push(2);
                MlpSpec::relu_linear(sizes)?
            }
        };
        Ok(Predictor {
            net: Mlp::init(spec, seed),
            mode,
        })
    }

    pub fn from_net(net: Mlp, mode: PredictorMode) -> Result<Predictor> {
        let want = match mode {
            PredictorMode::Discrete { n_groups } => n_groups,
            PredictorMode::Continuous => 2,
        };
        if net.spec().output_dim() != want {
            return Err(Error::invalid(format!(
                "predictor output dim {} does not fit mode (want {want})",
                net.spec().output_dim()
            )));
        }
        Ok(Predictor { net, mode })
    }

    fn check_mode(&self, sensitive: &SensitiveBatch) -> Result<()> {
        match (self.mode, sensitive) {
            (PredictorMode::Discrete { n_groups }, SensitiveBatch::Discrete { n_groups: t, .. }) => {
                if n_groups != *t {
                    return Err(Error::invalid(format!(
                        "predictor has {n_groups} groups, batch has {t}"
                    )));
                }
                Ok(())
            }
            (PredictorMode::Continuous, SensitiveBatch::Continuous { .. }) => Ok(()),
            _ => Err(Error::invalid(
                "predictor mode does not match sensitive attribute mode",
            )),
        }
    }

    /// Negative log-likelihood training loss for the predictor itself:
    /// mean cross-entropy in discrete mode,
    /// `(1/B) sum_i [log var_i + (g_i - mean_i)^2 / var_i]` in continuous
    /// mode (additive constants dropped). Returns the loss and gradients
    /// with respect to the predictor parameters.
    pub fn nll_loss(&self, z: &Array2<f64>, sensitive: &SensitiveBatch) -> Result<(f64, Gradients)> {
        sensitive.check(z.nrows())?;
        self.check_mode(sensitive)?;
        let b = z.nrows();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let bf = b as f64;
        let fwd = self.net.forward(z);
        let out = fwd.output();

        match sensitive {
            SensitiveBatch::Discrete { groups, .. } => {
                let mut loss = 0.0;
                let mut upstream = Array2::zeros(out.dim());
                for (i, &g) in groups.iter().enumerate() {
                    let p = out[[i, g]];
                    loss -= p.max(PROB_FLOOR).ln() / bf;
                    if p > PROB_FLOOR {
                        upstream[[i, g]] = -1.0 / (bf * p);
                    }
                }
                Ok((loss, self.net.backward(&fwd, &upstream)))
            }
            SensitiveBatch::Continuous { values } => {
                let mut loss = 0.0;
                let mut upstream = Array2::zeros(out.dim());
                for (i, &g) in values.iter().enumerate() {
                    let mean = out[[i, 0]];
                    let raw = out[[i, 1]];
                    let s = raw.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    let var = s.exp();
                    let r = g - mean;
                    loss += (s + r * r / var) / bf;
                    upstream[[i, 0]] = -2.0 * r / (var * bf);
                    if raw.abs() < LOG_VAR_CLAMP {
                        upstream[[i, 1]] = (1.0 - r * r / var) / bf;
                    }
                }
                Ok((loss, self.net.backward(&fwd, &upstream)))
            }
        }
    }

    /// One Adam step on [`Predictor::nll_loss`]; returns the pre-step loss.
    pub fn train_step(
        &mut self,
        z: &Array2<f64>,
        sensitive: &SensitiveBatch,
        state: &mut AdamState,
        lr: f64,
    ) -> Result<f64> {
        let (loss, grads) = self.nll_loss(z, sensitive)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("predictor loss {loss}")));
        }
        adam_step(&mut self.net, &grads, state, lr);
        Ok(loss)
    }

    /// `log q(g | z_i)` for every batch row `i` against every batch value
    /// `g_j`: entry `(i, j)` of the returned matrix. Shared by the bound's
    /// positive (diagonal) and contrastive (off-diagonal) terms so the
    /// dropped Gaussian constants cancel by construction.
    pub fn log_q_matrix(&self, z: &Array2<f64>, sensitive: &SensitiveBatch) -> Result<Array2<f64>> {
        sensitive.check(z.nrows())?;
        self.check_mode(sensitive)?;
        let out = self.net.output(z);
        Ok(self.log_q_from_outputs(&out, sensitive))
    }

    fn log_q_from_outputs(&self, out: &Array2<f64>, sensitive: &SensitiveBatch) -> Array2<f64> {
        let b = out.nrows();
        let mut lq = Array2::zeros((b, b));
        match sensitive {
            SensitiveBatch::Discrete { groups, .. } => {
                for i in 0..b {
                    for (j, &g) in groups.iter().enumerate() {
                        lq[[i, j]] = out[[i, g]].max(PROB_FLOOR).ln();
                    }
                }
            }
            SensitiveBatch::Continuous { values } => {
                for i in 0..b {
                    let mean = out[[i, 0]];
                    let s = out[[i, 1]].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    let var = s.exp();
                    for (j, &g) in values.iter().enumerate() {
                        let r = g - mean;
                        lq[[i, j]] = -(s + r * r / var);
                    }
                }
            }
        }
        lq
    }

    /// The contrastive bound over one batch, with its gradient with respect
    /// to the latent codes. The predictor is frozen: no parameter gradients
    /// exist on this path. Needs `B >= 2` (a single row has no contrastive
    /// pairs).
    pub fn club_loss(&self, z: &Array2<f64>, sensitive: &SensitiveBatch) -> Result<(f64, Array2<f64>)> {
        sensitive.check(z.nrows())?;
        self.check_mode(sensitive)?;
        let b = z.nrows();
        if b < 2 {
            return Err(Error::invalid("contrastive bound needs a batch of at least 2"));
        }
        let bf = b as f64;
        let fwd = self.net.forward(z);
        let out = fwd.output();

        // Value: (1/B) sum_i [A_ii - mean_j A_ij]. The per-row form keeps
        // the identical-rows case (a predictor constant in z) cancelling to
        // zero at machine precision instead of through two large sums.
        let lq = self.log_q_from_outputs(out, sensitive);
        let mut loss = 0.0;
        for i in 0..b {
            let row_mean = lq.row(i).sum() / bf;
            loss += (lq[[i, i]] - row_mean) / bf;
        }

        // Gradient via dL/d(out).
        let upstream = match sensitive {
            SensitiveBatch::Discrete { groups, n_groups } => {
                let mut counts = vec![0.0f64; *n_groups];
                for &g in groups {
                    counts[g] += 1.0;
                }
                let mut up = Array2::zeros(out.dim());
                for i in 0..b {
                    for t in 0..*n_groups {
                        // d L_s / d A_it = I(g_i = t)/B - n_t/B^2, chained
                        // through d ln(max(p, floor))/dp.
                        let coef = (if groups[i] == t { 1.0 / bf } else { 0.0 }) - counts[t] / (bf * bf);
                        let p = out[[i, t]];
                        if p > PROB_FLOOR {
                            up[[i, t]] = coef / p;
                        }
                    }
                }
                up
            }
            SensitiveBatch::Continuous { values } => {
                let mut up = Array2::zeros(out.dim());
                for i in 0..b {
                    let mean = out[[i, 0]];
                    let raw = out[[i, 1]];
                    let s = raw.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    let var = s.exp();
                    let clamped = raw.abs() >= LOG_VAR_CLAMP;
                    let mut dmean = 0.0;
                    let mut ds = 0.0;
                    for (j, &g) in values.iter().enumerate() {
                        let w = (if i == j { 1.0 / bf } else { 0.0 }) - 1.0 / (bf * bf);
                        let r = g - mean;
                        // A_ij = -(s + r^2/var): dA/dmean = 2r/var,
                        // dA/ds = -1 + r^2/var.
                        dmean += w * 2.0 * r / var;
                        if !clamped {
                            ds += w * (r * r / var - 1.0);
                        }
                    }
                    up[[i, 0]] = dmean;
                    up[[i, 1]] = ds;
                }
                up
            }
        };
        let grads = self.net.backward(&fwd, &upstream);
        Ok((loss, grads.input))
    }
}
