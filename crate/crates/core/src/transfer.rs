//! Few-shot transfer on a frozen encoder.
//!
//! Protocol: embed the dataset with a trained encoder, draw a small
//! uniform training split, fit a classifier on those embeddings, and
//! score the held-out rows on accuracy plus a fairness measure of the
//! predictions. The encoder is never updated, and the classifier sees
//! embeddings only, never raw features or the sensitive attribute.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autoencoder::gather_rows;
use crate::data::{split_fewshot, Dataset, FewshotSplit, SensitiveMode};
use crate::error::{Error, Result};
use crate::fairness::{Predictor, PredictorMode, SensitiveBatch};
use crate::metrics::{self, column_matrix, one_hot, RhoStarConfig};
use crate::nn::{AdamState, Mlp};
use crate::trainer::PREDICTOR_HIDDEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Labeled examples handed to the classifier.
    pub n_train: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            n_train: 128,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Downstream scores for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub accuracy: f64,
    /// Demographic-parity gap of the predictions. Discrete mode only.
    pub gdp: Option<f64>,
    /// Maximal correlation between one-hot predictions and the sensitive
    /// value. Continuous mode only.
    pub rho_star_yg: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Label classes the training split never saw.
    pub missing_train_classes: Vec<usize>,
}

impl TransferResult {
    /// Flat `name=value` listing matching the metrics report style:
    /// rates as percentages with one decimal, counts verbatim.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy={:.1}\n", self.accuracy * 100.0));
        if let Some(g) = self.gdp {
            out.push_str(&format!("gdp={:.1}\n", g * 100.0));
        }
        if let Some(r) = self.rho_star_yg {
            out.push_str(&format!("rho_star_yg={:.1}\n", r * 100.0));
        }
        out.push_str(&format!("n_train={}\n", self.n_train));
        out.push_str(&format!("n_test={}\n", self.n_test));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Trains a classifier on frozen-encoder representations of `x_train`.
/// The classifier mirrors the sensitive-attribute predictor's shape:
/// one hidden layer of [`PREDICTOR_HIDDEN`] units, softmax output over
/// `n_classes`, full-batch Adam on cross-entropy.
pub fn train_fewshot(
    encoder: &Mlp,
    x_train: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &TransferConfig,
) -> Result<Predictor> {
    if labels.len() != x_train.nrows() {
        return Err(Error::invalid(format!(
            "row counts disagree: x has {}, labels {}",
            x_train.nrows(),
            labels.len()
        )));
    }
    if x_train.nrows() == 0 {
        return Err(Error::invalid("empty training split"));
    }
    if n_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!(
            "label {l} outside 0..{n_classes}"
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("transfer epochs must be at least 1"));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::config(format!("bad transfer lr {}", cfg.lr)));
    }

    let z = encoder.forward(x_train).output().clone();
    let mode = PredictorMode::Discrete { n_groups: n_classes };
    let mut clf = Predictor::new(z.ncols(), &[PREDICTOR_HIDDEN], mode, cfg.seed)?;
    let mut state = AdamState::new(&clf.net);
    let batch = SensitiveBatch::Discrete {
        groups: labels.to_vec(),
        n_groups: n_classes,
    };
    for _ in 0..cfg.epochs {
        clf.train_step(&z, &batch, &mut state, cfg.lr)?;
    }
    Ok(clf)
}

/// Hard class predictions for `x` under the frozen encoder.
pub fn predict(classifier: &Predictor, encoder: &Mlp, x: &Array2<f64>) -> Result<Vec<usize>> {
    if !matches!(classifier.mode, PredictorMode::Discrete { .. }) {
        return Err(Error::invalid("transfer classifier must be discrete"));
    }
    let z = encoder.forward(x).output().clone();
    let probs = classifier.net.output(&z);
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Scores the classifier on the split's test rows: accuracy against the
/// dataset labels and a fairness measure matched to the sensitive mode.
pub fn eval_transfer(
    classifier: &Predictor,
    encoder: &Mlp,
    ds: &Dataset,
    split: &FewshotSplit,
    seed: u64,
) -> Result<TransferResult> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("transfer needs a labeled dataset"))?;
    if split.test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    if let Some(&i) = split.test.iter().chain(split.train.iter()).find(|&&i| i >= ds.n()) {
        return Err(Error::invalid(format!(
            "split index {i} outside dataset of {}",
            ds.n()
        )));
    }

    let x_test = gather_rows(&ds.x, &split.test);
    let yhat = predict(classifier, encoder, &x_test)?;
    let hits = split
        .test
        .iter()
        .zip(&yhat)
        .filter(|(&i, &p)| labels[i] == p)
        .count();
    let accuracy = hits as f64 / yhat.len() as f64;

    let n_classes = match classifier.mode {
        PredictorMode::Discrete { n_groups } => n_groups,
        PredictorMode::Continuous => unreachable!("predict already rejected this"),
    };
    let (gdp, rho_star_yg) = match ds.sensitive.batch(&split.test) {
        SensitiveBatch::Discrete { groups, .. } => (Some(metrics::gdp(&yhat, &groups)?), None),
        SensitiveBatch::Continuous { values } => {
            let rho = metrics::rho_star_neural(
                &one_hot(&yhat, n_classes),
                &column_matrix(&values),
                seed,
                &RhoStarConfig::default(),
            )?;
            (None, Some(rho))
        }
    };

    Ok(TransferResult {
        accuracy,
        gdp,
        rho_star_yg,
        n_train: split.train.len(),
        n_test: split.test.len(),
        missing_train_classes: split.missing_train_classes.clone(),
    })
}

/// End-to-end few-shot run: split, train on the frozen encoder, verify
/// the freeze by parameter digest, then score the held-out rows.
pub fn run_transfer(encoder: &Mlp, ds: &Dataset, cfg: &TransferConfig) -> Result<TransferResult> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("transfer needs a labeled dataset"))?;
    let n_classes = ds
        .n_classes()
        .ok_or_else(|| Error::invalid("transfer needs a labeled dataset"))?;
    if ds.sensitive.mode() == SensitiveMode::Continuous && ds.n() < cfg.n_train + 30 {
        return Err(Error::invalid(format!(
            "continuous fairness scoring needs at least 30 test rows, dataset has {} for {} training",
            ds.n(),
            cfg.n_train
        )));
    }

    let split = split_fewshot(ds, cfg.n_train, cfg.seed)?;
    let x_train = gather_rows(&ds.x, &split.train);
    let y_train: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();

    let digest = encoder.params_digest();
    let clf = train_fewshot(encoder, &x_train, &y_train, n_classes, cfg)?;
    assert_eq!(
        digest,
        encoder.params_digest(),
        "encoder changed during transfer"
    );
    eval_transfer(&clf, encoder, ds, &split, cfg.seed)
}
