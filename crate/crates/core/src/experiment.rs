//! Run plumbing shared by the command-line tool and integration tests:
//! ablation variants, standardized training, checkpoint evaluation, and
//! the transfer harness on a stored encoder.

use serde::{Deserialize, Serialize};

use crate::cluster::nearest_assign;
use crate::data::{Dataset, Sensitive, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::{self, column_matrix, one_hot, MetricsReport, RhoStarConfig};
use crate::trainer::{self, Checkpoint, TrainConfig, TrainOutcome, TrainReport, WarmupLoss};
use crate::transfer::{run_transfer, TransferConfig, TransferResult};

/// Which loss terms a run keeps. Each ablation removes one term from
/// the objective; `Plain` strips both and leaves a bare autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// alpha forced to 0. Warm-up falls back to reconstruction since
    /// there is no clustering term left to warm up.
    NoCluster,
    /// beta forced to 0: the run never builds a sensitive predictor.
    NoFairness,
    Plain,
}

impl Variant {
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoCluster => {
                cfg.alpha = 0.0;
                cfg.warmup_loss = WarmupLoss::ReconstructionOnly;
            }
            Variant::NoFairness => {
                cfg.beta = 0.0;
            }
            Variant::Plain => {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
                cfg.warmup_loss = WarmupLoss::ReconstructionOnly;
            }
        }
        cfg
    }
}

/// A finished training run plus the feature scaling it was given.
#[derive(Debug)]
pub struct TrainedRun {
    pub outcome: TrainOutcome,
    pub standardizer: Option<Standardizer>,
}

fn prepared(raw: &Dataset, standardize: bool) -> Result<(Dataset, Option<Standardizer>)> {
    if !standardize {
        return Ok((raw.clone(), None));
    }
    let s = Standardizer::fit(&raw.x);
    let mut ds = raw.clone();
    ds.x = s.transform(&raw.x)?;
    Ok((ds, Some(s)))
}

/// Trains `variant` of `base` on the dataset, standardizing features
/// first when asked (the trained checkpoint then carries the scaler so
/// evaluation reproduces the same inputs).
pub fn run_train(
    raw: &Dataset,
    base: &TrainConfig,
    variant: Variant,
    standardize: bool,
) -> Result<TrainedRun> {
    let config = variant.apply(base);
    let (ds, standardizer) = prepared(raw, standardize)?;
    let outcome = trainer::train(&ds, &config)?;
    Ok(TrainedRun {
        outcome,
        standardizer,
    })
}

/// Converts a finished run into a storable checkpoint, keeping the
/// per-epoch trace separately.
pub fn into_checkpoint(run: TrainedRun, raw: &Dataset) -> (Checkpoint, TrainReport) {
    let TrainedRun {
        outcome,
        standardizer,
    } = run;
    let cp = Checkpoint {
        config: outcome.config,
        autoencoder: outcome.autoencoder,
        predictor: outcome.predictor,
        centers: outcome.centers,
        standardizer,
        schema_digest: raw.schema_digest(),
        dataset_name: raw.name.clone(),
    };
    (cp, outcome.report)
}

fn check_digest(cp: &Checkpoint, raw: &Dataset) -> Result<()> {
    let have = raw.schema_digest();
    if cp.schema_digest != have {
        return Err(Error::invalid(format!(
            "checkpoint was trained on schema {} but the dataset has {}",
            cp.schema_digest, have
        )));
    }
    Ok(())
}

/// Embeds the dataset with a stored model, assigns each row to its
/// nearest stored center, and scores the clustering. Needs at least 30
/// rows for the correlation estimates.
pub fn evaluate_checkpoint(cp: &Checkpoint, raw: &Dataset, seed: u64) -> Result<MetricsReport> {
    check_digest(cp, raw)?;
    let x = match &cp.standardizer {
        Some(s) => s.transform(&raw.x)?,
        None => raw.x.clone(),
    };
    let z = cp.autoencoder.embed(&x);
    let clusters = nearest_assign(&z, &cp.centers);
    score_clustering(&z, &clusters, cp.config.k, raw, seed)
}

/// Metrics for an explicit clustering of embedded data. `k` is the
/// number of clusters the assignment draws from, counting empty ones.
pub fn score_clustering(
    z: &ndarray::Array2<f64>,
    clusters: &[usize],
    k: usize,
    raw: &Dataset,
    seed: u64,
) -> Result<MetricsReport> {
    let rho_cfg = RhoStarConfig::default();
    let mut rep = MetricsReport::default();
    if let Some(labels) = &raw.labels {
        rep.acc = Some(metrics::acc(clusters, labels)?);
        rep.nmi = Some(metrics::nmi(clusters, labels)?);
    }
    let c_hot = one_hot(clusters, k);
    match &raw.sensitive {
        Sensitive::Discrete { groups, n_groups } => {
            rep.bal = Some(metrics::balance(clusters, groups)?);
            // A single global group has no conditional entropy to
            // normalize by; the metric is reported absent.
            rep.mnce = metrics::mnce(clusters, groups).ok();
            if let (Some(nmi), Some(mnce)) = (rep.nmi, rep.mnce) {
                rep.f_m = Some(metrics::f_measure(nmi, mnce, 1.0));
            }
            rep.gdp = Some(metrics::gdp(clusters, groups)?);
            rep.mi_cg_plugin = Some(metrics::mi_plugin(clusters, groups)?);
            let g_hot = one_hot(groups, *n_groups);
            rep.rho_star_cg = Some(metrics::rho_star_neural(&c_hot, &g_hot, seed, &rho_cfg)?);
            rep.rho_star_zg = Some(metrics::rho_star_neural(z, &g_hot, seed + 1, &rho_cfg)?);
            rep.bound = Some(metrics::bound_report(z, groups, clusters, seed + 2)?);
        }
        Sensitive::Continuous { values } => {
            let g_col = column_matrix(values);
            rep.rho_star_cg = Some(metrics::rho_star_neural(&c_hot, &g_col, seed, &rho_cfg)?);
            rep.rho_star_zg = Some(metrics::rho_star_neural(z, &g_col, seed + 1, &rho_cfg)?);
        }
    }
    Ok(rep)
}

/// Few-shot transfer against a stored encoder. The dataset gets the
/// checkpoint's scaling first, so the encoder sees the distribution it
/// was trained on.
pub fn transfer_checkpoint(
    cp: &Checkpoint,
    raw: &Dataset,
    tcfg: &TransferConfig,
) -> Result<TransferResult> {
    check_digest(cp, raw)?;
    let mut ds = raw.clone();
    if let Some(s) = &cp.standardizer {
        ds.x = s.transform(&raw.x)?;
    }
    run_transfer(&cp.autoencoder.encoder, &ds, tcfg)
}
