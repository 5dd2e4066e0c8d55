//! Fairness-constrained deep clustering.
//!
//! This crate trains a dense autoencoder jointly with k-means so that the
//! latent space keeps what is useful for clustering while shedding what it
//! knows about a protected attribute. The training objective combines three
//! terms:
//!
//! * a reconstruction loss that keeps the latent code informative about the
//!   input,
//! * a soft-assignment clustering loss that rewards confident, balanced
//!   cluster memberships, and
//! * an upper bound on the mutual information between the latent code and
//!   the sensitive attribute, estimated contrastively through an auxiliary
//!   predictor network.
//!
//! The sensitive attribute may be discrete (group ids) or continuous (a
//! scalar per sample); both share the same training loop and the same bound
//! construction, differing only in the auxiliary predictor head.
//!
//! # Layout
//!
//! * [`nn`] — dense networks in `f64`: init, forward, backward, Adam.
//! * [`autoencoder`] — encoder/decoder pairs, optionally one decoder per group.
//! * [`cluster`] — k-means and the temperature-scaled soft assignment head.
//! * [`fairness`] — auxiliary predictor and the contrastive MI upper bound.
//! * [`trainer`] — the alternating training loop, checkpoints, run reports.
//! * [`metrics`] — clustering and fairness metrics plus estimator oracles.
//! * [`data`] — CSV ingestion, standardization, synthetic benchmarks.
//! * [`transfer`] — frozen-encoder few-shot classification probes.
//! * [`experiment`] — config-driven orchestration shared by the CLI and tests.
//!
//! # Errors and panics
//!
//! Fallible operations (I/O, schema validation, shape checks at API
//! boundaries, non-finite training aborts) return [`Error`]. Internal shape
//! agreements between layers of the same network are asserted and panic on
//! violation: such a state is a bug, not an input condition.
//!
//! All floating-point work is `f64`. Every stochastic routine takes an
//! explicit seed and is deterministic for a given seed, input, and build.

pub mod autoencoder;
pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod transfer;

pub use autoencoder::{Autoencoder, DecoderMode};
pub use cluster::{
    hard_assign, kmeans_fit, nearest_assign, soft_assign, ClusterLoss, KmeansFit, SoftAssign,
};
pub use data::{Dataset, SchemaConfig, Sensitive, SensitiveMode, Standardizer};
pub use error::{Error, Result};
pub use experiment::{
    evaluate_checkpoint, into_checkpoint, run_train, transfer_checkpoint, TrainedRun, Variant,
};
pub use fairness::{Predictor, PredictorMode, SensitiveBatch};
pub use metrics::{BoundReport, MetricsReport};
pub use nn::{Activation, AdamState, Mlp, MlpSpec};
pub use trainer::{train, Checkpoint, TrainConfig, TrainOutcome, TrainReport, WarmupLoss};
pub use transfer::{eval_transfer, run_transfer, train_fewshot, TransferConfig, TransferResult};
