//! The training loop: per-epoch k-means refresh in latent space, a
//! cluster-only (or reconstruction-only) warm-up phase, then interleaved
//! predictor and autoencoder updates on the composite objective
//! L = L_r + alpha * L_c + beta * L_s.
//!
//! The predictor is updated on its own likelihood first and then held
//! fixed while the encoder step is computed; the freeze is structural
//! (the composite pass borrows it immutably). Everything is deterministic
//! for a fixed config seed: network init, batch shuffling, and the
//! per-epoch k-means restarts all derive from it.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{gather_rows, recon_loss_grad, Autoencoder, DecoderMode};
use crate::cluster::{cluster_objective, kmeans_fit_best};
use crate::data::{Dataset, Sensitive, SensitiveMode, Standardizer};
use crate::error::{Error, Result};
use crate::fairness::{Predictor, PredictorMode, SensitiveBatch};
use crate::nn::{adam_step, AdamState, Gradients, Mlp, MlpSpec};

pub const PREDICTOR_HIDDEN: usize = 16;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCIB";
pub const CHECKPOINT_VERSION: u32 = 1;

// Fixed offsets separating the seed streams of the run's RNG consumers.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const PREDICTOR_STREAM: u64 = 0x5052_4544;
const KMEANS_STREAM: u64 = 0x4b4d_4e53;
// Restarts per refit. The embedding reshapes every epoch, so a single
// k-means++ draw lands in a poor basin often enough to skew runs.
const KMEANS_TRIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupLoss {
    /// Sharpen soft assignments before the joint phase.
    ClusterOnly,
    /// Conventional autoencoder pretraining.
    ReconstructionOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k: usize,
    pub latent_dim: usize,
    /// Encoder hidden sizes; decoders mirror them.
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_loss: WarmupLoss,
    pub sensitive_mode: SensitiveMode,
    /// One decoder per group in discrete mode. Ignored (shared decoder)
    /// in continuous mode.
    pub per_group_decoders: bool,
    /// Variational predictor updates per minibatch. The contrastive bound
    /// only upper-bounds I(Z;G) while q stays close to the true
    /// conditional; a single update per batch lets q lag the moving
    /// encoder until the bound turns negative and the L_s gradient points
    /// the wrong way.
    pub predictor_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            latent_dim: 10,
            hidden: vec![64],
            alpha: 0.04,
            beta: 0.18,
            tau: 0.1,
            lr: 1e-4,
            epochs: 300,
            warmup_epochs: 20,
            batch_size: 256,
            seed: 0,
            warmup_loss: WarmupLoss::ClusterOnly,
            sensitive_mode: SensitiveMode::Discrete,
            per_group_decoders: true,
            predictor_steps: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k must be at least 2"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("alpha and beta must be nonnegative"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.predictor_steps == 0 {
            return Err(Error::config("predictor_steps must be at least 1"));
        }
        if ds.n() < self.k {
            return Err(Error::invalid(format!(
                "{} samples cannot form {} clusters",
                ds.n(),
                self.k
            )));
        }
        if self.sensitive_mode != ds.sensitive.mode() {
            return Err(Error::config(
                "config sensitive_mode disagrees with the dataset's attribute type",
            ));
        }
        Ok(())
    }

    fn decoder_mode(&self, ds: &Dataset) -> DecoderMode {
        match (&ds.sensitive, self.per_group_decoders) {
            (Sensitive::Discrete { n_groups, .. }, true) => DecoderMode::PerGroup(*n_groups),
            _ => DecoderMode::Shared,
        }
    }

    fn predictor_mode(&self, ds: &Dataset) -> PredictorMode {
        match &ds.sensitive {
            Sensitive::Discrete { n_groups, .. } => PredictorMode::Discrete {
                n_groups: *n_groups,
            },
            Sensitive::Continuous { .. } => PredictorMode::Continuous,
        }
    }
}

/// Loss components and cluster churn for one epoch. Values not evaluated
/// in a phase (L_s during warm-up, the predictor likelihood when beta = 0)
/// are recorded as 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_r: f64,
    pub l_c: f64,
    pub l_s: f64,
    /// Predictor negative log-likelihood (cross-entropy or Gaussian).
    pub l_pred: f64,
    /// l_r + alpha * l_c + beta * l_s at the epoch's parameters.
    pub total: f64,
    /// Fraction of samples whose hard assignment moved since the previous
    /// epoch, after best-matching the (arbitrary) cluster ids. 1.0 for the
    /// first epoch.
    pub churn: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

/// Everything `train` produces: the models, the final latent clustering,
/// and the per-epoch trace.
#[derive(Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub autoencoder: Autoencoder,
    pub predictor: Option<Predictor>,
    /// Final k-means centers in latent space.
    pub centers: Array2<f64>,
    /// Hard assignments of the training data to `centers`.
    pub assignments: Vec<usize>,
    pub report: TrainReport,
}

/// Adam state for the autoencoder's networks.
#[derive(Debug)]
pub struct Optimizers {
    pub encoder: AdamState,
    pub decoders: Vec<AdamState>,
}

impl Optimizers {
    pub fn new(ae: &Autoencoder) -> Optimizers {
        Optimizers {
            encoder: AdamState::new(&ae.encoder),
            decoders: ae.decoders.iter().map(AdamState::new).collect(),
        }
    }
}

fn routing<'a>(ae: &Autoencoder, sensitive: &'a SensitiveBatch) -> Result<Option<&'a [usize]>> {
    match ae.mode() {
        DecoderMode::Shared => Ok(None),
        DecoderMode::PerGroup(_) => match sensitive {
            SensitiveBatch::Discrete { groups, .. } => Ok(Some(groups)),
            SensitiveBatch::Continuous { .. } => Err(Error::invalid(
                "per-group decoders need discrete groups",
            )),
        },
    }
}

/// The composite objective on one batch with the predictor held fixed,
/// plus the gradients needed to step the autoencoder.
#[derive(Debug)]
pub struct CompositeLoss {
    pub total: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub encoder_grads: Gradients,
    pub decoder_grads: Vec<Option<Gradients>>,
}

/// total = L_r + alpha * L_c + beta * L_s. The L_s term is skipped
/// entirely when beta = 0; otherwise a predictor is required and only the
/// latent gradient flows from it (psi is borrowed immutably).
pub fn composite_loss(
    ae: &Autoencoder,
    predictor: Option<&Predictor>,
    centers: &Array2<f64>,
    x: &Array2<f64>,
    sensitive: &SensitiveBatch,
    config: &TrainConfig,
) -> Result<CompositeLoss> {
    let fwd_enc = ae.encode(x);
    let z = fwd_enc.output();

    let pass = ae.decode(z, routing(ae, sensitive)?)?;
    let (l_r, dxhat) = recon_loss_grad(x, &pass.xhat);
    let (decoder_grads, dz_recon) = ae.decode_backward(&pass, &dxhat);

    let cl = cluster_objective(z, centers, config.tau);

    let (l_s, dz_club) = if config.beta > 0.0 {
        let predictor = predictor.ok_or_else(|| {
            Error::invalid("beta > 0 requires a trained predictor for the L_s term")
        })?;
        predictor.club_loss(z, sensitive)?
    } else {
        (0.0, Array2::zeros(z.raw_dim()))
    };

    let mut dz = dz_recon;
    dz.scaled_add(config.alpha, &cl.grad_z);
    dz.scaled_add(config.beta, &dz_club);
    let encoder_grads = ae.encoder.backward(&fwd_enc, &dz);

    let total = l_r + config.alpha * cl.loss + config.beta * l_s;
    if !total.is_finite() || !encoder_grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "composite loss {total} (l_r {l_r}, l_c {}, l_s {l_s})",
            cl.loss
        )));
    }

    Ok(CompositeLoss {
        total,
        l_r,
        l_c: cl.loss,
        l_s,
        encoder_grads,
        decoder_grads,
    })
}

/// Components observed during one warm-up step (both are evaluated for
/// the record even though only one drives the update).
#[derive(Debug, Clone, Copy)]
pub struct WarmupOutcome {
    /// The value of the loss that was stepped.
    pub loss: f64,
    pub l_r: f64,
    pub l_c: f64,
}

/// One optimizer step on the configured warm-up loss. Cluster-only steps
/// touch the encoder alone; reconstruction-only steps touch encoder and
/// decoders. Neither evaluates L_s or the predictor.
pub fn warmup_step(
    ae: &mut Autoencoder,
    opt: &mut Optimizers,
    centers: &Array2<f64>,
    x: &Array2<f64>,
    sensitive: &SensitiveBatch,
    config: &TrainConfig,
) -> Result<WarmupOutcome> {
    let fwd_enc = ae.encode(x);
    let z = fwd_enc.output();
    let pass = ae.decode(z, routing(ae, sensitive)?)?;
    let (l_r, dxhat) = recon_loss_grad(x, &pass.xhat);
    let cl = cluster_objective(z, centers, config.tau);
    if !l_r.is_finite() || !cl.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "warm-up losses l_r {l_r}, l_c {}",
            cl.loss
        )));
    }

    let loss = match config.warmup_loss {
        WarmupLoss::ClusterOnly => {
            let grads = ae.encoder.backward(&fwd_enc, &cl.grad_z);
            adam_step(&mut ae.encoder, &grads, &mut opt.encoder, config.lr);
            cl.loss
        }
        WarmupLoss::ReconstructionOnly => {
            let (dec_grads, dz) = ae.decode_backward(&pass, &dxhat);
            let grads = ae.encoder.backward(&fwd_enc, &dz);
            adam_step(&mut ae.encoder, &grads, &mut opt.encoder, config.lr);
            for (i, g) in dec_grads.iter().enumerate() {
                if let Some(g) = g {
                    adam_step(&mut ae.decoders[i], g, &mut opt.decoders[i], config.lr);
                }
            }
            l_r
        }
    };
    Ok(WarmupOutcome {
        loss,
        l_r,
        l_c: cl.loss,
    })
}

fn kmeans_seed(seed: u64, epoch: usize) -> u64 {
    (seed ^ KMEANS_STREAM).wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(epoch as u64 + 1))
}

/// Best-match disagreement between two hard clusterings; invariant to
/// cluster id permutations.
fn assignment_churn(prev: &[usize], cur: &[usize]) -> Result<f64> {
    Ok(1.0 - crate::metrics::acc(prev, cur)?)
}

pub fn train(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(ds)?;
    let n = ds.n();

    let mut ae = Autoencoder::new(
        ds.dim(),
        &config.hidden,
        config.latent_dim,
        config.decoder_mode(ds),
        config.seed,
    )?;
    let mut opt = Optimizers::new(&ae);
    // beta = 0 runs never evaluate L_s, so no predictor is built at all.
    let mut predictor = if config.beta > 0.0 {
        Some(Predictor::new(
            config.latent_dim,
            &[PREDICTOR_HIDDEN],
            config.predictor_mode(ds),
            config.seed ^ PREDICTOR_STREAM,
        )?)
    } else {
        None
    };
    let mut pred_opt = predictor.as_ref().map(|p| AdamState::new(&p.net));

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut prev_assignments: Option<Vec<usize>> = None;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let z_all = ae.embed(&ds.x);
        let fit = kmeans_fit_best(&z_all, config.k, kmeans_seed(config.seed, epoch), KMEANS_TRIES)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => Error::invalid(format!("epoch {epoch} k-means: {other}")),
            })?;
        let churn = match &prev_assignments {
            Some(prev) => assignment_churn(prev, &fit.assignments)?,
            None => 1.0,
        };
        prev_assignments = Some(fit.assignments);

        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut shuffle_rng);

        let warm = epoch < config.warmup_epochs;
        let mut sums = (0.0, 0.0, 0.0, 0.0); // l_r, l_c, l_s, l_pred
        let mut seen = 0_usize;
        for (batch_no, chunk) in idx.chunks(config.batch_size).enumerate() {
            // The pairwise L_s term needs at least a pair; a trailing
            // singleton batch is dropped.
            if chunk.len() < 2 {
                continue;
            }
            let xb = gather_rows(&ds.x, chunk);
            let sb = ds.sensitive.batch(chunk);
            let located = |e: Error| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch} batch {batch_no}: {msg}"))
                }
                other => other,
            };

            let w = chunk.len() as f64;
            if warm {
                let out =
                    warmup_step(&mut ae, &mut opt, &fit.centers, &xb, &sb, config).map_err(located)?;
                sums.0 += out.l_r * w;
                sums.1 += out.l_c * w;
            } else {
                if let Some(pred) = predictor.as_mut() {
                    let zb = ae.embed(&xb);
                    // Re-fit q to the current encoder before the
                    // adversarial step reads it; the recorded likelihood is
                    // the last pre-step value, the tightest of the inner
                    // loop.
                    let mut lp = 0.0;
                    for _ in 0..config.predictor_steps {
                        lp = pred
                            .train_step(&zb, &sb, pred_opt.as_mut().expect("state exists"), config.lr)
                            .map_err(located)?;
                    }
                    sums.3 += lp * w;
                }
                let cl = composite_loss(&ae, predictor.as_ref(), &fit.centers, &xb, &sb, config)
                    .map_err(located)?;
                adam_step(&mut ae.encoder, &cl.encoder_grads, &mut opt.encoder, config.lr);
                for (i, g) in cl.decoder_grads.iter().enumerate() {
                    if let Some(g) = g {
                        adam_step(&mut ae.decoders[i], g, &mut opt.decoders[i], config.lr);
                    }
                }
                sums.0 += cl.l_r * w;
                sums.1 += cl.l_c * w;
                sums.2 += cl.l_s * w;
            }
            seen += chunk.len();
        }

        let denom = seen as f64;
        let (l_r, l_c, l_s, l_pred) = (
            sums.0 / denom,
            sums.1 / denom,
            sums.2 / denom,
            sums.3 / denom,
        );
        let record = EpochRecord {
            epoch,
            l_r,
            l_c,
            l_s,
            l_pred,
            total: l_r + config.alpha * l_c + config.beta * l_s,
            churn,
        };
        if !(record.total.is_finite() && record.l_pred.is_finite() && record.churn.is_finite()) {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} produced a non-finite record: {record:?}"
            )));
        }
        log::debug!(
            "epoch {epoch}: l_r {l_r:.4} l_c {l_c:.4} l_s {l_s:.4} churn {churn:.3}"
        );
        records.push(record);
    }

    // Final clustering against the trained encoder.
    let z_all = ae.embed(&ds.x);
    let fit = kmeans_fit_best(&z_all, config.k, kmeans_seed(config.seed, config.epochs), KMEANS_TRIES)?;

    Ok(TrainOutcome {
        config: config.clone(),
        autoencoder: ae,
        predictor,
        centers: fit.centers,
        assignments: fit.assignments,
        report: TrainReport { records },
    })
}

/// Serializable model bundle: the trained networks plus everything needed
/// to embed and assign new data the same way (centers, input transform,
/// schema fingerprint).
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub autoencoder: Autoencoder,
    pub predictor: Option<Predictor>,
    pub centers: Array2<f64>,
    pub standardizer: Option<Standardizer>,
    pub schema_digest: String,
    pub dataset_name: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    encoder_spec: MlpSpec,
    decoder_specs: Vec<MlpSpec>,
    predictor_spec: Option<MlpSpec>,
    n_groups: Option<usize>,
    centers: Vec<Vec<f64>>,
    standardizer: Option<Standardizer>,
    schema_digest: String,
    dataset_name: String,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_net(buf: &mut Vec<u8>, net: &Mlp) {
    push_u32(buf, net.layers.len() as u32);
    for layer in &net.layers {
        push_u32(buf, layer.w.ncols() as u32);
        push_u32(buf, layer.w.nrows() as u32);
        for &v in layer.w.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let n_groups = match cp.predictor.as_ref().map(|p| p.mode) {
        Some(PredictorMode::Discrete { n_groups }) => Some(n_groups),
        _ => match cp.autoencoder.mode() {
            DecoderMode::PerGroup(t) => Some(t),
            DecoderMode::Shared => None,
        },
    };
    let meta = CheckpointMeta {
        config: cp.config.clone(),
        encoder_spec: cp.autoencoder.encoder.spec().clone(),
        decoder_specs: cp
            .autoencoder
            .decoders
            .iter()
            .map(|d| d.spec().clone())
            .collect(),
        predictor_spec: cp.predictor.as_ref().map(|p| p.net.spec().clone()),
        n_groups,
        centers: cp.centers.rows().into_iter().map(|r| r.to_vec()).collect(),
        standardizer: cp.standardizer.clone(),
        schema_digest: cp.schema_digest.clone(),
        dataset_name: cp.dataset_name.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, meta_bytes.len() as u32);
    buf.extend_from_slice(&meta_bytes);

    let n_networks = 1 + cp.autoencoder.decoders.len() + usize::from(cp.predictor.is_some());
    push_u32(&mut buf, n_networks as u32);
    push_net(&mut buf, &cp.autoencoder.encoder);
    for d in &cp.autoencoder.decoders {
        push_net(&mut buf, d);
    }
    if let Some(p) = &cp.predictor {
        push_net(&mut buf, &p.net);
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(format!(
                "truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("slice length 4")))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(count * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("slice length 8")))
            .collect())
    }
}

fn read_net(cur: &mut Cursor, spec: &MlpSpec) -> Result<Mlp> {
    let n_layers = cur.u32("layer count")? as usize;
    if n_layers != spec.n_layers() {
        return Err(Error::checkpoint(format!(
            "network has {n_layers} layers, spec expects {}",
            spec.n_layers()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let in_dim = cur.u32("layer input dim")? as usize;
        let out_dim = cur.u32("layer output dim")? as usize;
        if in_dim != spec.sizes[l] || out_dim != spec.sizes[l + 1] {
            return Err(Error::checkpoint(format!(
                "layer {l} is {in_dim}x{out_dim}, spec expects {}x{}",
                spec.sizes[l],
                spec.sizes[l + 1]
            )));
        }
        let w = Array2::from_shape_vec(
            (out_dim, in_dim),
            cur.f64s(out_dim * in_dim, "weights")?,
        )
        .expect("shape matches count");
        let b = ndarray::Array1::from_vec(cur.f64s(out_dim, "biases")?);
        layers.push(crate::nn::Layer {
            w,
            b,
            activation: spec.activations[l],
        });
    }
    Mlp::from_layers(spec.clone(), layers)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("bad magic bytes"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32("meta length")? as usize;
    let meta_bytes = cur.take(meta_len, "meta blob")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::checkpoint(format!("meta blob: {e}")))?;

    let n_networks = cur.u32("network count")? as usize;
    let expected = 1 + meta.decoder_specs.len() + usize::from(meta.predictor_spec.is_some());
    if n_networks != expected {
        return Err(Error::checkpoint(format!(
            "{n_networks} networks stored, meta describes {expected}"
        )));
    }

    let encoder = read_net(&mut cur, &meta.encoder_spec)?;
    let mut decoders = Vec::with_capacity(meta.decoder_specs.len());
    for spec in &meta.decoder_specs {
        decoders.push(read_net(&mut cur, spec)?);
    }
    let predictor = match &meta.predictor_spec {
        Some(spec) => {
            let net = read_net(&mut cur, spec)?;
            let mode = match meta.config.sensitive_mode {
                SensitiveMode::Discrete => PredictorMode::Discrete {
                    n_groups: meta.n_groups.ok_or_else(|| {
                        Error::checkpoint("discrete predictor stored without a group count")
                    })?,
                },
                SensitiveMode::Continuous => PredictorMode::Continuous,
            };
            Some(Predictor::from_net(net, mode)?)
        }
        None => None,
    };
    if cur.pos != bytes.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after the last network",
            bytes.len() - cur.pos
        )));
    }

    let mode = if decoders.len() > 1 {
        DecoderMode::PerGroup(decoders.len())
    } else {
        DecoderMode::Shared
    };
    let autoencoder = Autoencoder::from_parts(encoder, decoders, mode)?;

    let k = meta.centers.len();
    if k == 0 {
        return Err(Error::checkpoint("no cluster centers stored"));
    }
    let dz = meta.centers[0].len();
    if meta.centers.iter().any(|c| c.len() != dz) || dz != autoencoder.latent_dim() {
        return Err(Error::checkpoint("center dimensions disagree with the encoder"));
    }
    let centers = Array2::from_shape_fn((k, dz), |(i, j)| meta.centers[i][j]);

    Ok(Checkpoint {
        config: meta.config,
        autoencoder,
        predictor,
        centers,
        standardizer: meta.standardizer,
        schema_digest: meta.schema_digest,
        dataset_name: meta.dataset_name,
    })
}

/// Writes embeddings with their cluster and sensitive value:
/// `id,z_0,...,z_{dz-1},cluster,sensitive`.
pub fn write_embeddings(
    path: &Path,
    z: &Array2<f64>,
    clusters: &[usize],
    sensitive: &Sensitive,
) -> Result<()> {
    if clusters.len() != z.nrows() || sensitive.len() != z.nrows() {
        return Err(Error::invalid(format!(
            "row counts disagree: z {}, clusters {}, sensitive {}",
            z.nrows(),
            clusters.len(),
            sensitive.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..z.ncols()).map(|j| format!("z_{j}")));
    header.push("cluster".to_string());
    header.push("sensitive".to_string());
    writer.write_record(&header)?;
    for i in 0..z.nrows() {
        let mut row = vec![i.to_string()];
        row.extend((0..z.ncols()).map(|j| format!("{}", z[[i, j]])));
        row.push(clusters[i].to_string());
        row.push(match sensitive {
            Sensitive::Discrete { groups, .. } => groups[i].to_string(),
            Sensitive::Continuous { values } => format!("{}", values[i]),
        });
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};
    use crate::nn::Activation;
    use ndarray::array;

    fn tiny_dataset(mode: SensitiveMode, seed: u64) -> Dataset {
        synth_blobs(&SynthConfig {
            n_per_cluster: 30,
            k: 2,
            d: 4,
            bias: 0.6,
            mode,
            seed,
        })
        .unwrap()
    }

    fn tiny_config(mode: SensitiveMode) -> TrainConfig {
        TrainConfig {
            k: 2,
            latent_dim: 3,
            hidden: vec![8],
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            sensitive_mode: mode,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn params_digest(net: &Mlp) -> String {
        net.params_digest()
    }

    #[test]
    fn composite_reduces_to_reconstruction_when_unweighted() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 1);
        let config = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let ae = Autoencoder::new(4, &[8], 3, DecoderMode::Shared, 5).unwrap();
        let centers = Array2::zeros((2, 3));
        let sb = ds.sensitive.batch(&[0, 1, 2]);
        let xb = gather_rows(&ds.x, &[0, 1, 2]);
        let out = composite_loss(&ae, None, &centers, &xb, &sb, &config).unwrap();
        assert_eq!(out.total, out.l_r);
        assert_eq!(out.l_s, 0.0);
    }

    #[test]
    fn composite_matches_scalar_oracle_with_constant_predictor() {
        // B=2, d=1, latent 1, K=2, identity-ish hand weights. A predictor
        // with zero weights is constant in z, so L_s cancels to machine
        // precision and total = L_r + alpha * L_c, each recomputed here
        // with plain scalar arithmetic.
        let enc = Mlp::from_layers(
            MlpSpec::new(vec![1, 1], vec![Activation::Linear]).unwrap(),
            vec![crate::nn::Layer {
                w: array![[2.0]],
                b: ndarray::arr1(&[0.5]),
                activation: Activation::Linear,
            }],
        )
        .unwrap();
        let dec = Mlp::from_layers(
            MlpSpec::new(vec![1, 1], vec![Activation::Linear]).unwrap(),
            vec![crate::nn::Layer {
                w: array![[1.0]],
                b: ndarray::arr1(&[-0.25]),
                activation: Activation::Linear,
            }],
        )
        .unwrap();
        let ae = Autoencoder::from_parts(enc, vec![dec], DecoderMode::Shared).unwrap();

        let mut predictor = Predictor::new(
            1,
            &[PREDICTOR_HIDDEN],
            PredictorMode::Discrete { n_groups: 2 },
            3,
        )
        .unwrap();
        for layer in &mut predictor.net.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }

        let x = array![[1.0], [-2.0]];
        let centers = array![[1.0], [-1.0]];
        let sb = SensitiveBatch::Discrete {
            groups: vec![0, 1],
            n_groups: 2,
        };
        let config = TrainConfig {
            alpha: 0.04,
            beta: 0.18,
            tau: 0.1,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let out = composite_loss(&ae, Some(&predictor), &centers, &x, &sb, &config).unwrap();

        // Scalars: z = 2x + 0.5 -> [2.5, -3.5]; xhat = z - 0.25.
        let z = [2.5_f64, -3.5];
        let xhat = [2.25_f64, -3.75];
        let l_r = ((xhat[0] - 1.0).powi(2) + (xhat[1] + 2.0).powi(2)) / 2.0;
        assert!((out.l_r - l_r).abs() < 1e-12);

        // 1-d cosine is the sign product; logits are signs / tau.
        let mut p = [[0.0_f64; 2]; 2];
        for (i, zi) in z.iter().enumerate() {
            let logits = [zi.signum() / 0.1, -zi.signum() / 0.1];
            let m = logits[0].max(logits[1]);
            let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
            let s = e[0] + e[1];
            p[i] = [e[0] / s, e[1] / s];
        }
        let pbar = [(p[0][0] + p[1][0]) / 2.0, (p[0][1] + p[1][1]) / 2.0];
        let mut l_c = 0.0;
        for k in 0..2 {
            if pbar[k] > 0.0 {
                l_c += pbar[k] * pbar[k].ln();
            }
            for row in &p {
                if row[k] > 0.0 {
                    l_c -= row[k] * row[k].ln() / 2.0;
                }
            }
        }
        assert!((out.l_c - l_c).abs() < 1e-12, "{} vs {l_c}", out.l_c);

        assert!(out.l_s.abs() < 1e-14);
        assert!((out.total - (l_r + 0.04 * l_c)).abs() < 1e-12);
        // beta > 0 with no predictor is a usage error.
        assert!(composite_loss(&ae, None, &centers, &x, &sb, &config).is_err());
    }

    #[test]
    fn cluster_warmup_leaves_decoders_untouched() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 2);
        let config = tiny_config(SensitiveMode::Discrete);
        let mut ae = Autoencoder::new(4, &[8], 3, DecoderMode::PerGroup(2), 7).unwrap();
        let mut opt = Optimizers::new(&ae);
        let before_dec: Vec<String> = ae.decoders.iter().map(params_digest).collect();
        let before_enc = params_digest(&ae.encoder);

        let centers = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let idx: Vec<usize> = (0..16).collect();
        let xb = gather_rows(&ds.x, &idx);
        let sb = ds.sensitive.batch(&idx);
        let out = warmup_step(&mut ae, &mut opt, &centers, &xb, &sb, &config).unwrap();

        assert_eq!(out.loss, out.l_c);
        let after_dec: Vec<String> = ae.decoders.iter().map(params_digest).collect();
        assert_eq!(before_dec, after_dec);
        assert_ne!(before_enc, params_digest(&ae.encoder));
    }

    #[test]
    fn reconstruction_warmup_ignores_cluster_gradient() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 2);
        let config = TrainConfig {
            warmup_loss: WarmupLoss::ReconstructionOnly,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let mut ae = Autoencoder::new(4, &[8], 3, DecoderMode::Shared, 7).unwrap();
        let mut opt = Optimizers::new(&ae);
        let idx: Vec<usize> = (0..16).collect();
        let xb = gather_rows(&ds.x, &idx);
        let sb = ds.sensitive.batch(&idx);

        // Absurd centers would dominate any step that used the cluster
        // term; the reconstruction step must be identical under both.
        let near = Array2::zeros((2, 3));
        let far = Array2::from_elem((2, 3), 1e6);
        let mut ae2 = ae.clone();
        let mut opt2 = Optimizers::new(&ae2);
        let a = warmup_step(&mut ae, &mut opt, &near, &xb, &sb, &config).unwrap();
        let b = warmup_step(&mut ae2, &mut opt2, &far, &xb, &sb, &config).unwrap();
        assert_eq!(a.loss, a.l_r);
        assert_eq!(a.l_r, b.l_r);
        assert_eq!(params_digest(&ae.encoder), params_digest(&ae2.encoder));
    }

    #[test]
    fn warmup_descends_its_loss_across_seeds() {
        let mut wins = 0;
        for seed in 0..20_u64 {
            let ds = tiny_dataset(SensitiveMode::Discrete, seed);
            let config = TrainConfig {
                lr: 1e-3,
                ..tiny_config(SensitiveMode::Discrete)
            };
            let mut ae = Autoencoder::new(4, &[8], 3, DecoderMode::Shared, seed).unwrap();
            let mut opt = Optimizers::new(&ae);
            let z = ae.embed(&ds.x);
            let centers = crate::cluster::kmeans_fit(&z, 2, seed).unwrap().centers;
            let idx: Vec<usize> = (0..32).collect();
            let xb = gather_rows(&ds.x, &idx);
            let sb = ds.sensitive.batch(&idx);
            let first = warmup_step(&mut ae, &mut opt, &centers, &xb, &sb, &config).unwrap();
            let again = warmup_step(&mut ae, &mut opt, &centers, &xb, &sb, &config).unwrap();
            if again.loss < first.loss {
                wins += 1;
            }
        }
        assert!(wins > 10, "descended in only {wins}/20 trials");
    }

    #[test]
    fn train_is_deterministic_and_well_formed() {
        for mode in [SensitiveMode::Discrete, SensitiveMode::Continuous] {
            let ds = tiny_dataset(mode, 3);
            let config = tiny_config(mode);
            let a = train(&ds, &config).unwrap();
            let b = train(&ds, &config).unwrap();
            assert_eq!(a.report, b.report);
            assert_eq!(
                params_digest(&a.autoencoder.encoder),
                params_digest(&b.autoencoder.encoder)
            );
            assert_eq!(a.assignments, b.assignments);

            assert_eq!(a.report.records.len(), config.epochs);
            for r in &a.report.records {
                assert!(r.total.is_finite() && r.churn.is_finite());
                assert!((0.0..=1.0).contains(&r.churn));
            }
            assert_eq!(a.report.records[0].churn, 1.0);
            // Warm-up epochs never touch L_s or the predictor.
            assert_eq!(a.report.records[0].l_s, 0.0);
            assert_eq!(a.report.records[0].l_pred, 0.0);
            // Joint epochs in a beta > 0 run do train the predictor.
            assert!(a.report.records.last().unwrap().l_pred != 0.0);
            assert_eq!(a.assignments.len(), ds.n());
        }
    }

    #[test]
    fn plain_autoencoder_training_descends_reconstruction() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 4);
        let config = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            epochs: 12,
            warmup_epochs: 0,
            lr: 3e-3,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let out = train(&ds, &config).unwrap();
        let first = out.report.records.first().unwrap().l_r;
        let last = out.report.records.last().unwrap().l_r;
        assert!(
            last < first,
            "reconstruction did not descend: {first} -> {last}"
        );
        // beta = 0 runs carry no predictor.
        assert!(out.predictor.is_none());
    }

    #[test]
    fn all_warmup_schedule_never_evaluates_fairness_term() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 5);
        let config = TrainConfig {
            epochs: 3,
            warmup_epochs: 3,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let out = train(&ds, &config).unwrap();
        for r in &out.report.records {
            assert_eq!(r.l_s, 0.0);
            assert_eq!(r.l_pred, 0.0);
        }
        // The untouched predictor still matches its seeded init.
        let fresh = Predictor::new(
            config.latent_dim,
            &[PREDICTOR_HIDDEN],
            PredictorMode::Discrete { n_groups: 2 },
            config.seed ^ PREDICTOR_STREAM,
        )
        .unwrap();
        assert_eq!(
            params_digest(&out.predictor.unwrap().net),
            params_digest(&fresh.net)
        );
    }

    #[test]
    fn non_finite_data_aborts_with_location() {
        let mut ds = tiny_dataset(SensitiveMode::Discrete, 6);
        ds.x[[0, 0]] = 1e200;
        let config = TrainConfig {
            warmup_epochs: 0,
            ..tiny_config(SensitiveMode::Discrete)
        };
        let err = train(&ds, &config).unwrap_err();
        match &err {
            Error::NonFinite(msg) => assert!(msg.contains("epoch 0"), "{msg}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ds = tiny_dataset(SensitiveMode::Discrete, 7);
        let base = tiny_config(SensitiveMode::Discrete);
        let cases = [
            TrainConfig { k: 1, ..base.clone() },
            TrainConfig { alpha: -0.1, ..base.clone() },
            TrainConfig { tau: 0.0, ..base.clone() },
            TrainConfig { batch_size: 1, ..base.clone() },
            TrainConfig { warmup_epochs: 99, ..base.clone() },
            TrainConfig { sensitive_mode: SensitiveMode::Continuous, ..base.clone() },
        ];
        for bad in cases {
            assert!(train(&ds, &bad).is_err());
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [SensitiveMode::Discrete, SensitiveMode::Continuous] {
            let ds = tiny_dataset(mode, 8);
            let config = tiny_config(mode);
            let out = train(&ds, &config).unwrap();
            let cp = Checkpoint {
                config: out.config,
                autoencoder: out.autoencoder,
                predictor: out.predictor,
                centers: out.centers,
                standardizer: Some(Standardizer::fit(&ds.x)),
                schema_digest: ds.schema_digest(),
                dataset_name: ds.name.clone(),
            };
            let p1 = dir.path().join("a.fcib");
            let p2 = dir.path().join("b.fcib");
            save_checkpoint(&cp, &p1).unwrap();
            let loaded = load_checkpoint(&p1).unwrap();
            save_checkpoint(&loaded, &p2).unwrap();
            assert_eq!(
                std::fs::read(&p1).unwrap(),
                std::fs::read(&p2).unwrap(),
                "re-saved checkpoint differs"
            );
            assert_eq!(
                params_digest(&cp.autoencoder.encoder),
                params_digest(&loaded.autoencoder.encoder)
            );
            assert_eq!(cp.centers, loaded.centers);
            assert_eq!(cp.schema_digest, loaded.schema_digest);
            assert_eq!(cp.autoencoder.mode(), loaded.autoencoder.mode());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(SensitiveMode::Discrete, 9);
        let out = train(&ds, &tiny_config(SensitiveMode::Discrete)).unwrap();
        let cp = Checkpoint {
            config: out.config,
            autoencoder: out.autoencoder,
            predictor: out.predictor,
            centers: out.centers,
            standardizer: None,
            schema_digest: ds.schema_digest(),
            dataset_name: ds.name.clone(),
        };
        let path = dir.path().join("cp.fcib");
        save_checkpoint(&cp, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        let truncated = &good[..good.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn embeddings_export_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let z = array![[0.5, -1.5], [2.0, 0.25]];
        let sensitive = Sensitive::Discrete {
            groups: vec![1, 0],
            n_groups: 2,
        };
        write_embeddings(&path, &z, &[0, 1], &sensitive).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,z_0,z_1,cluster,sensitive");
        assert_eq!(lines[1], "0,0.5,-1.5,0,1");
        assert_eq!(lines[2], "1,2,0.25,1,0");

        assert!(write_embeddings(&path, &z, &[0], &sensitive).is_err());
    }
}
