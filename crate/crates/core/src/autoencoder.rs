//! Encoder/decoder pairs over [`crate::nn`].
//!
//! The decoder side is either a single network or one network per sensitive
//! group. Group-wise decoding lets each group reconstruct through its own
//! head so the shared latent code is not forced to carry the group id for
//! reconstruction's sake; it is only available when the sensitive attribute
//! is discrete. A continuous attribute always uses the shared decoder.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{Forward, Gradients, Mlp, MlpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    Shared,
    /// One decoder per group; the value is the group count.
    PerGroup(usize),
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoders: Vec<Mlp>,
    mode: DecoderMode,
}

/// One decoding pass. Rows are routed to their group's decoder and the
/// reassembled reconstruction keeps the input row order; `parts` remembers
/// the routing so the backward pass can scatter gradients the same way.
#[derive(Debug)]
pub struct DecodePass {
    pub xhat: Array2<f64>,
    parts: Vec<DecodePart>,
}

#[derive(Debug)]
struct DecodePart {
    decoder: usize,
    rows: Vec<usize>,
    fwd: Forward,
}

impl Autoencoder {
    /// Build encoder `[input, hidden..., latent]` and mirrored decoder(s)
    /// `[latent, hidden reversed..., input]`, relu hidden layers, linear
    /// outputs. Decoder `i` draws from seed `seed + 1 + i`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        mode: DecoderMode,
        seed: u64,
    ) -> Result<Autoencoder> {
        let mut enc_sizes = vec![input_dim];
        enc_sizes.extend_from_slice(hidden);
        enc_sizes.push(latent_dim);
        let mut dec_sizes = vec![latent_dim];
        dec_sizes.extend(hidden.iter().rev());
        dec_sizes.push(input_dim);

        let encoder = Mlp::init(MlpSpec::relu_linear(enc_sizes)?, seed);
        let n_decoders = match mode {
            DecoderMode::Shared => 1,
            DecoderMode::PerGroup(t) => {
                if t < 2 {
                    return Err(Error::config("per-group decoding needs at least 2 groups"));
                }
                t
            }
        };
        let dec_spec = MlpSpec::relu_linear(dec_sizes)?;
        let decoders = (0..n_decoders)
            .map(|i| Mlp::init(dec_spec.clone(), seed + 1 + i as u64))
            .collect();
        Ok(Autoencoder {
            encoder,
            decoders,
            mode,
        })
    }

    pub fn from_parts(encoder: Mlp, decoders: Vec<Mlp>, mode: DecoderMode) -> Result<Autoencoder> {
        let expected = match mode {
            DecoderMode::Shared => 1,
            DecoderMode::PerGroup(t) => t,
        };
        if decoders.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} decoders, got {}",
                decoders.len()
            )));
        }
        Ok(Autoencoder {
            encoder,
            decoders,
            mode,
        })
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec().output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.spec().input_dim()
    }

    pub fn encode(&self, x: &Array2<f64>) -> Forward {
        self.encoder.forward(x)
    }

    /// Latent codes without the cache.
    pub fn embed(&self, x: &Array2<f64>) -> Array2<f64> {
        self.encoder.output(x)
    }

    /// Decode a latent batch. `groups` is required in per-group mode and
    /// ignored in shared mode.
    pub fn decode(&self, z: &Array2<f64>, groups: Option<&[usize]>) -> Result<DecodePass> {
        let b = z.nrows();
        let routing: Vec<(usize, Vec<usize>)> = match self.mode {
            DecoderMode::Shared => vec![(0, (0..b).collect())],
            DecoderMode::PerGroup(t) => {
                let groups = groups.ok_or_else(|| {
                    Error::invalid("per-group decoding needs group ids for the batch")
                })?;
                if groups.len() != b {
                    return Err(Error::invalid(format!(
                        "{} group ids for a batch of {b}",
                        groups.len()
                    )));
                }
                if let Some(&bad) = groups.iter().find(|&&g| g >= t) {
                    return Err(Error::invalid(format!(
                        "group id {bad} out of range (have {t} decoders)"
                    )));
                }
                let mut rows_per: Vec<Vec<usize>> = vec![Vec::new(); t];
                for (row, &g) in groups.iter().enumerate() {
                    rows_per[g].push(row);
                }
                rows_per
                    .into_iter()
                    .enumerate()
                    .filter(|(_, rows)| !rows.is_empty())
                    .map(|(g, rows)| (g, rows))
                    .collect()
            }
        };

        let mut xhat = Array2::zeros((b, self.input_dim()));
        let mut parts = Vec::with_capacity(routing.len());
        for (decoder, rows) in routing {
            let sub = gather_rows(z, &rows);
            let fwd = self.decoders[decoder].forward(&sub);
            for (local, &row) in rows.iter().enumerate() {
                xhat.row_mut(row).assign(&fwd.output().row(local));
            }
            parts.push(DecodePart { decoder, rows, fwd });
        }
        Ok(DecodePass { xhat, parts })
    }

    /// Backpropagate `dL/d xhat` through the decoding pass. Returns one
    /// gradient set per decoder (zero for decoders that saw no rows) and
    /// the gradient with respect to the latent batch.
    pub fn decode_backward(
        &self,
        pass: &DecodePass,
        dxhat: &Array2<f64>,
    ) -> (Vec<Option<Gradients>>, Array2<f64>) {
        assert_eq!(dxhat.dim(), pass.xhat.dim(), "gradient shape mismatch");
        let b = pass.xhat.nrows();
        let mut dz = Array2::zeros((b, self.latent_dim()));
        let mut per_decoder: Vec<Option<Gradients>> = (0..self.decoders.len()).map(|_| None).collect();
        for part in &pass.parts {
            let upstream = gather_rows(dxhat, &part.rows);
            let grads = self.decoders[part.decoder].backward(&part.fwd, &upstream);
            for (local, &row) in part.rows.iter().enumerate() {
                dz.row_mut(row).assign(&grads.input.row(local));
            }
            per_decoder[part.decoder] = Some(grads);
        }
        (per_decoder, dz)
    }
}

pub(crate) fn gather_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (local, &row) in rows.iter().enumerate() {
        out.row_mut(local).assign(&m.row(row));
    }
    out
}

/// Mean over the batch of the squared reconstruction error,
/// `(1/B) sum_i ||xhat_i - x_i||^2`.
pub fn recon_loss(x: &Array2<f64>, xhat: &Array2<f64>) -> f64 {
    assert_eq!(x.dim(), xhat.dim(), "reconstruction shape mismatch");
    let b = x.nrows() as f64;
    x.iter()
        .zip(xhat.iter())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / b
}

/// Loss value plus `dL/d xhat`.
pub fn recon_loss_grad(x: &Array2<f64>, xhat: &Array2<f64>) -> (f64, Array2<f64>) {
    let loss = recon_loss(x, xhat);
    let b = x.nrows() as f64;
    let mut grad = xhat - x;
    grad.mapv_inplace(|v| 2.0 * v / b);
    (loss, grad)
}

/// Per-column mean of squared error; useful when deciding which features a
/// latent code gave up on.
pub fn recon_error_per_feature(x: &Array2<f64>, xhat: &Array2<f64>) -> Array1<f64> {
    assert_eq!(x.dim(), xhat.dim());
    let diff = xhat - x;
    diff.map_axis(ndarray::Axis(0), |col| {
        col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64
    })
}
