//! Dense feed-forward networks in `f64`.
//!
//! Everything downstream (autoencoder, cluster head, fairness predictor)
//! is built from the one building block here: a fully-connected stack with
//! per-layer activations from `{relu, linear, softmax}`. The goal is not a
//! general autodiff engine; it is a small, predictable kernel whose
//! gradients can be audited against central finite differences.
//!
//! Conventions:
//!
//! * A batch is a `(rows, features)` matrix; row `i` is sample `i`.
//! * Layer `l` stores weights as `(out, in)` and computes
//!   `a_l = act(a_{l-1} w_lᵀ + b_l)`.
//! * [`Mlp::forward`] caches post-activation values per layer; that cache is
//!   what [`Mlp::backward`] consumes. Softmax and relu derivatives are
//!   recoverable from post-activations, so pre-activations are not kept.
//! * [`Mlp::backward`] returns gradients for every weight and bias *and*
//!   for the input batch. Input gradients are how losses defined on one
//!   network's output reach the network that produced its input (the
//!   frozen-predictor path of the fairness bound relies on this).
//!
//! Shape disagreements inside a stack are bugs and panic. Seeded
//! initialization is bit-reproducible for a given seed.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    /// Row-wise softmax over the layer output. Only meaningful as the final
    /// activation of a stack, but nothing enforces that.
    Softmax,
}

/// Architecture description: `sizes = [d_in, h_1, ..., d_out]` plus one
/// activation per weight layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("network needs at least one weight layer"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("zero-width layer"));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::config(format!(
                "expected {} activations for {} sizes, got {}",
                sizes.len() - 1,
                sizes.len(),
                activations.len()
            )));
        }
        Ok(MlpSpec { sizes, activations })
    }

    /// Relu hidden layers with a linear output; the default shape for every
    /// network in this crate.
    pub fn relu_linear(sizes: Vec<usize>) -> Result<Self> {
        let n = sizes.len();
        if n < 2 {
            return Err(Error::config("network needs at least one weight layer"));
        }
        let mut acts = vec![Activation::Relu; n - 1];
        acts[n - 2] = Activation::Linear;
        MlpSpec::new(sizes, acts)
    }

    /// Relu hidden layers with a softmax output.
    pub fn relu_softmax(sizes: Vec<usize>) -> Result<Self> {
        let mut spec = MlpSpec::relu_linear(sizes)?;
        *spec.activations.last_mut().unwrap() = Activation::Softmax;
        Ok(spec)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `(out, in)`, row-major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Seeded initialization. Relu layers draw from the uniform He range
    /// `±sqrt(6 / fan_in)`; linear and softmax layers from the uniform
    /// Xavier range `±sqrt(6 / (fan_in + fan_out))`. Biases start at zero.
    pub fn init(spec: MlpSpec, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.n_layers());
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.sizes[l], spec.sizes[l + 1]);
            let limit = match spec.activations[l] {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Linear | Activation::Softmax => {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                }
            };
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-limit..limit)
            });
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                activation: spec.activations[l],
            });
        }
        Mlp { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Rebuild from explicit layers; the checkpoint reader uses this.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Mlp> {
        if layers.len() != spec.n_layers() {
            return Err(Error::invalid("layer count does not match spec"));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = (spec.sizes[l + 1], spec.sizes[l]);
            if layer.w.dim() != want || layer.b.len() != want.0 {
                return Err(Error::invalid(format!(
                    "layer {l}: shape {:?} does not match spec {:?}",
                    layer.w.dim(),
                    want
                )));
            }
        }
        Ok(Mlp { spec, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Digest over every parameter's bit pattern. Two networks share a
    /// digest iff their weights and biases are byte-identical, which is
    /// how freeze contracts are checked.
    pub fn params_digest(&self) -> String {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            for &v in layer.w.iter().chain(layer.b.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::data::fnv1a_hex(&bytes)
    }

    /// Forward pass over a batch, caching post-activations per layer.
    pub fn forward(&self, x: &Array2<f64>) -> Forward {
        assert_eq!(
            x.ncols(),
            self.spec.input_dim(),
            "input has {} features, network expects {}",
            x.ncols(),
            self.spec.input_dim()
        );
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let mut z = acts.last().unwrap().dot(&layer.w.t());
            z += &layer.b;
            apply_activation(&mut z, layer.activation);
            acts.push(z);
        }
        Forward { acts }
    }

    /// Forward pass keeping only the output.
    pub fn output(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).acts.into_iter().next_back().unwrap()
    }

    /// Backpropagate `upstream = dL/d output` through the cached pass.
    /// Returns parameter gradients and the gradient with respect to the
    /// input batch.
    pub fn backward(&self, fwd: &Forward, upstream: &Array2<f64>) -> Gradients {
        let n_layers = self.layers.len();
        assert_eq!(fwd.acts.len(), n_layers + 1, "cache does not match network");
        assert_eq!(
            upstream.dim(),
            fwd.acts[n_layers].dim(),
            "upstream gradient shape {:?} does not match output {:?}",
            upstream.dim(),
            fwd.acts[n_layers].dim()
        );

        let mut layer_grads: Vec<LayerGrad> = Vec::with_capacity(n_layers);
        let mut da = upstream.clone();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let a_out = &fwd.acts[l + 1];
            let a_in = &fwd.acts[l];
            let dz = activation_backward(&da, a_out, layer.activation);
            let dw = dz.t().dot(a_in);
            let db = dz.sum_axis(Axis(0));
            da = dz.dot(&layer.w);
            layer_grads.push(LayerGrad { w: dw, b: db });
        }
        layer_grads.reverse();
        Gradients {
            layers: layer_grads,
            input: da,
        }
    }
}

fn apply_activation(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Softmax => {
            for mut row in z.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
}

/// `dL/dz` from `dL/da` and the post-activation value `a`.
fn activation_backward(da: &Array2<f64>, a: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Linear => da.clone(),
        Activation::Relu => {
            let mut dz = da.clone();
            dz.zip_mut_with(a, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            dz
        }
        Activation::Softmax => {
            // Full Jacobian per row: dz_j = a_j (g_j - sum_k g_k a_k).
            let mut dz = Array2::zeros(da.dim());
            for (i, (g_row, a_row)) in da.rows().into_iter().zip(a.rows()).enumerate() {
                let dot: f64 = g_row.iter().zip(a_row.iter()).map(|(g, a)| g * a).sum();
                for (j, (&g, &av)) in g_row.iter().zip(a_row.iter()).enumerate() {
                    dz[[i, j]] = av * (g - dot);
                }
            }
            dz
        }
    }
}

/// Post-activation values of one forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Forward {
    pub acts: Vec<Array2<f64>>,
}

impl Forward {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// `dL/d input`, shape of the input batch.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp, batch: usize) -> Gradients {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
            input: Array2::zeros((batch, mlp.spec().input_dim())),
        }
    }

    /// `self += c * other`; used to combine per-loss gradients before one
    /// optimizer step.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(c, &b.w);
            a.b.scaled_add(c, &b.b);
        }
        if self.input.dim() == other.input.dim() {
            self.input.scaled_add(c, &other.input);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, one pair per tensor, plus the shared
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    t: u64,
}

impl AdamState {
    pub fn new(mlp: &Mlp) -> AdamState {
        let zeros = || {
            mlp.layers
                .iter()
                .map(|l| LayerGrad {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. Moments always advance; with `lr = 0` the parameters
/// stay put while the state still warms up.
pub fn adam_step(mlp: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64) {
    assert_eq!(grads.layers.len(), mlp.layers.len(), "gradient/layer mismatch");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (l, layer) in mlp.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        update_tensor(
            layer.w.as_slice_mut().unwrap(),
            g.w.as_slice().unwrap(),
            state.m[l].w.as_slice_mut().unwrap(),
            state.v[l].w.as_slice_mut().unwrap(),
            lr,
            bc1,
            bc2,
        );
        update_tensor(
            layer.b.as_slice_mut().unwrap(),
            g.b.as_slice().unwrap(),
            state.m[l].b.as_slice_mut().unwrap(),
            state.v[l].b.as_slice_mut().unwrap(),
            lr,
            bc1,
            bc2,
        );
    }
}

fn update_tensor(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Outcome of a finite-difference audit of analytic gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

const GRAD_CHECK_H: f64 = 1e-5;

/// Compare analytic parameter gradients against central finite differences.
///
/// `f` evaluates the loss and its analytic gradients at the given
/// parameters; the numeric side re-evaluates only the loss value at
/// `p ± h`. Relative error is `|a - n| / max(|a|, |n|, 1e-6)` per entry.
pub fn grad_check<F>(mlp: &Mlp, f: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Mlp) -> (f64, Gradients),
{
    let (_, analytic) = f(mlp);
    let mut probe = mlp.clone();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for l in 0..mlp.layers.len() {
        let wn = mlp.layers[l].w.len();
        let bn = mlp.layers[l].b.len();
        for idx in 0..wn + bn {
            let read = |m: &Mlp| -> f64 {
                if idx < wn {
                    m.layers[l].w.as_slice().unwrap()[idx]
                } else {
                    m.layers[l].b[idx - wn]
                }
            };
            let write = |m: &mut Mlp, v: f64| {
                if idx < wn {
                    m.layers[l].w.as_slice_mut().unwrap()[idx] = v;
                } else {
                    m.layers[l].b[idx - wn] = v;
                }
            };
            let orig = read(&probe);
            write(&mut probe, orig + GRAD_CHECK_H);
            let plus = f(&probe).0;
            write(&mut probe, orig - GRAD_CHECK_H);
            let minus = f(&probe).0;
            write(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_H);
            let a = if idx < wn {
                analytic.layers[l].w.as_slice().unwrap()[idx]
            } else {
                analytic.layers[l].b[idx - wn]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
        tolerance,
        pass: max_rel_err < tolerance,
    }
}

/// Finite-difference audit of a loss's gradient with respect to a data
/// matrix (latent codes, inputs). Same tolerance convention as
/// [`grad_check`].
pub fn grad_check_input<F>(x: &Array2<f64>, f: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.dim(), x.dim(), "gradient shape mismatch");
    let mut probe = x.clone();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = probe[[i, j]];
            probe[[i, j]] = orig + GRAD_CHECK_H;
            let plus = f(&probe).0;
            probe[[i, j]] = orig - GRAD_CHECK_H;
            let minus = f(&probe).0;
            probe[[i, j]] = orig;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_H);
            let a = analytic[[i, j]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
        tolerance,
        pass: max_rel_err < tolerance,
    }
}
