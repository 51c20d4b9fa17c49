//! Fully connected regressor from `(a, e_src, e_tgt)` to spectral
//! displacement coefficients, with exact reverse-mode gradients and an Adam
//! training loop.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{DisplacementField, SpectralBasis, SpectralCoeffs, SpectralError};

#[derive(Debug, Error)]
pub enum ShapeNetError {
    #[error("layer {layer} has zero width")]
    ZeroWidth { layer: usize },
    #[error("a network needs at least an input and an output width")]
    TooFewLayers,
    #[error("layer {layer} expects {expected} inputs but the previous layer produces {got}")]
    Chain { layer: usize, expected: usize, got: usize },
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite training loss at epoch {epoch}, batch {batch} (last finite loss {last_finite:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_finite: Option<f64>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// `y = act(W x + b)` with `W` of shape `(n_out, n_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Per-dimension affine standardization `z = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column statistics of `rows`; near-constant dimensions keep scale 1.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut shift = vec![0.0; dim];
        for r in rows {
            for (s, x) in shift.iter_mut().zip(r.iter()) {
                *s += x / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in rows {
            for ((s, x), m) in scale.iter_mut().zip(r.iter()).zip(&shift) {
                *s += (x - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Self { shift, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.shift).zip(&self.scale).map(|((z, m), s)| z * s + m).collect()
    }
}

/// Network parameters plus optional input/output standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
    pub input_norm: Option<Standardization>,
    pub output_norm: Option<Standardization>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, ShapeNetError> {
        if layers.is_empty() {
            return Err(ShapeNetError::TooFewLayers);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.n_in() == 0 || l.n_out() == 0 {
                return Err(ShapeNetError::ZeroWidth { layer: i });
            }
            if l.bias.len() != l.n_out() {
                return Err(ShapeNetError::Sizing {
                    what: "bias",
                    expected: l.n_out(),
                    got: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].n_out() != l.n_in() {
                return Err(ShapeNetError::Chain {
                    layer: i,
                    expected: l.n_in(),
                    got: layers[i - 1].n_out(),
                });
            }
        }
        Ok(Self {
            layers,
            input_norm: None,
            output_norm: None,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.n_inputs()).chain(self.layers.iter().map(|l| l.n_out())).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// Applies the stored standardizations around [`mlp_forward`].
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, ShapeNetError> {
        let z = match &self.input_norm {
            Some(n) => n.apply(x),
            None => x.to_vec(),
        };
        let y = mlp_forward(self, &z)?;
        Ok(match &self.output_norm {
            Some(n) => n.invert(&y),
            None => y,
        })
    }
}

/// Standard deviation targeted by [`mlp_init`] for a layer with `fan_in`
/// inputs: `sqrt(2 / fan_in)` ahead of a ReLU, `sqrt(1 / fan_in)` for the
/// linear output.
pub fn init_std(fan_in: usize, activation: Activation) -> f64 {
    let gain = match activation {
        Activation::Relu => 2.0,
        Activation::Linear => 1.0,
    };
    (gain / fan_in as f64).sqrt()
}

/// Seeded uniform fan-in initialization; biases start at zero. All layers
/// but the last use ReLU.
pub fn mlp_init(dims: &[usize], seed: u64) -> Result<MlpParams, ShapeNetError> {
    if dims.len() < 2 {
        return Err(ShapeNetError::TooFewLayers);
    }
    if let Some(layer) = dims.iter().position(|&d| d == 0) {
        return Err(ShapeNetError::ZeroWidth { layer });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let activation = if i + 2 == dims.len() { Activation::Linear } else { Activation::Relu };
            let limit = init_std(w[0], activation) * 3f64.sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            // Row-major fill keeps the draw order independent of storage.
            let weights = DMatrix::from_row_iterator(w[1], w[0], (0..w[0] * w[1]).map(|_| dist.sample(&mut rng)));
            DenseLayer {
                weights,
                bias: DVector::zeros(w[1]),
                activation,
            }
        })
        .collect();
    MlpParams::new(layers)
}

fn activate(z: &mut [f64], activation: Activation) {
    if activation == Activation::Relu {
        z.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// Raw network output (no standardization).
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>, ShapeNetError> {
    if x.len() != params.n_inputs() {
        return Err(ShapeNetError::Sizing {
            what: "network input",
            expected: params.n_inputs(),
            got: x.len(),
        });
    }
    let mut h = DVector::from_column_slice(x);
    for l in &params.layers {
        let mut z = &l.weights * &h + &l.bias;
        activate(z.as_mut_slice(), l.activation);
        h = z;
    }
    Ok(h.as_slice().to_vec())
}

/// Parameter gradients laid out like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

/// Loss `(1 / (B m)) Σ_b Σ_k (y_bk - t_bk)²` over a batch of `B` samples with
/// `m` outputs, and its exact gradient. The ReLU derivative at 0 is 0.
pub fn mlp_gradient(params: &MlpParams, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<(f64, Gradients), ShapeNetError> {
    if inputs.is_empty() {
        return Err(ShapeNetError::EmptyBatch);
    }
    if inputs.len() != targets.len() {
        return Err(ShapeNetError::Sizing {
            what: "batch targets",
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let (n_in, n_out) = (params.n_inputs(), params.n_outputs());
    for (x, t) in inputs.iter().zip(targets) {
        if x.len() != n_in {
            return Err(ShapeNetError::Sizing {
                what: "network input",
                expected: n_in,
                got: x.len(),
            });
        }
        if t.len() != n_out {
            return Err(ShapeNetError::Sizing {
                what: "network target",
                expected: n_out,
                got: t.len(),
            });
        }
    }
    let b = inputs.len();
    let x = DMatrix::from_fn(n_in, b, |r, c| inputs[c][r]);
    let t = DMatrix::from_fn(n_out, b, |r, c| targets[c][r]);

    // Forward, keeping each layer's input and post-activation output.
    let mut acts = vec![x];
    for l in &params.layers {
        let prev = acts.last().expect("non-empty");
        let mut z = &l.weights * prev;
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        activate(z.as_mut_slice(), l.activation);
        acts.push(z);
    }
    let y = acts.last().expect("output");
    let diff = y - &t;
    let denom = (b * n_out) as f64;
    let loss = diff.norm_squared() / denom;

    let n_layers = params.layers.len();
    let mut gw = vec![DMatrix::zeros(0, 0); n_layers];
    let mut gb = vec![DVector::zeros(0); n_layers];
    let mut delta = diff * (2.0 / denom);
    for li in (0..n_layers).rev() {
        let l = &params.layers[li];
        if l.activation == Activation::Relu {
            // acts[li + 1] is the ReLU output; positive exactly where z > 0.
            delta.zip_apply(&acts[li + 1], |d, a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        }
        gw[li] = &delta * acts[li].transpose();
        gb[li] = delta.column_sum();
        if li > 0 {
            delta = l.weights.transpose() * &delta;
        }
    }
    Ok((loss, Gradients { weights: gw, bias: gb }))
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}

/// Shape-branch training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeTrainConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty on weights, added to their gradients.
    pub weight_decay: f64,
    pub standardize_inputs: bool,
    pub standardize_targets: bool,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            weight_decay: 0.0,
            standardize_inputs: false,
            standardize_targets: true,
        }
    }
}

impl ShapeTrainConfig {
    pub fn validate(&self) -> Result<(), ShapeNetError> {
        let bad = |m: &str| Err(ShapeNetError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }
}

/// One supervised pair: network input `(a, e_src, e_tgt)` and target
/// spectral coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn shape_input(a: &[f64], e_src: &[f64], e_tgt: &[f64]) -> Vec<f64> {
    a.iter().chain(e_src).chain(e_tgt).copied().collect()
}

/// Trained parameters with the training loss (in standardized target units
/// when targets are standardized) before training and after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedShapeBranch {
    pub params: MlpParams,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(params: &MlpParams) -> Self {
        let zeros = || Gradients {
            weights: params.layers.iter().map(|l| DMatrix::zeros(l.n_out(), l.n_in())).collect(),
            bias: params.layers.iter().map(|l| DVector::zeros(l.n_out())).collect(),
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut MlpParams, grads: &Gradients, cfg: &ShapeTrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], decay: f64| {
            for i in 0..p.len() {
                let gi = g[i] + decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        };
        for (li, layer) in params.layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                grads.weights[li].as_slice(),
                self.m.weights[li].as_mut_slice(),
                self.v.weights[li].as_mut_slice(),
                cfg.weight_decay,
            );
            update(
                layer.bias.as_mut_slice(),
                grads.bias[li].as_slice(),
                self.m.bias[li].as_mut_slice(),
                self.v.bias[li].as_mut_slice(),
                0.0,
            );
        }
    }
}

fn dataset_loss(params: &MlpParams, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64, ShapeNetError> {
    let mut total = 0.0;
    let chunk = 256;
    for start in (0..inputs.len()).step_by(chunk) {
        let end = (start + chunk).min(inputs.len());
        let xs: Vec<&[f64]> = inputs[start..end].iter().map(|v| v.as_slice()).collect();
        let ts: Vec<&[f64]> = targets[start..end].iter().map(|v| v.as_slice()).collect();
        let (loss, _) = mlp_gradient(params, &xs, &ts)?;
        total += loss * (end - start) as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Adam on minibatch MSE with a seeded shuffle each epoch.
pub fn train_shape_branch(samples: &[ShapeSample], config: &ShapeTrainConfig) -> Result<TrainedShapeBranch, ShapeNetError> {
    config.validate()?;
    let first = samples.first().ok_or(ShapeNetError::EmptyBatch)?;
    let (n_in, n_out) = (first.input.len(), first.target.len());
    for s in samples {
        if s.input.len() != n_in || s.target.len() != n_out {
            return Err(ShapeNetError::Sizing {
                what: "sample",
                expected: n_in + n_out,
                got: s.input.len() + s.target.len(),
            });
        }
    }
    let input_norm = config
        .standardize_inputs
        .then(|| Standardization::fit(&samples.iter().map(|s| s.input.as_slice()).collect::<Vec<_>>()));
    let output_norm = config
        .standardize_targets
        .then(|| Standardization::fit(&samples.iter().map(|s| s.target.as_slice()).collect::<Vec<_>>()));
    let inputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| input_norm.as_ref().map_or_else(|| s.input.clone(), |n| n.apply(&s.input)))
        .collect();
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| output_norm.as_ref().map_or_else(|| s.target.clone(), |n| n.apply(&s.target)))
        .collect();

    let dims: Vec<usize> = std::iter::once(n_in).chain(config.hidden.iter().copied()).chain([n_out]).collect();
    let mut params = mlp_init(&dims, config.seed)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5417_u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let initial_loss = dataset_loss(&params, &inputs, &targets)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut last_finite = initial_loss.is_finite().then_some(initial_loss);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
            let ts: Vec<&[f64]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
            let (loss, grads) = mlp_gradient(&params, &xs, &ts)?;
            if !loss.is_finite() {
                return Err(ShapeNetError::NonFiniteLoss { epoch, batch, last_finite });
            }
            last_finite = Some(loss);
            adam.step(&mut params, &grads, config);
        }
        let loss = dataset_loss(&params, &inputs, &targets)?;
        if !loss.is_finite() {
            return Err(ShapeNetError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                last_finite,
            });
        }
        log::debug!("shape branch epoch {epoch}: loss {loss:.6e}");
        epoch_losses.push(loss);
    }
    params.input_norm = input_norm;
    params.output_norm = output_norm;
    Ok(TrainedShapeBranch {
        params,
        initial_loss,
        epoch_losses,
    })
}

/// Decoded displacement predicted for the target expression.
pub fn predict_deformation(
    params: &MlpParams,
    a: &[f64],
    e_src: &[f64],
    e_tgt: &[f64],
    basis: &SpectralBasis,
) -> Result<DisplacementField, ShapeNetError> {
    if params.n_outputs() != 3 * basis.k() {
        return Err(ShapeNetError::Sizing {
            what: "network output",
            expected: 3 * basis.k(),
            got: params.n_outputs(),
        });
    }
    let values = params.predict(&shape_input(a, e_src, e_tgt))?;
    Ok(basis.decode(&SpectralCoeffs { k: basis.k(), values })?)
}
