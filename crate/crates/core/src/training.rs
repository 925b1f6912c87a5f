//! Novel-path encoder: a small MLP with hand-written backprop, Adam, and the
//! training loop over base classes.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::{augment_batch, AugmentParams, LabeledFeatureSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{gaussian, RngStream};
use crate::sacl::{
    cl_weights, embedding_grad_to_features, pair_weights, sacl_loss_and_grad, scl_weights,
    EmbeddingBatch, PairWeights,
};
use crate::scalar::Scalar;
use crate::teacher::{
    batch_accuracy_lambda, read_exact, read_f64s, read_u32, structural_similarity, TeacherModel,
};

const ENCODER_MAGIC: &[u8; 8] = b"SACLENC1";

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

/// Affine map `x ↦ W x + b`, optionally followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `out × in`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    layers: Vec<Layer<T>>,
    // changes on every parameter mutation; forward caches record it
    token: u64,
}

impl<T: PartialEq> PartialEq for Encoder<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Values saved by `forward` for `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    token: u64,
}

/// Per-layer parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> EncoderGrads<T> {
    /// Flattened in parameter order: weight 0, bias 0, weight 1, ...
    pub fn slices(&self) -> Vec<&[T]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::shape(
                    format!("layer {l} bias of length {}", layer.weight.rows()),
                    layer.bias.len(),
                ));
            }
            if l > 0 && layers[l - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::shape(
                    format!("layer {l} input {}", layers[l - 1].weight.rows()),
                    layer.weight.cols(),
                ));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self {
            layers,
            token: fresh_token(),
        })
    }

    /// MLP through `dims` (input first) with ReLU after every layer but the
    /// last. Weights `N(0, 2/fan_in)`, biases zero.
    pub fn mlp(dims: &[usize], rng: RngStream) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {dims:?}")));
        }
        let mut rng = rng.rng();
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let std = T::lit((2.0 / w[0] as f64).sqrt());
                let mut weight = Matrix::zeros(w[1], w[0]);
                for x in weight.as_mut_slice() {
                    *x = std * gaussian::<T>(&mut rng);
                }
                Layer {
                    weight,
                    bias: vec![T::zero(); w[1]],
                    relu: l != last,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// A single linear layer computing the identity.
    pub fn identity(dim: usize) -> Self {
        Self::from_layers(vec![Layer {
            weight: Matrix::identity(dim),
            bias: vec![T::zero(); dim],
            relu: false,
        }])
        .expect("identity layer is valid")
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Sizes of the flattened parameter slices, in `params_mut` order.
    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.rows() * l.weight.cols(), l.bias.len()])
            .collect()
    }

    /// Mutable parameter slices. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.token = fresh_token();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn layer_forward(layer: &Layer<T>, a: &Matrix<T>) -> Result<Matrix<T>> {
        let mut z = a.matmul_nt(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn activate(layer: &Layer<T>, z: &Matrix<T>) -> Matrix<T> {
        if layer.relu {
            z.map(|v| v.max(T::zero()))
        } else {
            z.clone()
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input columns", self.input_dim()),
                x.cols(),
            ));
        }
        Ok(())
    }

    /// Output features only.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = Self::activate(layer, &Self::layer_forward(layer, &a)?);
        }
        Ok(a)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(ForwardCache<T>, Matrix<T>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let z = Self::layer_forward(layer, &a)?;
            let next = Self::activate(layer, &z);
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let cache = ForwardCache {
            inputs,
            pre,
            token: self.token,
        };
        Ok((cache, a))
    }

    /// Gradients of the loss with respect to every parameter given `dL/dF`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Matrix<T>) -> Result<EncoderGrads<T>> {
        if cache.token != self.token || cache.pre.len() != self.layers.len() {
            return Err(Error::protocol(
                "forward cache is stale: the encoder changed since it was recorded",
            ));
        }
        let rows = cache.inputs[0].rows();
        if grad_out.shape() != (rows, self.output_dim()) {
            return Err(Error::shape(
                format!("{rows}x{}", self.output_dim()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = grad_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let mut dz = upstream;
            if layer.relu {
                for (g, &z) in dz.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            weights.push(dz.matmul_tn(&cache.inputs[l])?);
            let mut db = vec![T::zero(); layer.bias.len()];
            for row in dz.row_iter() {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            biases.push(db);
            upstream = dz.matmul(&layer.weight)?;
        }
        weights.reverse();
        biases.reverse();
        Ok(EncoderGrads { weights, biases })
    }

    pub fn write_checkpoint(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(ENCODER_MAGIC)?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            out.write_all(&(layer.weight.rows() as u32).to_le_bytes())?;
            out.write_all(&(layer.weight.cols() as u32).to_le_bytes())?;
            for &w in layer.weight.as_slice().iter().chain(&layer.bias) {
                out.write_all(&w.to_f64_lossy().to_le_bytes())?;
            }
        }
        out.flush()
    }

    /// Hidden layers are restored with ReLU, the last layer as linear.
    pub fn read_checkpoint(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic)?;
        if &magic != ENCODER_MAGIC {
            return Err(Error::Checkpoint("not an encoder checkpoint".into()));
        }
        let count = read_u32(&mut input)? as usize;
        let mut layers = Vec::with_capacity(count);
        for l in 0..count {
            let rows = read_u32(&mut input)? as usize;
            let cols = read_u32(&mut input)? as usize;
            let weight = Matrix::from_vec(rows, cols, read_f64s(&mut input, rows * cols)?)?;
            let bias = read_f64s(&mut input, rows)?;
            layers.push(Layer {
                weight,
                bias,
                relu: l + 1 != count,
            });
        }
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Self::from_layers(layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for a fixed list of parameter slices.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                format!("{} parameter slices", self.first.len()),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != self.first[k].len() {
                return Err(Error::shape(
                    format!("slice {k} of length {}", self.first[k].len()),
                    format!("{} params, {} grads", p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let correct1 = T::one() - T::lit(c.beta1.powi(t));
        let correct2 = T::one() - T::lit(c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// Teacher accuracy on the current batch.
    Adaptive,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Sacl,
    /// Homolog-only positives.
    Cl,
    /// Same-label binary positives.
    Scl,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Sacl => "sacl",
            LossKind::Cl => "cl",
            LossKind::Scl => "scl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sacl" => Ok(LossKind::Sacl),
            "cl" => Ok(LossKind::Cl),
            "scl" => Ok(LossKind::Scl),
            _ => Err(Error::config(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Source samples per batch; each contributes two views.
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub tau_hot: f64,
    pub tau_cold: f64,
    pub lambda: LambdaMode,
    pub loss: LossKind,
    pub augment: AugmentParams,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 300,
            lr: 1e-3,
            tau_hot: 2.5,
            tau_cold: 0.05,
            lambda: LambdaMode::Adaptive,
            loss: LossKind::Sacl,
            augment: AugmentParams::default(),
            hidden: vec![64, 64],
            out_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.batch_size == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("batch size and layer widths must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !positive(self.tau_hot) || !positive(self.tau_cold) {
            return Err(Error::config(format!(
                "temperatures must be positive, got hot {} cold {}",
                self.tau_hot, self.tau_cold
            )));
        }
        if let LambdaMode::Fixed(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("lambda {l} outside [0, 1]")));
            }
        }
        self.augment.validate()
    }

    /// Layer sizes from input dimension `d` to the output.
    pub fn layer_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![d];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims
    }

    fn root(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    /// Stream used for weight initialization.
    pub fn init_stream(&self) -> RngStream {
        self.root().child(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    /// Mean per-anchor loss.
    pub loss: f64,
    pub lambda: f64,
    pub teacher_batch_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub encoder: Encoder<T>,
    pub log: Vec<TrainLogRow>,
}

pub fn train_embedding<T: Scalar>(
    base: &LabeledFeatureSet<T>,
    teacher: &TeacherModel<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_embedding_with(base, teacher, cfg, |_, _| Ok(()))
}

/// As [`train_embedding`], calling `observer(iteration, encoder)` after every
/// update, with `iteration` counted from 1.
pub fn train_embedding_with<T: Scalar>(
    base: &LabeledFeatureSet<T>,
    teacher: &TeacherModel<T>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &Encoder<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if !teacher.is_frozen() {
        return Err(Error::protocol("teacher must be frozen before training the encoder"));
    }
    if cfg.batch_size > base.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} base samples",
            cfg.batch_size,
            base.len()
        )));
    }
    if teacher.dim() != base.dim() {
        return Err(Error::shape(format!("teacher input {}", base.dim()), teacher.dim()));
    }
    let mut encoder = Encoder::mlp(&cfg.layer_dims(base.dim()), cfg.init_stream())?;
    let mut opt = OptimizerState::new(&encoder.param_sizes(), AdamConfig::with_lr(cfg.lr));
    let batches = cfg.root().child(2);
    let (tau_hot, tau_cold) = (T::lit(cfg.tau_hot), T::lit(cfg.tau_cold));
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let stream = batches.child(iter as u64);
        let mut rng = stream.child(0).rng();
        let indices = rand::seq::index::sample(&mut rng, base.len(), cfg.batch_size).into_vec();
        let batch = augment_batch(base, &indices, stream.child(1), &cfg.augment)?;
        let acc = batch_accuracy_lambda(teacher, &batch)?;
        let (weights, lambda): (PairWeights<T>, T) = match cfg.loss {
            LossKind::Sacl => {
                let sim = structural_similarity(teacher, &batch, tau_hot)?;
                let lambda = match cfg.lambda {
                    LambdaMode::Adaptive => acc,
                    LambdaMode::Fixed(l) => T::lit(l),
                };
                (pair_weights(&sim, batch.labels(), batch.homolog(), lambda)?, lambda)
            }
            LossKind::Cl => (cl_weights(batch.homolog())?, T::zero()),
            LossKind::Scl => (scl_weights(batch.labels())?, T::one()),
        };
        let (cache, features) = encoder.forward(batch.views())?;
        let embedded = EmbeddingBatch::new(features, batch.labels().to_vec(), batch.homolog().to_vec())
            .map_err(|e| Error::Training {
                iteration: iter,
                message: e.to_string(),
            })?;
        let (report, grad_e) = sacl_loss_and_grad(&embedded, &weights, tau_cold).map_err(|e| {
            Error::Training {
                iteration: iter,
                message: e.to_string(),
            }
        })?;
        let loss = report.total / T::from_usize_lossy(embedded.len());
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: iter,
                message: format!("loss became {loss}"),
            });
        }
        let grad_f = embedding_grad_to_features(&embedded, &grad_e)?;
        let grads = encoder.backward(&cache, &grad_f)?;
        opt.step(&mut encoder.params_mut(), &grads.slices())?;
        if !encoder.is_finite() {
            return Err(Error::Training {
                iteration: iter,
                message: "encoder parameters became non-finite".into(),
            });
        }
        log.push(TrainLogRow {
            iter,
            loss: loss.to_f64_lossy(),
            lambda: lambda.to_f64_lossy(),
            teacher_batch_acc: acc.to_f64_lossy(),
        });
        observer(iter + 1, &encoder)?;
    }
    Ok(TrainOutcome { encoder, log })
}

pub fn write_train_log(log: &[TrainLogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iter,loss,lambda,teacher_batch_acc")?;
    for r in log {
        writeln!(out, "{},{},{},{}", r.iter, r.loss, r.lambda, r.teacher_batch_acc)?;
    }
    out.flush()
}
