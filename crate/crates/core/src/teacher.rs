//! Base path: a linear softmax classifier trained with cross-entropy on the
//! base classes, frozen after training. Its temperature-smoothed posteriors on
//! augmented views form the structural similarity matrix, and its accuracy on
//! a batch is the adaptive weight λ.

use std::io::{Read, Write};

use rand::seq::SliceRandom;

use crate::data::{AugmentedBatch, LabeledFeatureSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{argmax, log_sum_exp, softmax_with_temperature};
use crate::rng::{gaussian, RngStream};
use crate::scalar::Scalar;
use crate::training::{AdamConfig, OptimizerState};

const TEACHER_MAGIC: &[u8; 8] = b"SACLTCH1";

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel<T> {
    /// `C_b × D`.
    weights: Matrix<T>,
    bias: Vec<T>,
    frozen: bool,
}

impl<T: Scalar> TeacherModel<T> {
    /// A frozen model with the given parameters.
    pub fn from_parameters(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(
                format!("{} biases", weights.rows()),
                format!("{}", bias.len()),
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::numeric("teacher parameters must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            frozen: true,
        })
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Logits for each row of `x`.
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                format!("inputs of dimension {}", self.dim()),
                format!("dimension {}", x.cols()),
            ));
        }
        let mut z = x.matmul_nt(&self.weights)?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.row_iter().map(argmax).collect())
    }

    /// Fraction of samples whose argmax logit equals the label.
    pub fn accuracy(&self, set: &LabeledFeatureSet<T>) -> Result<T> {
        let preds = self.predict(set.features())?;
        Ok(fraction_correct(&preds, set.labels()))
    }

    /// `SACLTCH1`, u32 C_b, u32 D, then weights (row-major) and biases as f64, little-endian.
    pub fn write_checkpoint(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(TEACHER_MAGIC)?;
        out.write_all(&(self.class_count() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &w in self.weights.as_slice() {
            out.write_all(&w.to_f64_lossy().to_le_bytes())?;
        }
        for &b in &self.bias {
            out.write_all(&b.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic)?;
        if &magic != TEACHER_MAGIC {
            return Err(Error::Checkpoint("not a teacher checkpoint (bad magic)".into()));
        }
        let classes = read_u32(&mut input)? as usize;
        let dim = read_u32(&mut input)? as usize;
        let weights = read_f64s(&mut input, classes * dim)?;
        let bias = read_f64s(&mut input, classes)?;
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Self::from_parameters(Matrix::from_vec(classes, dim, weights)?, bias)
    }
}

pub(crate) fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

pub(crate) fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<T: Scalar>(input: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(input, &mut b)?;
        out.push(T::lit(f64::from_le_bytes(b)));
    }
    Ok(out)
}

fn fraction_correct<T: Scalar>(preds: &[usize], labels: &[usize]) -> T {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(labels.len().max(1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

/// Mini-batch Adam on softmax cross-entropy over un-augmented base samples.
/// Weights start at `N(0, 0.01²)`, biases at zero.
pub fn train_teacher<T: Scalar>(
    base: &LabeledFeatureSet<T>,
    cfg: &TeacherConfig,
    rng: RngStream,
) -> Result<TeacherModel<T>> {
    if base.is_empty() {
        return Err(Error::config("teacher needs a non-empty base set"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::config(format!("invalid teacher config {cfg:?}")));
    }
    let (c, d) = (base.class_count(), base.dim());
    let mut rng = rng.rng();
    let mut weights = Matrix::zeros(c, d);
    for w in weights.as_mut_slice() {
        *w = T::lit(0.01) * gaussian::<T>(&mut rng);
    }
    let mut model = TeacherModel {
        weights,
        bias: vec![T::zero(); c],
        frozen: false,
    };
    let mut opt = OptimizerState::new(&[c * d, c], AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let x = base.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| base.labels()[i]).collect();
            let (loss, gw, gb) = cross_entropy_grad(&model, &x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: step,
                    message: format!("teacher loss became {loss}"),
                });
            }
            let mut params = [model.weights.as_mut_slice(), model.bias.as_mut_slice()];
            opt.step(&mut params, &[gw.as_slice(), &gb])?;
        }
    }
    model.frozen = true;
    Ok(model)
}

/// Mean cross-entropy and its gradients with respect to weights and biases.
fn cross_entropy_grad<T: Scalar>(
    model: &TeacherModel<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Matrix<T>, Vec<T>)> {
    let mut z = model.logits(x)?;
    let n = T::from_usize_lossy(labels.len());
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = z.row_mut(r);
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[y] -= T::one() / n;
    }
    let gw = z.matmul_tn(x)?;
    let mut gb = vec![T::zero(); model.class_count()];
    for row in z.row_iter() {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((loss / n, gw, gb))
}

/// Row-stochastic matrix of teacher posteriors at temperature `tau_hot`, one
/// row per augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    rows: Matrix<T>,
    tau_hot: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    /// Wraps explicit posteriors; rows must be non-negative and sum to 1.
    pub fn from_rows(rows: Matrix<T>, tau_hot: T) -> Result<Self> {
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(64.0));
        for (i, r) in rows.row_iter().enumerate() {
            let s: T = r.iter().copied().sum();
            if (s - T::one()).abs() > tol || r.iter().any(|&p| !(p >= T::zero())) {
                return Err(Error::config(format!("similarity row {i} is not a distribution")));
            }
        }
        Ok(Self { rows, tau_hot })
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn tau_hot(&self) -> T {
        self.tau_hot
    }

    /// `S_b(n, c)`.
    pub fn get(&self, view: usize, class: usize) -> T {
        self.rows[(view, class)]
    }
}

fn require_frozen<T: Scalar>(model: &TeacherModel<T>) -> Result<()> {
    if !model.frozen {
        return Err(Error::protocol("teacher must be frozen before use"));
    }
    Ok(())
}

/// Row `n` is `softmax(g(x̃_n) / tau_hot)`.
pub fn structural_similarity<T: Scalar>(
    model: &TeacherModel<T>,
    batch: &AugmentedBatch<T>,
    tau_hot: T,
) -> Result<SimilarityMatrix<T>> {
    require_frozen(model)?;
    let z = model.logits(batch.views())?;
    let mut rows = Matrix::zeros(z.rows(), z.cols());
    for (r, logits) in z.row_iter().enumerate() {
        let p = softmax_with_temperature(logits, tau_hot)?;
        rows.row_mut(r).copy_from_slice(&p);
    }
    Ok(SimilarityMatrix { rows, tau_hot })
}

/// Teacher accuracy on the batch's augmented views, used as the adaptive λ.
pub fn batch_accuracy_lambda<T: Scalar>(
    model: &TeacherModel<T>,
    batch: &AugmentedBatch<T>,
) -> Result<T> {
    require_frozen(model)?;
    if batch.is_empty() {
        return Err(Error::protocol("cannot measure accuracy on an empty batch"));
    }
    let preds = model.predict(batch.views())?;
    Ok(fraction_correct(&preds, batch.labels()))
}
