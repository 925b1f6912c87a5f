//! Structure-aware contrastive loss.
//!
//! For a batch of unit embeddings `e_i`, candidate set `A(i)` (every index but
//! `i`) and anchor-normalized pair weights `w̃_ij`:
//!
//! ```text
//! L_ij = ⟨e_i, e_j⟩/τ − log Σ_{j'∈A(i)} exp(⟨e_i, e_j'⟩/τ)
//! L_i  = −Σ_{j∈A(i)} w̃_ij L_ij          (≥ 0)
//! L    = Σ_i L_i
//! ```
//!
//! Raw weights are 1 for the homologous view and `λ · S_b(j, y_i)` otherwise.
//! CL and SCL are the same loss under homolog-only and same-label binary weights.
//!
//! Gradients are exact and cover every appearance of each embedding (as anchor,
//! as positive and inside other anchors' partition functions). With
//! `F_ij = softmax_j(⟨e_i, e_j⟩/τ)` and `G_ij = (F_ij − w̃_ij)/τ` for `j ≠ i`:
//!
//! ```text
//! ∂L/∂e_k = Σ_j G_kj e_j + Σ_i G_ik e_i
//! ∂L/∂f_k = (I − e_k e_kᵀ)/||f_k|| · ∂L/∂e_k
//! ```

use crate::data::check_homolog;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::numerics::{l2_normalize, log_sum_exp, norm, normalize_jacobian};
use crate::scalar::Scalar;
use crate::teacher::SimilarityMatrix;

/// Raw features and their L2-normalized embeddings for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    features: Matrix<T>,
    embeddings: Matrix<T>,
    norms: Vec<T>,
    labels: Vec<usize>,
    homolog: Option<Vec<usize>>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    /// Normalizes `features` row-wise. `homolog` must be a fixed-point-free,
    /// label-preserving involution.
    pub fn new(features: Matrix<T>, labels: Vec<usize>, homolog: Vec<usize>) -> Result<Self> {
        if homolog.len() != features.rows() {
            return Err(Error::shape(
                format!("{} homolog entries", features.rows()),
                homolog.len(),
            ));
        }
        let mut batch = Self::without_homologs(features, labels)?;
        check_homolog(&homolog, Some(&batch.labels))?;
        batch.homolog = Some(homolog);
        Ok(batch)
    }

    /// A batch with labels only, e.g. samples from a mixture with no augmented views.
    pub fn without_homologs(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                format!("{} labels", features.rows()),
                labels.len(),
            ));
        }
        if !features.is_finite() {
            return Err(Error::numeric("embedding batch contains non-finite features"));
        }
        let mut embeddings = Matrix::zeros(features.rows(), features.cols());
        let mut norms = Vec::with_capacity(features.rows());
        for (r, f) in features.row_iter().enumerate() {
            embeddings.row_mut(r).copy_from_slice(&l2_normalize(f)?);
            norms.push(norm(f));
        }
        Ok(Self {
            features,
            embeddings,
            norms,
            labels,
            homolog: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn homolog(&self) -> Option<&[usize]> {
        self.homolog.as_deref()
    }
}

/// Raw pair weights and their per-anchor normalization. Diagonal entries are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights<T> {
    raw: Matrix<T>,
    normalized: Matrix<T>,
    lambda: Option<T>,
}

impl<T: Scalar> PairWeights<T> {
    /// Normalizes each row over `j ≠ i`. Off-diagonal entries must be finite
    /// and non-negative, and every row needs positive mass.
    pub fn from_raw(raw: Matrix<T>) -> Result<Self> {
        let n = raw.rows();
        if raw.cols() != n {
            return Err(Error::shape("square weight matrix", format!("{}x{}", n, raw.cols())));
        }
        let mut normalized = Matrix::zeros(n, n);
        for i in 0..n {
            let row = raw.row(i);
            let mut total = T::zero();
            for (j, &w) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                if !(w >= T::zero()) || !w.is_finite() {
                    return Err(Error::config(format!("weight ({i}, {j}) = {w} is invalid")));
                }
                total += w;
            }
            if !(total > T::zero()) {
                return Err(Error::protocol(format!("anchor {i} has no positive weight")));
            }
            for (j, &w) in row.iter().enumerate() {
                if j != i {
                    normalized[(i, j)] = w / total;
                }
            }
        }
        Ok(Self {
            raw,
            normalized,
            lambda: None,
        })
    }

    pub fn raw(&self) -> &Matrix<T> {
        &self.raw
    }

    /// `w̃_ij`; zero on the diagonal.
    pub fn normalized(&self) -> &Matrix<T> {
        &self.normalized
    }

    pub fn lambda(&self) -> Option<T> {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }
}

/// `w_ij = 1` for `j = h(i)`, otherwise `λ · S_b(j, y_i)`.
pub fn pair_weights<T: Scalar>(
    similarity: &SimilarityMatrix<T>,
    labels: &[usize],
    homolog: &[usize],
    lambda: T,
) -> Result<PairWeights<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    let s = similarity.rows();
    let n = labels.len();
    if homolog.len() != n || s.rows() != n {
        return Err(Error::shape(
            format!("{n} views in labels, homolog map and similarity rows"),
            format!("{} homolog entries, {} similarity rows", homolog.len(), s.rows()),
        ));
    }
    check_homolog(homolog, Some(labels))?;
    if let Some(&y) = labels.iter().find(|&&y| y >= s.cols()) {
        return Err(Error::shape(format!("labels below {}", s.cols()), format!("label {y}")));
    }
    let mut raw = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            raw[(i, j)] = if j == homolog[i] {
                T::one()
            } else {
                lambda * s[(j, labels[i])]
            };
        }
    }
    let mut w = PairWeights::from_raw(raw)?;
    w.lambda = Some(lambda);
    Ok(w)
}

/// Homolog-only weights (CL).
pub fn cl_weights<T: Scalar>(homolog: &[usize]) -> Result<PairWeights<T>> {
    check_homolog(homolog, None)?;
    let n = homolog.len();
    let mut raw = Matrix::zeros(n, n);
    for (i, &h) in homolog.iter().enumerate() {
        raw[(i, h)] = T::one();
    }
    PairWeights::from_raw(raw)
}

/// Binary same-label weights (SCL).
pub fn scl_weights<T: Scalar>(labels: &[usize]) -> Result<PairWeights<T>> {
    let n = labels.len();
    let mut raw = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                raw[(i, j)] = T::one();
            }
        }
    }
    PairWeights::from_raw(raw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub per_anchor: Vec<T>,
    /// `L_ij`, zero on the diagonal; only kept on request.
    pub pairs: Option<Matrix<T>>,
}

/// One anchor's loss pieces over the whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTerms<T> {
    pub loss: T,
    /// `log Σ_{j∈A(i)} exp(⟨e_i, e_j⟩/τ)`.
    pub log_partition: T,
    /// `L_ij`, zero at the anchor.
    pub pair_losses: Vec<T>,
    /// `w̃_ij`, zero at the anchor.
    pub weights: Vec<T>,
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// Loss terms for a single anchor given its raw weight row. Costs `O(n·d)`,
/// so it also serves batches far too large for a dense weight matrix.
pub fn anchor_terms<T: Scalar>(
    embeddings: &Matrix<T>,
    anchor: usize,
    raw_weights: &[T],
    tau: T,
) -> Result<AnchorTerms<T>> {
    check_tau(tau)?;
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::protocol("contrastive loss needs at least 2 samples"));
    }
    if anchor >= n || raw_weights.len() != n {
        return Err(Error::shape(
            format!("anchor < {n} and {n} weights"),
            format!("anchor {anchor}, {} weights", raw_weights.len()),
        ));
    }
    let e_i = embeddings.row(anchor);
    let logits: Vec<T> = (0..n)
        .map(|j| {
            if j == anchor {
                T::neg_infinity()
            } else {
                dot(e_i, embeddings.row(j)) / tau
            }
        })
        .collect();
    let log_partition = log_sum_exp(&logits);
    let total: T = raw_weights
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(_, &w)| w)
        .sum();
    if !(total > T::zero()) {
        return Err(Error::protocol(format!("anchor {anchor} has no positive weight")));
    }
    let mut pair_losses = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let mut loss = T::zero();
    for j in 0..n {
        if j == anchor {
            continue;
        }
        pair_losses[j] = logits[j] - log_partition;
        weights[j] = raw_weights[j] / total;
        loss -= weights[j] * pair_losses[j];
    }
    Ok(AnchorTerms {
        loss,
        log_partition,
        pair_losses,
        weights,
    })
}

fn check_inputs<T: Scalar>(batch: &EmbeddingBatch<T>, weights: &PairWeights<T>, tau: T) -> Result<()> {
    check_tau(tau)?;
    if batch.len() < 2 {
        return Err(Error::protocol(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    if weights.len() != batch.len() {
        return Err(Error::shape(
            format!("{0}x{0} weights", batch.len()),
            format!("{0}x{0}", weights.len()),
        ));
    }
    Ok(())
}

/// Evaluates the loss and, optionally, the embedding gradient in one pass.
fn evaluate<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau: T,
    retain_pairs: bool,
    want_grad: bool,
) -> Result<(LossReport<T>, Option<Matrix<T>>)> {
    check_inputs(batch, weights, tau)?;
    let e = batch.embeddings();
    let n = e.rows();
    let gram = e.matmul_nt(e)?;
    let wn = weights.normalized();
    let mut per_anchor = Vec::with_capacity(n);
    let mut pairs = retain_pairs.then(|| Matrix::zeros(n, n));
    // G_ij = (F_ij − w̃_ij)/τ
    let mut g = want_grad.then(|| Matrix::zeros(n, n));
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            logits[j] = if j == i {
                T::neg_infinity()
            } else {
                gram[(i, j)] / tau
            };
        }
        let lse = log_sum_exp(&logits);
        let mut li = T::zero();
        for j in 0..n {
            if j == i {
                continue;
            }
            let lij = logits[j] - lse;
            li -= wn[(i, j)] * lij;
            if let Some(p) = pairs.as_mut() {
                p[(i, j)] = lij;
            }
            if let Some(g) = g.as_mut() {
                g[(i, j)] = (lij.exp() - wn[(i, j)]) / tau;
            }
        }
        per_anchor.push(li);
    }
    let total = per_anchor.iter().copied().sum();
    if !T::is_finite(total) {
        return Err(Error::numeric(format!("contrastive loss is {total}")));
    }
    let grad = match g {
        Some(g) => {
            let mut grad = g.matmul(e)?;
            let back = g.matmul_tn(e)?;
            for (a, &b) in grad.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *a += b;
            }
            Some(grad)
        }
        None => None,
    };
    Ok((
        LossReport {
            total,
            per_anchor,
            pairs,
        },
        grad,
    ))
}

pub fn sacl_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau_cold: T,
    retain_pairs: bool,
) -> Result<LossReport<T>> {
    Ok(evaluate(batch, weights, tau_cold, retain_pairs, false)?.0)
}

/// Loss together with `∂L/∂e` (rows match the batch).
pub fn sacl_loss_and_grad<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau_cold: T,
) -> Result<(LossReport<T>, Matrix<T>)> {
    let (report, grad) = evaluate(batch, weights, tau_cold, false, true)?;
    Ok((report, grad.expect("gradient requested")))
}

pub fn sacl_grad_embeddings<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau_cold: T,
) -> Result<Matrix<T>> {
    Ok(sacl_loss_and_grad(batch, weights, tau_cold)?.1)
}

/// Pulls an embedding gradient back through the normalization of each row.
pub fn embedding_grad_to_features<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    grad_embeddings: &Matrix<T>,
) -> Result<Matrix<T>> {
    if grad_embeddings.shape() != batch.features().shape() {
        return Err(Error::shape(
            format!("{:?}", batch.features().shape()),
            format!("{:?}", grad_embeddings.shape()),
        ));
    }
    let mut out = Matrix::zeros(batch.len(), batch.features().cols());
    for (r, f) in batch.features().row_iter().enumerate() {
        // the Jacobian is symmetric, so J·g equals gᵀ·J
        let j = normalize_jacobian(f)?;
        out.row_mut(r).copy_from_slice(&j.mul_vec(grad_embeddings.row(r))?);
    }
    Ok(out)
}

/// `∂L/∂f`, the gradient with respect to the raw (unnormalized) features.
pub fn sacl_grad_features<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau_cold: T,
) -> Result<Matrix<T>> {
    let ge = sacl_grad_embeddings(batch, weights, tau_cold)?;
    embedding_grad_to_features(batch, &ge)
}

/// `∂L_i/∂e_i` holding every other embedding fixed:
/// `(1/τ) Σ_{j∈A(i)} (F_ij − w̃_ij) e_j`.
pub fn anchor_gradient<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    weights: &PairWeights<T>,
    tau_cold: T,
    anchor: usize,
) -> Result<Vec<T>> {
    check_inputs(batch, weights, tau_cold)?;
    let e = batch.embeddings();
    let terms = anchor_terms(e, anchor, weights.raw().row(anchor), tau_cold)?;
    let mut g = vec![T::zero(); e.cols()];
    for j in 0..e.rows() {
        if j == anchor {
            continue;
        }
        let coef = (terms.pair_losses[j].exp() - terms.weights[j]) / tau_cold;
        for (gk, &x) in g.iter_mut().zip(e.row(j)) {
            *gk += coef * x;
        }
    }
    Ok(g)
}

/// Self-supervised contrastive loss: the homolog is the only positive.
pub fn cl_loss<T: Scalar>(batch: &EmbeddingBatch<T>, tau_cold: T) -> Result<LossReport<T>> {
    let homolog = batch
        .homolog()
        .ok_or_else(|| Error::protocol("CL needs a homolog map"))?;
    sacl_loss(batch, &cl_weights(homolog)?, tau_cold, false)
}

/// Supervised contrastive loss: every same-label sample is an equally weighted positive.
pub fn scl_loss<T: Scalar>(batch: &EmbeddingBatch<T>, tau_cold: T) -> Result<LossReport<T>> {
    sacl_loss(batch, &scl_weights(batch.labels())?, tau_cold, false)
}

/// Hard-positive gradient magnitude for one anchor, with positive pairs
/// weighted `k` times the negative ones:
/// `k Σ_{a∈P} exp(⟨e_i,e_a⟩/τ) + k Σ_{a∈N} exp(⟨e_i,e_a⟩/τ) − (|P|k + |N|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardPositiveDiagnostic<T> {
    pub k: T,
    pub positives: usize,
    pub negatives: usize,
    pub value: T,
}

pub fn hard_positive_magnitude<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    anchor: usize,
    k: T,
    tau: T,
) -> Result<HardPositiveDiagnostic<T>> {
    check_tau(tau)?;
    if !(k >= T::one()) || !k.is_finite() {
        return Err(Error::config(format!("multiple k = {k} must be at least 1")));
    }
    if anchor >= batch.len() {
        return Err(Error::shape(format!("anchor < {}", batch.len()), anchor));
    }
    let e = batch.embeddings();
    let y = batch.labels()[anchor];
    let (mut pos_sum, mut neg_sum) = (T::zero(), T::zero());
    let (mut positives, mut negatives) = (0, 0);
    for j in 0..batch.len() {
        if j == anchor {
            continue;
        }
        let x = (dot(e.row(anchor), e.row(j)) / tau).exp();
        if batch.labels()[j] == y {
            pos_sum += x;
            positives += 1;
        } else {
            neg_sum += x;
            negatives += 1;
        }
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::protocol(format!(
            "anchor {anchor} needs both positives and negatives ({positives}, {negatives})"
        )));
    }
    let w = T::from_usize_lossy(positives) * k + T::from_usize_lossy(negatives);
    Ok(HardPositiveDiagnostic {
        k,
        positives,
        negatives,
        value: k * pos_sum + k * neg_sum - w,
    })
}
