//! Empirical checks of the alignment/uniformity decomposition of the
//! per-anchor loss on mixtures of directional clusters.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::numerics::l2_normalize;
use crate::rng::{gaussian, RngStream};
use crate::sacl::anchor_terms;
use crate::scalar::Scalar;

/// Unit-norm samples with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereMixture<T> {
    embeddings: Matrix<T>,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl<T: Scalar> SphereMixture<T> {
    /// Normalizes every row; labels must lie below `class_count`.
    pub fn new(embeddings: Matrix<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::shape(format!("{} labels", embeddings.rows()), labels.len()));
        }
        let mut unit = Matrix::zeros(embeddings.rows(), embeddings.cols());
        for (r, row) in embeddings.row_iter().enumerate() {
            unit.row_mut(r).copy_from_slice(&l2_normalize(row)?);
        }
        let mut counts = vec![0; class_count];
        for &y in &labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::shape(format!("labels below {class_count}"), y))? += 1;
        }
        Ok(Self {
            embeddings: unit,
            labels,
            counts,
        })
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameters of a mixture of `proportions.len()` directional clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureFamily {
    pub proportions: Vec<f64>,
    pub dim: usize,
    /// Noise is `N(0, I / concentration²)` before normalization; infinity means none.
    pub concentration: f64,
}

impl MixtureFamily {
    /// Equal proportions over `classes`.
    pub fn balanced(classes: usize, dim: usize, concentration: f64) -> Self {
        Self {
            proportions: vec![1.0 / classes as f64; classes],
            dim,
            concentration,
        }
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.proportions.iter().sum();
        if self.proportions.is_empty()
            || self.proportions.iter().any(|&p| !(p > 0.0 && p.is_finite()))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "class proportions {:?} must be positive and sum to 1",
                self.proportions
            )));
        }
        if self.dim == 0 || !(self.concentration > 0.0) {
            return Err(Error::config("dimension and concentration must be positive"));
        }
        Ok(())
    }

    /// Class means are random unit vectors; labels are drawn independently
    /// from the proportions.
    pub fn sample<T: Scalar>(&self, n: usize, rng: RngStream) -> Result<SphereMixture<T>> {
        self.validate()?;
        let k = self.proportions.len();
        if n < k {
            return Err(Error::config(format!("{n} samples for {k} classes")));
        }
        let mut rng = rng.rng();
        let d = self.dim;
        let mut means = Matrix::zeros(k, d);
        for c in 0..k {
            let v: Vec<T> = (0..d).map(|_| gaussian::<T>(&mut rng)).collect();
            means.row_mut(c).copy_from_slice(&l2_normalize(&v)?);
        }
        let dist = WeightedIndex::new(&self.proportions).map_err(|e| Error::config(e.to_string()))?;
        let sigma = T::lit(1.0 / self.concentration);
        let mut x = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let y = dist.sample(&mut rng);
            labels.push(y);
            for (v, &m) in x.row_mut(r).iter_mut().zip(means.row(y)) {
                *v = if sigma > T::zero() {
                    m + sigma * gaussian::<T>(&mut rng)
                } else {
                    m
                };
            }
        }
        SphereMixture::new(x, labels, k)
    }
}

pub fn sample_sphere_mixture<T: Scalar>(
    proportions: &[f64],
    dim: usize,
    concentration: f64,
    n: usize,
    rng: RngStream,
) -> Result<SphereMixture<T>> {
    MixtureFamily {
        proportions: proportions.to_vec(),
        dim,
        concentration,
    }
    .sample(n, rng)
}

/// Deviation `c / n_k^{1+δ}` of near-perfect pair weights.
pub fn consistency_epsilon(n_k: usize, delta: f64, c: f64) -> Result<f64> {
    if !(delta > 0.0) || !(c > 0.0) || n_k == 0 {
        return Err(Error::config(format!("need delta > 0, c > 0, n_k > 0 (got {delta}, {c}, {n_k})")));
    }
    let eps = c / (n_k as f64).powf(1.0 + delta);
    if eps >= 1.0 {
        return Err(Error::config(format!("deviation {eps} must be below 1")));
    }
    Ok(eps)
}

/// `1 − ε` for same-label samples, `ε` otherwise, 0 at the anchor.
pub fn consistency_weights<T: Scalar>(
    labels: &[usize],
    anchor: usize,
    n_k: usize,
    delta: f64,
    c: f64,
) -> Result<Vec<T>> {
    let eps = consistency_epsilon(n_k, delta, c)?;
    let y = *labels
        .get(anchor)
        .ok_or_else(|| Error::shape(format!("anchor < {}", labels.len()), anchor))?;
    let (same, other) = (T::lit(1.0 - eps), T::lit(eps));
    Ok(labels
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            if j == anchor {
                T::zero()
            } else if l == y {
                same
            } else {
                other
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremEstimate<T> {
    pub anchor: usize,
    /// `L_i − log n`.
    pub lhs: T,
    /// `−mean_{a same class} ⟨e_i, e_a⟩/τ`.
    pub alignment: T,
    /// `log mean_{a ≠ i} exp(⟨e_i, e_a⟩/τ)`.
    pub uniformity: T,
    pub error: T,
    /// `|Σ_{a other class} w̃_ia L_ia| / |L_i|`.
    pub cross_class_share: T,
}

/// Decomposition at one anchor, with consistency weights `δ = 1`, `c = 1`.
pub fn alignment_uniformity<T: Scalar>(mixture: &SphereMixture<T>, anchor: usize, tau: T) -> Result<TheoremEstimate<T>> {
    alignment_uniformity_with(mixture, anchor, tau, 1.0, 1.0)
}

pub fn alignment_uniformity_with<T: Scalar>(
    mixture: &SphereMixture<T>,
    anchor: usize,
    tau: T,
    delta: f64,
    c: f64,
) -> Result<TheoremEstimate<T>> {
    let n = mixture.len();
    if anchor >= n {
        return Err(Error::shape(format!("anchor < {n}"), anchor));
    }
    let y = mixture.labels[anchor];
    let n_k = mixture.counts[y];
    if n_k < 2 {
        return Err(Error::protocol(format!("anchor {anchor} is alone in class {y}")));
    }
    let e = mixture.embeddings();
    let w = consistency_weights::<T>(&mixture.labels, anchor, n_k, delta, c)?;
    let terms = anchor_terms(e, anchor, &w, tau)?;
    let (mut pos, mut all) = (T::zero(), Vec::with_capacity(n - 1));
    let mut cross = T::zero();
    for j in 0..n {
        if j == anchor {
            continue;
        }
        let s = dot(e.row(anchor), e.row(j)) / tau;
        all.push(s);
        if mixture.labels[j] == y {
            pos += s;
        } else {
            cross += terms.weights[j] * terms.pair_losses[j];
        }
    }
    let alignment = -pos / T::from_usize_lossy(n_k - 1);
    let uniformity = crate::numerics::log_sum_exp(&all) - T::from_usize_lossy(n - 1).ln();
    let lhs = terms.loss - T::from_usize_lossy(n).ln();
    let error = (lhs - (alignment + uniformity)).abs();
    let cross_class_share = if terms.loss == T::zero() {
        T::zero()
    } else {
        (cross / terms.loss).abs()
    };
    Ok(TheoremEstimate {
        anchor,
        lhs,
        alignment,
        uniformity,
        error,
        cross_class_share,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub rep: usize,
    pub estimate: TheoremEstimate<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudySummary {
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<StudySummary>,
    /// Median error strictly decreases along the sample sizes.
    pub monotone: bool,
    /// Least-squares slope of `ln(median error)` against `n`.
    pub log_error_slope: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// For each `n`, `reps` independent mixtures, each measured at a random anchor
/// whose class has at least two members. Repetition `r` at size index `s`
/// draws from `rng.child(s).child(r)`.
pub fn convergence_study(
    family: &MixtureFamily,
    sizes: &[usize],
    reps: usize,
    tau: f64,
    rng: RngStream,
) -> Result<ConvergenceStudy> {
    if reps < 5 {
        return Err(Error::config(format!("need at least 5 repetitions, got {reps}")));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(format!("sample sizes {sizes:?} must be increasing")));
    }
    let mut rows = Vec::with_capacity(sizes.len() * reps);
    let mut summary = Vec::with_capacity(sizes.len());
    for (s, &n) in sizes.iter().enumerate() {
        let block = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let stream = rng.child(s as u64).child(rep as u64);
                let mixture: SphereMixture<f64> = family.sample(n, stream.child(0))?;
                let eligible: Vec<usize> = (0..n)
                    .filter(|&i| mixture.counts[mixture.labels[i]] >= 2)
                    .collect();
                if eligible.is_empty() {
                    return Err(Error::protocol(format!("no class with two members at n = {n}")));
                }
                let anchor = eligible[stream.child(1).rng().random_range(0..eligible.len())];
                Ok(StudyRow {
                    n,
                    rep,
                    estimate: alignment_uniformity(&mixture, anchor, tau)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut errors: Vec<f64> = block.iter().map(|r| r.estimate.error).collect();
        errors.sort_by(f64::total_cmp);
        summary.push(StudySummary {
            n,
            median: quantile(&errors, 0.5),
            iqr: quantile(&errors, 0.75) - quantile(&errors, 0.25),
        });
        rows.extend(block);
    }
    let monotone = summary.windows(2).all(|w| w[1].median < w[0].median);
    let xs: Vec<f64> = summary.iter().map(|s| s.n as f64).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.median.max(f64::MIN_POSITIVE).ln()).collect();
    Ok(ConvergenceStudy {
        rows,
        summary,
        monotone,
        log_error_slope: slope(&xs, &ys),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_weight_arithmetic() {
        let w: Vec<f64> = consistency_weights(&[0, 0, 1, 0], 0, 10, 1.0, 1.0).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.99).abs() < 1e-15 && (w[3] - 0.99).abs() < 1e-15);
        assert!((w[2] - 0.01).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for n_k in [100, 1000, 10000] {
            let scaled = n_k as f64 * consistency_epsilon(n_k, 1.0, 1.0).unwrap();
            assert!(scaled < prev);
            prev = scaled;
        }
        assert!(prev <= 1e-4);
        assert!(matches!(consistency_epsilon(1, 1.0, 2.0), Err(Error::Config(_))));
        assert!(matches!(consistency_epsilon(10, 0.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn identical_embeddings() {
        let n = 50;
        let x = Matrix::from_rows(&vec![vec![0.0, 2.0, 0.0]; n]).unwrap();
        let m = SphereMixture::new(x, vec![0; n], 1).unwrap();
        let tau = 0.5f64;
        let est = alignment_uniformity(&m, 3, tau).unwrap();
        assert!((est.alignment + 1.0 / tau).abs() < 1e-12);
        assert!((est.uniformity - 1.0 / tau).abs() < 1e-12);
        let expected = (((n - 1) as f64) / n as f64).ln().abs();
        assert!((est.error - expected).abs() < 1e-12);
    }

    #[test]
    fn point_mass_clusters() {
        let fam = MixtureFamily::balanced(3, 4, f64::INFINITY);
        let m: SphereMixture<f64> = fam.sample(30, RngStream::new(1, 0)).unwrap();
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..30).filter(|&i| m.labels()[i] == c).map(|i| m.embeddings().row(i)).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
        let one: SphereMixture<f64> = sample_sphere_mixture(&[1.0], 4, 2.0, 20, RngStream::new(2, 0)).unwrap();
        assert!(one.labels().iter().all(|&y| y == 0));
    }

    #[test]
    fn invalid_mixtures() {
        let r = RngStream::new(0, 0);
        assert!(matches!(sample_sphere_mixture::<f64>(&[0.5, 0.6], 3, 1.0, 10, r), Err(Error::Config(_))));
        assert!(matches!(sample_sphere_mixture::<f64>(&[1.0, 0.0], 3, 1.0, 10, r), Err(Error::Config(_))));
        let m = SphereMixture::new(Matrix::identity(3), vec![0, 1, 1], 2).unwrap();
        assert!(matches!(alignment_uniformity(&m, 0, 1.0), Err(Error::Protocol(_))));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), 2.0);
    }
}
