#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use sacl_core::data::{generate_clusters, split_by_classes, ClusterGeometry, LabeledFeatureSet};
use sacl_core::rng::StreamRng;
use sacl_core::sacl::EmbeddingBatch;
use sacl_core::teacher::SimilarityMatrix;
use sacl_core::{Matrix, RngStream};

pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Views `2i` and `2i + 1` are homologous and share a label drawn from `classes`.
pub fn paired_labels(rng: &mut StreamRng, views: usize, classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = Vec::with_capacity(views);
    let mut homolog = Vec::with_capacity(views);
    for i in 0..views / 2 {
        let y = rng.random_range(0..classes);
        labels.extend([y, y]);
        homolog.extend([2 * i + 1, 2 * i]);
    }
    (labels, homolog)
}

/// Rows are `softmax(z / 2.5)` with logits `z ~ N(0, 9)`, roughly as peaked
/// as a trained teacher's posteriors.
pub fn random_similarity(rng: &mut StreamRng, views: usize, classes: usize) -> SimilarityMatrix<f64> {
    let mut rows = gaussian_matrix(rng, views, classes);
    for r in 0..views {
        let row = rows.row_mut(r);
        for v in row.iter_mut() {
            *v *= 3.0 / 2.5;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
    SimilarityMatrix::from_rows(rows, 2.5).unwrap()
}

pub fn one_hot_similarity(labels: &[usize], classes: usize) -> SimilarityMatrix<f64> {
    let mut rows = Matrix::zeros(labels.len(), classes);
    for (r, &y) in labels.iter().enumerate() {
        rows[(r, y)] = 1.0;
    }
    SimilarityMatrix::from_rows(rows, 1.0).unwrap()
}

pub struct Problem {
    pub batch: EmbeddingBatch<f64>,
    pub labels: Vec<usize>,
    pub homolog: Vec<usize>,
    pub similarity: SimilarityMatrix<f64>,
}

pub fn random_problem(seed: u64, views: usize, dim: usize, classes: usize) -> Problem {
    let mut rng = RngStream::new(seed, 99).rng();
    let features = gaussian_matrix(&mut rng, views, dim);
    let (labels, homolog) = paired_labels(&mut rng, views, classes);
    let similarity = random_similarity(&mut rng, views, classes);
    let batch = EmbeddingBatch::new(features, labels.clone(), homolog.clone()).unwrap();
    Problem {
        batch,
        labels,
        homolog,
        similarity,
    }
}

/// Per-anchor losses written out term by term from normalized weights;
/// embeddings are used as given (no normalization).
pub fn direct_anchor_losses(e: &Matrix<f64>, weights: &Matrix<f64>, tau: f64) -> Vec<f64> {
    let n = e.rows();
    let dot = |a: usize, b: usize| -> f64 { e.row(a).iter().zip(e.row(b)).map(|(x, y)| x * y).sum() };
    (0..n)
        .map(|i| {
            let mut z = 0.0;
            for k in 0..n {
                if k != i {
                    z += (dot(i, k) / tau).exp();
                }
            }
            let mut li = 0.0;
            for j in 0..n {
                if j != i {
                    let p = (dot(i, j) / tau).exp() / z;
                    li -= weights[(i, j)] * p.ln();
                }
            }
            li
        })
        .collect()
}

pub fn direct_loss(e: &Matrix<f64>, weights: &Matrix<f64>, tau: f64) -> f64 {
    direct_anchor_losses(e, weights, tau).iter().sum()
}

pub fn normalize_rows(f: &Matrix<f64>) -> Matrix<f64> {
    let mut out = f.clone();
    for r in 0..f.rows() {
        let n = f.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    out
}

/// Central differences of a sum of terms `f(x) = Σ_t f_t(x)` at every entry
/// of `x`. Terms are differenced one by one before summing, which keeps
/// cancellation error at the scale of a single term.
pub fn finite_difference(f: impl Fn(&Matrix<f64>) -> Vec<f64>, x: &Matrix<f64>, h: f64) -> Matrix<f64> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let v = x.as_slice()[k];
        probe.as_mut_slice()[k] = v + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = v - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = v;
        out.as_mut_slice()[k] = up.iter().zip(&down).map(|(a, b)| a - b).sum::<f64>() / (2.0 * h);
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Base/novel split of a small confusable-cluster problem.
pub fn small_clusters(seed: u64, per_class: usize) -> (LabeledFeatureSet<f64>, LabeledFeatureSet<f64>) {
    let geo = ClusterGeometry {
        dim: 16,
        signal_dim: 6,
        class_count: 10,
        confusable: vec![(0, 7)],
        angle: 0.15,
        stddev: 0.4,
    };
    let root = RngStream::new(seed, 7);
    let spec = geo.build::<f64>(root.child(0)).unwrap();
    let all = generate_clusters(&spec, per_class, root.child(1)).unwrap();
    split_by_classes(&all, &[5, 6, 7, 8, 9]).unwrap()
}
