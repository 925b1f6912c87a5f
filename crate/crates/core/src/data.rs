//! Labeled feature sets, the confusable-cluster generator, feature-vector
//! augmentation, CSV ingestion and base/novel splitting.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::numerics::norm;
use crate::rng::{gaussian, RngStream, StreamRng};
use crate::scalar::Scalar;

/// Samples as rows of a feature matrix with dense class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatureSet<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    classes: Vec<String>,
}

impl<T: Scalar> LabeledFeatureSet<T> {
    /// `classes[c]` names dense label `c`. Every class needs at least one sample.
    pub fn new(features: Matrix<T>, labels: Vec<usize>, classes: Vec<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                format!("{} labels", features.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        let mut counts = vec![0usize; classes.len()];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes.len() {
                return Err(Error::config(format!(
                    "label {y} of sample {i} is outside [0, {})",
                    classes.len()
                )));
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {} has no samples", classes[c])));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Source names of the dense labels.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[T], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Sample indices grouped by class, in ascending index order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count()];
        for (i, &y) in self.labels.iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    /// Keeps the listed classes, relabeled densely in the given order.
    pub fn restrict_to_classes(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![None; self.class_count()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.class_count() || remap[old].is_some() {
                return Err(Error::config(format!("invalid or repeated class {old}")));
            }
            remap[old] = Some(new);
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if let Some(new) = remap[y] {
                rows.push(i);
                labels.push(new);
            }
        }
        let classes = keep.iter().map(|&c| self.classes[c].clone()).collect();
        Self::new(self.features.select_rows(&rows), labels, classes)
    }
}

/// Pair of classes whose means are separated by a small angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusablePair {
    pub first: usize,
    pub second: usize,
    /// Radians, in (0, π].
    pub angle: f64,
}

/// Class means on the unit sphere plus isotropic within-class noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec<T> {
    means: Matrix<T>,
    stddev: T,
    confusable: Vec<ConfusablePair>,
}

impl<T: Scalar> ClusterSpec<T> {
    pub fn new(means: Matrix<T>, stddev: T, confusable: Vec<ConfusablePair>) -> Result<Self> {
        if means.rows() == 0 || means.cols() == 0 {
            return Err(Error::config("cluster spec needs at least one class and dimension"));
        }
        let eps = T::epsilon().to_f64_lossy();
        for (k, m) in means.row_iter().enumerate() {
            let n = norm(m).to_f64_lossy();
            if (n - 1.0).abs() > (1e-9f64).max(100.0 * eps) {
                return Err(Error::config(format!("mean of class {k} has norm {n}, expected 1")));
            }
        }
        // stddev = 0 is allowed: it yields point masses at the means
        if !(stddev >= T::zero()) || !stddev.is_finite() {
            return Err(Error::config(format!("within-class stddev {stddev} is invalid")));
        }
        for p in &confusable {
            if p.first >= means.rows() || p.second >= means.rows() || p.first == p.second {
                return Err(Error::config(format!("invalid confusable pair {p:?}")));
            }
            if !(p.angle > 0.0 && p.angle <= std::f64::consts::PI) {
                return Err(Error::config(format!("confusable angle {} outside (0, π]", p.angle)));
            }
            let c = dot(means.row(p.first), means.row(p.second)).to_f64_lossy();
            let actual = c.clamp(-1.0, 1.0).acos();
            if (actual - p.angle).abs() > (1e-6f64).max(1e4 * eps) {
                return Err(Error::config(format!(
                    "pair {p:?}: means are {actual} rad apart"
                )));
            }
        }
        Ok(Self {
            means,
            stddev,
            confusable,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn class_count(&self) -> usize {
        self.means.rows()
    }

    pub fn means(&self) -> &Matrix<T> {
        &self.means
    }

    pub fn stddev(&self) -> T {
        self.stddev
    }

    pub fn confusable(&self) -> &[ConfusablePair] {
        &self.confusable
    }
}

/// Recipe for a random [`ClusterSpec`].
///
/// All class means live in a random `signal_dim`-dimensional subspace of the
/// `dim`-dimensional input; the remaining directions carry only noise. When
/// `class_count <= signal_dim` the means are mutually orthogonal except for
/// the confusable pairs. For each pair `(a, b)` the mean of `b` is the mean of
/// `a` rotated by `angle` inside the subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterGeometry {
    pub dim: usize,
    pub signal_dim: usize,
    pub class_count: usize,
    pub confusable: Vec<(usize, usize)>,
    pub angle: f64,
    pub stddev: f64,
}

impl ClusterGeometry {
    pub fn build<T: Scalar>(&self, rng: RngStream) -> Result<ClusterSpec<T>> {
        if self.signal_dim == 0 || self.signal_dim > self.dim {
            return Err(Error::config(format!(
                "signal_dim {} must be in [1, {}]",
                self.signal_dim, self.dim
            )));
        }
        let mut partner_of = vec![None; self.class_count];
        for &(a, b) in &self.confusable {
            if a >= self.class_count || b >= self.class_count || a == b {
                return Err(Error::config(format!("invalid confusable pair ({a}, {b})")));
            }
            if partner_of[b].is_some() || partner_of[a].is_some() {
                return Err(Error::config(format!("class in pair ({a}, {b}) is rotated twice")));
            }
            partner_of[b] = Some(a);
        }
        let mut rng = rng.rng();
        let frame = orthonormal_rows(self.signal_dim, self.dim, &mut rng)?;
        let orthogonal = self.class_count <= self.signal_dim;
        let (cos, sin) = (self.angle.cos(), self.angle.sin());

        let mut latent: Vec<Vec<f64>> = vec![Vec::new(); self.class_count];
        for k in 0..self.class_count {
            if partner_of[k].is_none() {
                latent[k] = if orthogonal {
                    unit_axis(self.signal_dim, k)
                } else {
                    random_unit(self.signal_dim, &mut rng)
                };
            }
        }
        for k in 0..self.class_count {
            if let Some(a) = partner_of[k] {
                let base = latent[a].clone();
                let mut u = if orthogonal {
                    unit_axis(self.signal_dim, k)
                } else {
                    random_unit(self.signal_dim, &mut rng)
                };
                let proj = dot(&u, &base);
                u.iter_mut().zip(&base).for_each(|(x, b)| *x -= proj * b);
                let n = norm(&u);
                u.iter_mut().for_each(|x| *x /= n);
                latent[k] = base.iter().zip(&u).map(|(b, x)| cos * b + sin * x).collect();
            }
        }

        let mut means = Matrix::<T>::zeros(self.class_count, self.dim);
        for (k, z) in latent.iter().enumerate() {
            let mut m = vec![0.0; self.dim];
            for (r, &zr) in z.iter().enumerate() {
                for (mi, &q) in m.iter_mut().zip(frame.row(r)) {
                    *mi += zr * q;
                }
            }
            let n = norm(&m);
            for (dst, v) in means.row_mut(k).iter_mut().zip(&m) {
                *dst = T::lit(v / n);
            }
        }
        let pairs = self
            .confusable
            .iter()
            .map(|&(first, second)| ConfusablePair {
                first,
                second,
                angle: self.angle,
            })
            .collect();
        ClusterSpec::new(means, T::lit(self.stddev), pairs)
    }
}

fn unit_axis(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v
}

fn random_unit(d: usize, rng: &mut StreamRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `k` orthonormal rows in `d` dimensions by Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(k: usize, d: usize, rng: &mut StreamRng) -> Result<Matrix<f64>> {
    let mut out = Matrix::zeros(k, d);
    for r in 0..k {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 100 {
                return Err(Error::numeric("failed to build an orthonormal frame"));
            }
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
            for prev in 0..r {
                let p = dot(&v, out.row(prev));
                v.iter_mut().zip(out.row(prev)).for_each(|(x, q)| *x -= p * q);
            }
            let n = norm(&v);
            if n > 1e-6 {
                out.row_mut(r).iter_mut().zip(&v).for_each(|(dst, x)| *dst = x / n);
                break;
            }
        }
    }
    Ok(out)
}

/// Draws `per_class` samples per class as `mean + stddev · N(0, I)`, class-major.
pub fn generate_clusters<T: Scalar>(
    spec: &ClusterSpec<T>,
    per_class: usize,
    rng: RngStream,
) -> Result<LabeledFeatureSet<T>> {
    if per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    let (k, d) = (spec.class_count(), spec.dim());
    let mut rng = rng.rng();
    let mut features = Matrix::zeros(k * per_class, d);
    let mut labels = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (x, &m) in row.iter_mut().zip(spec.means.row(c)) {
                *x = m + spec.stddev * gaussian::<T>(&mut rng);
            }
            labels.push(c);
        }
    }
    let classes = (0..k).map(|c| c.to_string()).collect();
    LabeledFeatureSet::new(features, labels, classes)
}

/// Feature-space stand-in for image augmentation: `s · x + ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(Error::config(format!(
                "scale range ({}, {}) must satisfy 0 < lo <= hi",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

fn augment_into<T: Scalar>(x: &[T], out: &mut [T], params: &AugmentParams, rng: &mut StreamRng) {
    let s = if params.scale_lo == params.scale_hi {
        params.scale_lo
    } else {
        rng.random_range(params.scale_lo..params.scale_hi)
    };
    let (s, sigma) = (T::lit(s), T::lit(params.noise_sigma));
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = s * xi + sigma * gaussian::<T>(rng);
    }
}

/// Two independently augmented views of `x`.
pub fn augment_pair<T: Scalar>(
    x: &[T],
    rng: RngStream,
    params: &AugmentParams,
) -> Result<(Vec<T>, Vec<T>)> {
    params.validate()?;
    let mut rng = rng.rng();
    let mut a = vec![T::zero(); x.len()];
    let mut b = vec![T::zero(); x.len()];
    augment_into(x, &mut a, params, &mut rng);
    augment_into(x, &mut b, params, &mut rng);
    Ok((a, b))
}

/// `2N` views of `N` source samples. Views `2i` and `2i + 1` come from source `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch<T> {
    views: Matrix<T>,
    labels: Vec<usize>,
    homolog: Vec<usize>,
    sources: Vec<usize>,
}

impl<T: Scalar> AugmentedBatch<T> {
    /// Builds a batch from explicit views; `homolog` must be a fixed-point-free involution
    /// that preserves labels.
    pub fn new(views: Matrix<T>, labels: Vec<usize>, homolog: Vec<usize>) -> Result<Self> {
        let n = views.rows();
        if labels.len() != n || homolog.len() != n {
            return Err(Error::shape(
                format!("{n} labels and homolog entries"),
                format!("{} and {}", labels.len(), homolog.len()),
            ));
        }
        check_homolog(&homolog, Some(&labels))?;
        let sources = (0..n).map(|i| i.min(homolog[i])).collect();
        Ok(Self {
            views,
            labels,
            homolog,
            sources,
        })
    }

    pub fn views(&self) -> &Matrix<T> {
        &self.views
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn homolog(&self) -> &[usize] {
        &self.homolog
    }

    /// Index of the source sample each view was derived from.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_homolog(homolog: &[usize], labels: Option<&[usize]>) -> Result<()> {
    let n = homolog.len();
    for (i, &h) in homolog.iter().enumerate() {
        if h >= n || h == i || homolog[h] != i {
            return Err(Error::protocol(format!(
                "homolog map is not a fixed-point-free involution at index {i}"
            )));
        }
        if let Some(labels) = labels {
            if labels[i] != labels[h] {
                return Err(Error::protocol(format!(
                    "views {i} and {h} are homologous but carry different labels"
                )));
            }
        }
    }
    Ok(())
}

/// Augments each listed source sample twice (k = 2).
pub fn augment_batch<T: Scalar>(
    set: &LabeledFeatureSet<T>,
    indices: &[usize],
    rng: RngStream,
    params: &AugmentParams,
) -> Result<AugmentedBatch<T>> {
    params.validate()?;
    let mut rng = rng.rng();
    let d = set.dim();
    let n = indices.len();
    let mut views = Matrix::zeros(2 * n, d);
    let mut labels = Vec::with_capacity(2 * n);
    let mut homolog = Vec::with_capacity(2 * n);
    let mut sources = Vec::with_capacity(2 * n);
    for (i, &src) in indices.iter().enumerate() {
        if src >= set.len() {
            return Err(Error::config(format!("source index {src} out of range")));
        }
        let (x, y) = set.sample(src);
        augment_into(x, views.row_mut(2 * i), params, &mut rng);
        augment_into(x, views.row_mut(2 * i + 1), params, &mut rng);
        labels.extend([y, y]);
        homolog.extend([2 * i + 1, 2 * i]);
        sources.extend([src, src]);
    }
    Ok(AugmentedBatch {
        views,
        labels,
        homolog,
        sources,
    })
}

/// Reads `label,feat_0,...,feat_{D-1}` rows. A first line whose first cell is
/// not numeric is treated as a header. Labels are re-indexed densely in order
/// of first appearance.
pub fn load_feature_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<LabeledFeatureSet<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_csv(file)
}

pub fn read_feature_csv<T: Scalar>(reader: impl Read) -> Result<LabeledFeatureSet<T>> {
    let reader = BufReader::new(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 1 && cells[0].parse::<f64>().is_err() {
            continue;
        }
        let label = cells[0];
        if label.parse::<i64>().is_err() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("label `{label}` is not an integer"),
            });
        }
        let width = cells.len() - 1;
        match dim {
            None if width == 0 => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "row has no feature columns".into(),
                })
            }
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("ragged row: {width} features, expected {d}"),
                })
            }
            Some(_) => {}
        }
        for cell in &cells[1..] {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite cell `{cell}`"),
                });
            }
            data.push(T::lit(v));
        }
        let next = classes.len();
        let y = *index.entry(label.to_string()).or_insert_with(|| {
            classes.push(label.to_string());
            next
        });
        labels.push(y);
    }
    let Some(d) = dim else {
        return Err(Error::Parse {
            line: 1,
            message: "file contains no data rows".into(),
        });
    };
    let features = Matrix::from_vec(labels.len(), d, data)?;
    LabeledFeatureSet::new(features, labels, classes)
}

/// Writes a set in the format read by [`load_feature_csv`], with a header.
pub fn write_feature_csv<T: Scalar>(set: &LabeledFeatureSet<T>, mut out: impl Write) -> std::io::Result<()> {
    write!(out, "label")?;
    for j in 0..set.dim() {
        write!(out, ",feat_{j}")?;
    }
    writeln!(out)?;
    for (row, &y) in set.features.row_iter().zip(&set.labels) {
        write!(out, "{}", set.classes[y])?;
        for x in row {
            // shortest round-trip representation
            write!(out, ",{}", x.to_f64_lossy())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Splits classes into disjoint base and novel sets; novel classes are chosen at random.
pub fn split_base_novel<T: Scalar>(
    set: &LabeledFeatureSet<T>,
    novel_class_count: usize,
    rng: RngStream,
) -> Result<(LabeledFeatureSet<T>, LabeledFeatureSet<T>)> {
    let k = set.class_count();
    if novel_class_count == 0 || novel_class_count >= k {
        return Err(Error::config(format!(
            "novel_class_count {novel_class_count} must be in (0, {k})"
        )));
    }
    let mut novel: Vec<usize> = sample(&mut rng.rng(), k, novel_class_count).into_vec();
    novel.sort_unstable();
    split_by_classes(set, &novel)
}

/// Splits off the listed classes as the novel set; the rest form the base set.
pub fn split_by_classes<T: Scalar>(
    set: &LabeledFeatureSet<T>,
    novel: &[usize],
) -> Result<(LabeledFeatureSet<T>, LabeledFeatureSet<T>)> {
    let k = set.class_count();
    if novel.is_empty() || novel.len() >= k {
        return Err(Error::config(format!(
            "novel class count {} must be in (0, {k})",
            novel.len()
        )));
    }
    let base: Vec<usize> = (0..k).filter(|c| !novel.contains(c)).collect();
    Ok((set.restrict_to_classes(&base)?, set.restrict_to_classes(novel)?))
}

/// Moves `k` randomly chosen samples of every class into the first set; the
/// remainder forms the second. Each class needs more than `k` samples.
pub fn split_per_class<T: Scalar>(
    set: &LabeledFeatureSet<T>,
    k: usize,
    rng: RngStream,
) -> Result<(LabeledFeatureSet<T>, LabeledFeatureSet<T>)> {
    let mut rng = rng.rng();
    let mut picked = vec![false; set.len()];
    for (c, members) in set.indices_by_class().iter().enumerate() {
        if members.len() <= k {
            return Err(Error::protocol(format!(
                "class {} has {} samples, cannot hold out {k}",
                set.classes[c],
                members.len()
            )));
        }
        for i in sample(&mut rng, members.len(), k) {
            picked[members[i]] = true;
        }
    }
    let subset = |want: bool| {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| picked[i] == want).collect();
        let labels = idx.iter().map(|&i| set.labels[i]).collect();
        LabeledFeatureSet::new(set.features.select_rows(&idx), labels, set.classes.clone())
    };
    Ok((subset(true)?, subset(false)?))
}
