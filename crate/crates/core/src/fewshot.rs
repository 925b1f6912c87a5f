//! Few-shot classification on frozen embeddings: episode sampling, mean
//! prototypes, cosine-softmax prediction, one-pass transductive rectification
//! and generalized (joint base + novel) evaluation.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::data::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{argmax, cosine, l2_normalize, mean_and_ci95, softmax_with_temperature};
use crate::rng::{RngStream, StreamRng};
use crate::scalar::Scalar;
use crate::training::Encoder;

/// Maps raw features to embedding features (before normalization).
pub trait FeatureExtractor<T>: Sync {
    fn extract(&self, x: &Matrix<T>) -> Result<Matrix<T>>;
}

impl<T: Scalar> FeatureExtractor<T> for Encoder<T> {
    fn extract(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply(x)
    }
}

/// Uses the raw features unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawFeatures;

impl<T: Scalar> FeatureExtractor<T> for RawFeatures {
    fn extract(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(x.clone())
    }
}

/// Unit-norm embeddings of a labeled set, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSet<T> {
    embeddings: Matrix<T>,
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl<T: Scalar> EmbeddedSet<T> {
    pub fn embed(set: &LabeledFeatureSet<T>, extractor: &impl FeatureExtractor<T>) -> Result<Self> {
        let features = extractor.extract(set.features())?;
        Self::from_features(features, set.labels().to_vec(), set.class_count())
    }

    /// Normalizes each row of `features`.
    pub fn from_features(features: Matrix<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(format!("{} labels", features.rows()), labels.len()));
        }
        let mut embeddings = Matrix::zeros(features.rows(), features.cols());
        for (r, f) in features.row_iter().enumerate() {
            embeddings.row_mut(r).copy_from_slice(&l2_normalize(f)?);
        }
        let mut by_class = vec![Vec::new(); class_count];
        for (i, &y) in labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| Error::shape(format!("labels below {class_count}"), y))?
                .push(i);
        }
        Ok(Self {
            embeddings,
            labels,
            by_class,
        })
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }
}

/// An `N`-way `K`-shot task. Episode labels are `0..way`, indexing `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub classes: Vec<usize>,
    pub shot: usize,
    pub support: Matrix<T>,
    pub support_labels: Vec<usize>,
    pub support_ids: Vec<usize>,
    pub query: Matrix<T>,
    pub query_labels: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl<T> Episode<T> {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        Self { way, shot, query }
    }

    fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 || self.query == 0 {
            return Err(Error::config(format!("episode shape {self:?} needs positive sizes")));
        }
        Ok(())
    }
}

/// Draws classes without replacement, then `shot + query` samples per class
/// without replacement. Every class of `set` must hold enough samples.
pub fn sample_episode<T: Scalar>(
    set: &EmbeddedSet<T>,
    shape: EpisodeShape,
    rng: &mut StreamRng,
) -> Result<Episode<T>> {
    shape.validate()?;
    let need = shape.shot + shape.query;
    if set.class_count() < shape.way {
        return Err(Error::protocol(format!(
            "{}-way episodes need {} classes, the set has {}",
            shape.way,
            shape.way,
            set.class_count()
        )));
    }
    if let Some(c) = (0..set.class_count()).find(|&c| set.members(c).len() < need) {
        return Err(Error::protocol(format!(
            "class {c} has {} samples, episodes need {need}",
            set.members(c).len()
        )));
    }
    let classes = index::sample(rng, set.class_count(), shape.way).into_vec();
    let mut support_ids = Vec::with_capacity(shape.way * shape.shot);
    let mut query_ids = Vec::with_capacity(shape.way * shape.query);
    let mut support_labels = Vec::with_capacity(shape.way * shape.shot);
    let mut query_labels = Vec::with_capacity(shape.way * shape.query);
    for (e, &c) in classes.iter().enumerate() {
        let members = set.members(c);
        let picks = index::sample(rng, members.len(), need).into_vec();
        for (k, &p) in picks.iter().enumerate() {
            if k < shape.shot {
                support_ids.push(members[p]);
                support_labels.push(e);
            } else {
                query_ids.push(members[p]);
                query_labels.push(e);
            }
        }
    }
    Ok(Episode {
        classes,
        shot: shape.shot,
        support: set.embeddings().select_rows(&support_ids),
        support_labels,
        support_ids,
        query: set.embeddings().select_rows(&query_ids),
        query_labels,
        query_ids,
    })
}

/// Class prototypes, optionally with their rectified replacements.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    prototypes: Matrix<T>,
    rectified: Option<Matrix<T>>,
    shot: usize,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn from_matrix(prototypes: Matrix<T>, shot: usize) -> Result<Self> {
        if prototypes.rows() == 0 || shot == 0 {
            return Err(Error::protocol("prototype set needs at least one class and shot >= 1"));
        }
        Ok(Self {
            prototypes,
            rectified: None,
            shot,
        })
    }

    pub fn prototypes(&self) -> &Matrix<T> {
        &self.prototypes
    }

    pub fn rectified(&self) -> Option<&Matrix<T>> {
        self.rectified.as_ref()
    }

    /// Rectified prototypes when present, the originals otherwise.
    pub fn active(&self) -> &Matrix<T> {
        self.rectified.as_ref().unwrap_or(&self.prototypes)
    }

    pub fn shot(&self) -> usize {
        self.shot
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }
}

/// Per-class means of the support rows; `labels` index `0..class_count`.
/// `shot` is the count used as the prior weight during rectification.
pub fn compute_prototypes<T: Scalar>(
    support: &Matrix<T>,
    labels: &[usize],
    class_count: usize,
    shot: usize,
) -> Result<PrototypeSet<T>> {
    if labels.len() != support.rows() {
        return Err(Error::shape(format!("{} labels", support.rows()), labels.len()));
    }
    let mut sums = Matrix::zeros(class_count, support.cols());
    let mut counts = vec![0usize; class_count];
    for (row, &y) in support.row_iter().zip(labels) {
        if y >= class_count {
            return Err(Error::shape(format!("labels below {class_count}"), y));
        }
        counts[y] += 1;
        for (s, &x) in sums.row_mut(y).iter_mut().zip(row) {
            *s += x;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::protocol(format!("class {c} has no support samples")));
    }
    for (c, &n) in counts.iter().enumerate() {
        let n = T::from_usize_lossy(n);
        for s in sums.row_mut(c) {
            *s /= n;
        }
    }
    PrototypeSet::from_matrix(sums, shot)
}

/// Label and posterior `softmax_c(cos(x, p_c))`; ties go to the lowest class.
pub fn predict_inductive<T: Scalar>(query: &[T], prototypes: &Matrix<T>) -> Result<(usize, Vec<T>)> {
    if prototypes.rows() == 0 {
        return Err(Error::protocol("no prototypes to compare against"));
    }
    let sims = prototypes
        .row_iter()
        .map(|p| cosine(query, p))
        .collect::<Result<Vec<T>>>()?;
    let post = softmax_with_temperature(&sims, T::one())?;
    Ok((argmax(&post), post))
}

/// Predictions and posterior rows for every query.
pub fn predict_batch<T: Scalar>(queries: &Matrix<T>, prototypes: &Matrix<T>) -> Result<(Vec<usize>, Matrix<T>)> {
    let mut labels = Vec::with_capacity(queries.rows());
    let mut post = Matrix::zeros(queries.rows(), prototypes.rows());
    for (r, q) in queries.row_iter().enumerate() {
        let (y, p) = predict_inductive(q, prototypes)?;
        labels.push(y);
        post.row_mut(r).copy_from_slice(&p);
    }
    Ok((labels, post))
}

/// `p̃_c = (K p_c + Σ_x p(c|x) x) / (K + Σ_x p(c|x))` over the given queries.
pub fn rectify_with_posteriors<T: Scalar>(
    protos: &PrototypeSet<T>,
    queries: &Matrix<T>,
    posteriors: &Matrix<T>,
) -> Result<PrototypeSet<T>> {
    let c = protos.class_count();
    if posteriors.cols() != c {
        return Err(Error::protocol(format!(
            "posteriors cover {} classes, prototypes {c}",
            posteriors.cols()
        )));
    }
    if posteriors.rows() != queries.rows() || queries.cols() != protos.prototypes.cols() {
        return Err(Error::shape(
            format!("{} posterior rows and {} columns", queries.rows(), protos.prototypes.cols()),
            format!("{} rows and {} columns", posteriors.rows(), queries.cols()),
        ));
    }
    // accumulated as p_c + Σ p(c|x)(x − p_c) / mass, so a query sitting on
    // its prototype or carrying no posterior mass leaves p_c bit-identical
    let k = T::from_usize_lossy(protos.shot);
    let mut shift: Matrix<T> = Matrix::zeros(c, protos.prototypes.cols());
    let mut mass = vec![k; c];
    for (q, p) in queries.row_iter().zip(posteriors.row_iter()) {
        for class in 0..c {
            mass[class] += p[class];
            let proto = protos.prototypes.row(class);
            for ((s, &x), &pc) in shift.row_mut(class).iter_mut().zip(q).zip(proto) {
                *s += p[class] * (x - pc);
            }
        }
    }
    let mut rect = protos.prototypes.clone();
    for (class, &m) in mass.iter().enumerate() {
        for (r, &s) in rect.row_mut(class).iter_mut().zip(shift.row(class)) {
            *r += s / m;
        }
    }
    Ok(PrototypeSet {
        prototypes: protos.prototypes.clone(),
        rectified: Some(rect),
        shot: protos.shot,
    })
}

/// One rectification round using the inductive posteriors of `queries`.
pub fn rectify_prototypes<T: Scalar>(protos: &PrototypeSet<T>, queries: &Matrix<T>) -> Result<PrototypeSet<T>> {
    let (_, post) = predict_batch(queries, protos.prototypes())?;
    rectify_with_posteriors(protos, queries, &post)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Inductive,
    Transductive,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Inductive => "inductive",
            EvalMode::Transductive => "transductive",
        }
    }
}

/// Query accuracy of one episode under both modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub inductive: f64,
    pub transductive: f64,
}

impl EpisodeOutcome {
    pub fn get(&self, mode: EvalMode) -> f64 {
        match mode {
            EvalMode::Inductive => self.inductive,
            EvalMode::Transductive => self.transductive,
        }
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

pub fn run_episode<T: Scalar>(episode: &Episode<T>) -> Result<EpisodeOutcome> {
    let protos = compute_prototypes(&episode.support, &episode.support_labels, episode.way(), episode.shot)?;
    let (pred, post) = predict_batch(&episode.query, protos.prototypes())?;
    let rect = rectify_with_posteriors(&protos, &episode.query, &post)?;
    let (pred_t, _) = predict_batch(&episode.query, rect.active())?;
    Ok(EpisodeOutcome {
        inductive: accuracy(&pred, &episode.query_labels),
        transductive: accuracy(&pred_t, &episode.query_labels),
    })
}

/// Runs `episodes` independent episodes in parallel; episode `e` draws from
/// `rng.child(e)`, so results do not depend on the worker count.
pub fn evaluate_episodes<T: Scalar>(
    set: &EmbeddedSet<T>,
    shape: EpisodeShape,
    episodes: usize,
    rng: RngStream,
) -> Result<Vec<EpisodeOutcome>> {
    (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut r = rng.child(e as u64).rng();
            run_episode(&sample_episode(set, shape, &mut r)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub mean: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

pub fn summarize(outcomes: &[EpisodeOutcome], mode: EvalMode) -> Result<EvalSummary> {
    let per_episode: Vec<f64> = outcomes.iter().map(|o| o.get(mode)).collect();
    let (mean, ci95) = mean_and_ci95(&per_episode)?;
    Ok(EvalSummary {
        mode,
        mean,
        ci95,
        per_episode,
    })
}

/// Embeds `novel` once and reports mean episode accuracy with its 95% interval.
pub fn evaluate<T: Scalar>(
    extractor: &impl FeatureExtractor<T>,
    novel: &LabeledFeatureSet<T>,
    shape: EpisodeShape,
    episodes: usize,
    mode: EvalMode,
    rng: RngStream,
) -> Result<EvalSummary> {
    if episodes < 2 {
        return Err(Error::protocol(format!(
            "need at least 2 episodes for a confidence interval, got {episodes}"
        )));
    }
    let set = EmbeddedSet::embed(novel, extractor)?;
    summarize(&evaluate_episodes(&set, shape, episodes, rng)?, mode)
}

/// Accuracies over the joint base + novel label space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GfslReport {
    pub acc_base: f64,
    pub acc_novel: f64,
    /// Sample-weighted mean of the two accuracies.
    pub acc_joint: f64,
    pub acc_harmonic: f64,
    pub base_classes: usize,
    pub novel_classes: usize,
}

impl GfslReport {
    /// `base_samples` and `novel_samples` weight the joint accuracy.
    pub fn from_accuracies(
        acc_base: f64,
        acc_novel: f64,
        base_samples: usize,
        novel_samples: usize,
        base_classes: usize,
        novel_classes: usize,
    ) -> Result<Self> {
        let unit = |a: f64| (0.0..=1.0).contains(&a);
        if !unit(acc_base) || !unit(acc_novel) {
            return Err(Error::config(format!(
                "accuracies ({acc_base}, {acc_novel}) must lie in [0, 1]"
            )));
        }
        let total = base_samples + novel_samples;
        if total == 0 {
            return Err(Error::protocol("no test samples"));
        }
        let acc_joint = (acc_base * base_samples as f64 + acc_novel * novel_samples as f64) / total as f64;
        let acc_harmonic = if acc_base == 0.0 || acc_novel == 0.0 {
            0.0
        } else {
            2.0 * acc_base * acc_novel / (acc_base + acc_novel)
        };
        Ok(Self {
            acc_base,
            acc_novel,
            acc_joint,
            acc_harmonic,
            base_classes,
            novel_classes,
        })
    }
}

/// Prototypes over `base` classes followed by `novel` classes, each the mean
/// embedding of the given support samples.
pub fn joint_prototypes<T: Scalar>(
    extractor: &impl FeatureExtractor<T>,
    base_support: &LabeledFeatureSet<T>,
    novel_support: &LabeledFeatureSet<T>,
) -> Result<PrototypeSet<T>> {
    let b = EmbeddedSet::embed(base_support, extractor)?;
    let n = EmbeddedSet::embed(novel_support, extractor)?;
    let cb = base_support.class_count();
    let rows: Vec<Vec<T>> = b
        .embeddings()
        .row_iter()
        .chain(n.embeddings().row_iter())
        .map(<[T]>::to_vec)
        .collect();
    let labels: Vec<usize> = b.labels().iter().copied().chain(n.labels().iter().map(|&y| y + cb)).collect();
    let shot = (0..cb)
        .map(|c| b.members(c).len())
        .chain((0..n.class_count()).map(|c| n.members(c).len()))
        .min()
        .unwrap_or(0)
        .max(1);
    compute_prototypes(&Matrix::from_rows(&rows)?, &labels, cb + novel_support.class_count(), shot)
}

/// Classifies base and novel test samples against all joint prototypes.
/// Novel label `y` corresponds to joint class `base_classes + y`.
pub fn gfsl_evaluate<T: Scalar>(
    extractor: &impl FeatureExtractor<T>,
    protos: &PrototypeSet<T>,
    base_test: &LabeledFeatureSet<T>,
    novel_test: &LabeledFeatureSet<T>,
) -> Result<GfslReport> {
    let (cb, cn) = (base_test.class_count(), novel_test.class_count());
    if protos.class_count() != cb + cn {
        return Err(Error::protocol(format!(
            "joint space has {} classes but {} prototypes",
            cb + cn,
            protos.class_count()
        )));
    }
    let score = |set: &LabeledFeatureSet<T>, offset: usize| -> Result<f64> {
        let e = EmbeddedSet::embed(set, extractor)?;
        let (pred, _) = predict_batch(e.embeddings(), protos.active())?;
        let truth: Vec<usize> = set.labels().iter().map(|&y| y + offset).collect();
        Ok(accuracy(&pred, &truth))
    };
    GfslReport::from_accuracies(score(base_test, 0)?, score(novel_test, cb)?, base_test.len(), novel_test.len(), cb, cn)
}

/// Randomly permutes query labels within an episode; used for chance-level checks.
pub fn shuffle_query_labels<T>(episode: &mut Episode<T>, rng: &mut StreamRng) {
    episode.query_labels.shuffle(rng);
}
