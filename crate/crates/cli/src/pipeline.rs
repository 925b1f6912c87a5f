//! Data loading, teacher and encoder training, and evaluation wired from a
//! [`RunConfig`].

use std::path::Path;

use sacl_core::data::{
    generate_clusters, load_feature_csv, split_by_classes, split_per_class, AugmentParams,
    ClusterGeometry, LabeledFeatureSet,
};
use sacl_core::fewshot::{
    evaluate_episodes, gfsl_evaluate, joint_prototypes, EmbeddedSet, EpisodeOutcome, EpisodeShape,
    FeatureExtractor, GfslReport,
};
use sacl_core::teacher::{train_teacher, TeacherConfig, TeacherModel};
use sacl_core::training::{train_embedding_with, Encoder, TrainConfig, TrainOutcome};
use sacl_core::{Error, Result, RngStream};

use crate::config::RunConfig;

/// Stream ids below the run seed, one per pipeline stage.
const DATA_STREAM: u64 = 1;
const TEACHER_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Base (training) and novel (evaluation) sets, plus held-out test draws when
/// the data is synthetic.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub base: LabeledFeatureSet<f64>,
    pub novel: LabeledFeatureSet<f64>,
    pub base_test: Option<LabeledFeatureSet<f64>>,
    pub novel_test: Option<LabeledFeatureSet<f64>>,
}

pub fn geometry(cfg: &RunConfig) -> Result<ClusterGeometry> {
    Ok(ClusterGeometry {
        dim: cfg.usize("dim")?,
        signal_dim: cfg.usize("signal_dim")?,
        class_count: cfg.usize("base_classes")? + cfg.usize("novel_classes")?,
        confusable: cfg.pairs("confusable")?,
        angle: cfg.f64("angle")?,
        stddev: cfg.f64("stddev")?,
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    let (base_csv, novel_csv) = (cfg.str("base_csv"), cfg.str("novel_csv"));
    match (base_csv.is_empty(), novel_csv.is_empty()) {
        (true, true) => synthetic(cfg),
        (false, false) => {
            let base = load_feature_csv(Path::new(base_csv))?;
            let novel = load_feature_csv(Path::new(novel_csv))?;
            if base.dim() != novel.dim() {
                return Err(Error::Shape {
                    expected: format!("novel features of dimension {}", base.dim()),
                    actual: novel.dim().to_string(),
                });
            }
            Ok(Datasets {
                base,
                novel,
                base_test: None,
                novel_test: None,
            })
        }
        _ => Err(Error::Config("base_csv and novel_csv must be given together".into())),
    }
}

fn synthetic(cfg: &RunConfig) -> Result<Datasets> {
    let root = RngStream::new(cfg.seed(), DATA_STREAM);
    let spec = geometry(cfg)?.build::<f64>(root.child(0))?;
    let base_classes = cfg.usize("base_classes")?;
    let novel: Vec<usize> = (base_classes..spec.class_count()).collect();
    let train = generate_clusters(&spec, cfg.usize("per_class")?, root.child(1))?;
    let test = generate_clusters(&spec, cfg.usize("gfsl_test_per_class")?, root.child(2))?;
    let (base, novel_set) = split_by_classes(&train, &novel)?;
    let (base_test, novel_test) = split_by_classes(&test, &novel)?;
    Ok(Datasets {
        base,
        novel: novel_set,
        base_test: Some(base_test),
        novel_test: Some(novel_test),
    })
}

pub fn teacher_config(cfg: &RunConfig) -> Result<TeacherConfig> {
    Ok(TeacherConfig {
        epochs: cfg.usize("teacher_epochs")?,
        lr: cfg.f64("teacher_lr")?,
        batch_size: cfg.usize("teacher_batch")?,
    })
}

pub fn build_teacher(cfg: &RunConfig, data: &Datasets) -> Result<TeacherModel<f64>> {
    train_teacher(&data.base, &teacher_config(cfg)?, RngStream::new(cfg.seed(), TEACHER_STREAM))
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        batch_size: cfg.usize("batch_size")?,
        iterations: cfg.usize("iterations")?,
        lr: cfg.f64("lr")?,
        tau_hot: cfg.f64("tau_hot")?,
        tau_cold: cfg.f64("tau_cold")?,
        lambda: cfg.lambda()?,
        loss: cfg.loss()?,
        augment: AugmentParams {
            noise_sigma: cfg.f64("noise_sigma")?,
            scale_lo: cfg.f64("scale_lo")?,
            scale_hi: cfg.f64("scale_hi")?,
        },
        hidden: cfg.usize_list("hidden")?,
        out_dim: cfg.usize("out_dim")?,
        seed: cfg.seed(),
    };
    tc.validate()?;
    Ok(tc)
}

pub fn episode_shape(cfg: &RunConfig) -> Result<EpisodeShape> {
    Ok(EpisodeShape::new(cfg.usize("way")?, cfg.usize("shot")?, cfg.usize("query")?))
}

pub fn eval_stream(cfg: &RunConfig) -> RngStream {
    RngStream::new(cfg.seed(), EVAL_STREAM)
}

/// One episode outcome per episode index, on the novel set.
pub fn run_episodes(
    cfg: &RunConfig,
    extractor: &impl FeatureExtractor<f64>,
    novel: &LabeledFeatureSet<f64>,
) -> Result<Vec<EpisodeOutcome>> {
    let episodes = cfg.usize("episodes")?;
    if episodes < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 episodes for a confidence interval, got {episodes}"
        )));
    }
    let set = EmbeddedSet::embed(novel, extractor)?;
    evaluate_episodes(&set, episode_shape(cfg)?, episodes, eval_stream(cfg))
}

/// Mean inductive accuracy after each evaluated iteration.
pub type Curve = Vec<(usize, f64)>;

/// Training run whose observer records inductive accuracy on `curve_episodes`
/// episodes every `eval_every` iterations.
pub fn train_with_curve(
    cfg: &RunConfig,
    data: &Datasets,
    teacher: &TeacherModel<f64>,
) -> Result<(TrainOutcome<f64>, Curve)> {
    let tc = train_config(cfg)?;
    let every = cfg.usize("eval_every")?.max(1);
    let curve_episodes = cfg.usize("curve_episodes")?;
    let shape = episode_shape(cfg)?;
    let stream = eval_stream(cfg).child(1);
    let mut curve = Vec::new();
    let outcome = train_embedding_with(&data.base, teacher, &tc, |iter, enc: &Encoder<f64>| {
        if curve_episodes >= 2 && (iter % every == 0 || iter == tc.iterations) {
            let set = EmbeddedSet::embed(&data.novel, enc)?;
            let outs = evaluate_episodes(&set, shape, curve_episodes, stream)?;
            let mean = outs.iter().map(|o| o.inductive).sum::<f64>() / outs.len() as f64;
            curve.push((iter, mean));
        }
        Ok(())
    })?;
    Ok((outcome, curve))
}

/// Joint-space evaluation. Supports are `gfsl_shot` samples per class; tests
/// are the held-out draws, or the remaining samples for CSV input.
pub fn gfsl(cfg: &RunConfig, extractor: &impl FeatureExtractor<f64>, data: &Datasets) -> Result<GfslReport> {
    let k = cfg.usize("gfsl_shot")?;
    let stream = eval_stream(cfg).child(2);
    let (base_support, base_rest) = split_per_class(&data.base, k, stream.child(0))?;
    let (novel_support, novel_rest) = split_per_class(&data.novel, k, stream.child(1))?;
    let base_test = data.base_test.as_ref().unwrap_or(&base_rest);
    let novel_test = data.novel_test.as_ref().unwrap_or(&novel_rest);
    let protos = joint_prototypes(extractor, &base_support, &novel_support)?;
    gfsl_evaluate(extractor, &protos, base_test, novel_test)
}
