mod common;

use common::small_clusters;
use sacl_core::data::{generate_clusters, split_by_classes, ClusterGeometry};
use sacl_core::teacher::{train_teacher, TeacherConfig, TeacherModel};
use sacl_core::training::*;
use sacl_core::{FeatureSet64, RngStream};

fn small_setup() -> (FeatureSet64, TeacherModel<f64>) {
    let (base, _) = small_clusters(3, 40);
    let teacher = train_teacher(
        &base,
        &TeacherConfig {
            epochs: 20,
            ..Default::default()
        },
        RngStream::new(3, 2),
    )
    .unwrap();
    (base, teacher)
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        iterations: 15,
        hidden: vec![16],
        out_dim: 8,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_encoder() {
    let (base, teacher) = small_setup();
    let a = train_embedding(&base, &teacher, &small_config(11)).unwrap();
    let b = train_embedding(&base, &teacher, &small_config(11)).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.log, b.log);
    let c = train_embedding(&base, &teacher, &small_config(12)).unwrap();
    assert_ne!(a.encoder, c.encoder);
}

#[test]
fn teacher_is_untouched_by_training() {
    let (base, teacher) = small_setup();
    let before = teacher.clone();
    train_embedding(&base, &teacher, &small_config(1)).unwrap();
    assert!(teacher.is_frozen());
    assert_eq!(teacher.weights().as_slice(), before.weights().as_slice());
    assert_eq!(teacher.bias(), before.bias());
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let (base, teacher) = small_setup();
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_config(4)
    };
    let out = train_embedding(&base, &teacher, &cfg).unwrap();
    let init = Encoder::<f64>::mlp(&cfg.layer_dims(base.dim()), cfg.init_stream()).unwrap();
    assert_eq!(out.encoder, init);
}

#[test]
fn log_reports_lambda_per_loss() {
    let (base, teacher) = small_setup();
    for (loss, expect) in [(LossKind::Cl, Some(0.0)), (LossKind::Scl, Some(1.0)), (LossKind::Sacl, None)] {
        let cfg = TrainConfig {
            loss,
            ..small_config(2)
        };
        let out = train_embedding(&base, &teacher, &cfg).unwrap();
        assert_eq!(out.log.len(), cfg.iterations);
        for row in &out.log {
            match expect {
                Some(l) => assert_eq!(row.lambda, l),
                None => assert_eq!(row.lambda, row.teacher_batch_acc),
            }
            assert!(row.loss.is_finite());
        }
    }
}

#[test]
fn observer_sees_every_iteration() {
    let (base, teacher) = small_setup();
    let cfg = small_config(5);
    let mut seen = Vec::new();
    train_embedding_with(&base, &teacher, &cfg, |it, enc| {
        assert!(enc.is_finite());
        seen.push(it);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (1..=cfg.iterations).collect::<Vec<_>>());
}

#[test]
fn oversized_batch_is_rejected() {
    let (base, teacher) = small_setup();
    let cfg = TrainConfig {
        batch_size: base.len() + 1,
        ..small_config(0)
    };
    assert!(train_embedding(&base, &teacher, &cfg).is_err());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

#[test]
fn default_synthetic_run_makes_progress() {
    let geo = ClusterGeometry {
        dim: 32,
        signal_dim: 6,
        class_count: 17,
        confusable: vec![(0, 12), (1, 13)],
        angle: 0.15,
        stddev: 0.45,
    };
    let root = RngStream::new(0, 1);
    let spec = geo.build::<f64>(root.child(0)).unwrap();
    let all = generate_clusters(&spec, 200, root.child(1)).unwrap();
    let (base, _) = split_by_classes(&all, &[12, 13, 14, 15, 16]).unwrap();
    let teacher = train_teacher(&base, &TeacherConfig::default(), RngStream::new(0, 2)).unwrap();
    let cfg = TrainConfig::default();
    let out = train_embedding(&base, &teacher, &cfg).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    let first = median(losses[..10].to_vec());
    let last = median(losses[losses.len() - 10..].to_vec());
    assert!(last < first, "first {first}, last {last}");
}
