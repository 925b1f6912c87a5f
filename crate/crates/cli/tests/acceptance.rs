//! End-to-end acceptance checks. Each prints one PASS/FAIL line; the process
//! exits non-zero when any check fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use sacl_cli::config::RunConfig;
use sacl_cli::pipeline::{self, Datasets};
use sacl_core::fewshot::*;
use sacl_core::rng::StreamRng;
use sacl_core::sacl::*;
use sacl_core::teacher::{SimilarityMatrix, TeacherModel};
use sacl_core::theory::{alignment_uniformity, convergence_study, MixtureFamily, SphereMixture};
use sacl_core::training::{train_embedding, Encoder, LossKind};
use sacl_core::{Matrix, RngStream};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- shared trained encoders ----

struct Trained {
    encoder: Encoder<f64>,
    elapsed: Duration,
}

struct Shared {
    cfg: RunConfig,
    data: Datasets,
    teacher: TeacherModel<f64>,
    setup: Duration,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let cfg = RunConfig::defaults();
        let data = pipeline::load_data(&cfg).expect("synthetic data");
        let teacher = pipeline::build_teacher(&cfg, &data).expect("teacher");
        Shared {
            cfg,
            data,
            teacher,
            setup: t.elapsed(),
        }
    })
}

fn train(overrides: &[(&str, &str)]) -> Trained {
    let s = shared();
    let mut cfg = s.cfg.clone();
    for (k, v) in overrides {
        cfg = cfg.with(k, v).expect("valid override");
    }
    let t = Instant::now();
    let tc = pipeline::train_config(&cfg).expect("train config");
    let outcome = train_embedding(&s.data.base, &s.teacher, &tc).expect("training");
    Trained {
        encoder: outcome.encoder,
        elapsed: t.elapsed(),
    }
}

fn sacl_encoder() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train(&[("loss", LossKind::Sacl.name())]))
}

fn cl_encoder() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train(&[("loss", LossKind::Cl.name())]))
}

fn outcomes(encoder: &Encoder<f64>) -> Vec<EpisodeOutcome> {
    let s = shared();
    pipeline::run_episodes(&s.cfg, encoder, &s.data.novel).expect("episodes")
}

fn sacl_outcomes() -> &'static Vec<EpisodeOutcome> {
    static CELL: OnceLock<Vec<EpisodeOutcome>> = OnceLock::new();
    CELL.get_or_init(|| outcomes(&sacl_encoder().encoder))
}

// ---- finite-difference oracle ----

fn normal_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

struct Problem {
    features: Matrix<f64>,
    labels: Vec<usize>,
    homolog: Vec<usize>,
    similarity: SimilarityMatrix<f64>,
}

fn problem(seed: u64, views: usize, dim: usize) -> Problem {
    let classes = 4;
    let mut rng = RngStream::new(seed, 41).rng();
    let features = normal_matrix(&mut rng, views, dim);
    let mut labels = Vec::new();
    for _ in 0..views / 2 {
        let y = rng.random_range(0..classes);
        labels.extend([y, y]);
    }
    let homolog = (0..views).map(|i| i ^ 1).collect();
    let mut rows = normal_matrix(&mut rng, views, classes);
    for r in 0..views {
        let ex: Vec<f64> = rows.row(r).iter().map(|z| (3.0 * z / 2.5).exp()).collect();
        let total: f64 = ex.iter().sum();
        for (v, e) in rows.row_mut(r).iter_mut().zip(&ex) {
            *v = e / total;
        }
    }
    Problem {
        features,
        labels,
        homolog,
        similarity: SimilarityMatrix::from_rows(rows, 2.5).unwrap(),
    }
}

/// `−Σ_j w_ij log(exp(⟨e_i,e_j⟩/τ) / Σ_{k≠i} exp(⟨e_i,e_k⟩/τ))` per anchor.
fn anchor_losses(e: &Matrix<f64>, w: &Matrix<f64>, tau: f64) -> Vec<f64> {
    let n = e.rows();
    let s = |i: usize, j: usize| -> f64 { e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau };
    (0..n)
        .map(|i| {
            let z: f64 = (0..n).filter(|&k| k != i).map(|k| s(i, k).exp()).sum();
            -(0..n)
                .filter(|&j| j != i)
                .map(|j| w[(i, j)] * (s(i, j).exp() / z).ln())
                .sum::<f64>()
        })
        .collect()
}

fn unit_rows(f: &Matrix<f64>) -> Matrix<f64> {
    let mut out = f.clone();
    for r in 0..f.rows() {
        let n = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn central(f: impl Fn(&Matrix<f64>) -> Vec<f64>, x: &Matrix<f64>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.as_slice().len())
        .map(|k| {
            let v = x.as_slice()[k];
            probe.as_mut_slice()[k] = v + h;
            let up = f(&probe);
            probe.as_mut_slice()[k] = v - h;
            let down = f(&probe);
            probe.as_mut_slice()[k] = v;
            up.iter().zip(&down).map(|(a, b)| a - b).sum::<f64>() / (2.0 * h)
        })
        .collect()
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

// ---- criteria ----

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let (mut worst, mut configs) = (0.0f64, 0);
    for views in [8, 32] {
        for dim in [4, 16] {
            for lambda in [0.0, 0.3, 1.0] {
                for tau in [0.05, 0.5] {
                    for rep in 0..5 {
                        let p = problem(configs * 7919 + rep, views, dim);
                        let w = pair_weights(&p.similarity, &p.labels, &p.homolog, lambda).unwrap();
                        let batch = EmbeddingBatch::new(p.features.clone(), p.labels.clone(), p.homolog.clone()).unwrap();
                        let wn = w.normalized();
                        let ge = sacl_grad_embeddings(&batch, &w, tau).unwrap();
                        let ne = central(|e| anchor_losses(e, wn, tau), batch.embeddings(), 1e-6);
                        let gf = sacl_grad_features(&batch, &w, tau).unwrap();
                        let nf = central(|f| anchor_losses(&unit_rows(f), wn, tau), &p.features, 1e-6);
                        worst = worst.max(relative(ge.as_slice(), &ne)).max(relative(gf.as_slice(), &nf));
                        configs += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        configs >= 100 && worst <= 1e-6 && secs < 10.0,
        format!("{configs} configurations, max relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn degenerate_equivalence() -> Check {
    let (mut cl_gap, mut scl_gap) = (0.0f64, 0.0f64);
    for b in 0..50 {
        let p = problem(10_000 + b, 16, 8);
        let batch = EmbeddingBatch::new(p.features.clone(), p.labels.clone(), p.homolog.clone()).unwrap();
        let tau = 0.1;
        let w0 = pair_weights(&p.similarity, &p.labels, &p.homolog, 0.0).unwrap();
        cl_gap = cl_gap.max((sacl_loss(&batch, &w0, tau, false).unwrap().total - cl_loss(&batch, tau).unwrap().total).abs());
        let mut hot = Matrix::zeros(p.labels.len(), 4);
        for (r, &y) in p.labels.iter().enumerate() {
            hot[(r, y)] = 1.0;
        }
        let hot = SimilarityMatrix::from_rows(hot, 1.0).unwrap();
        let w1 = pair_weights(&hot, &p.labels, &p.homolog, 1.0).unwrap();
        scl_gap = scl_gap.max((sacl_loss(&batch, &w1, tau, false).unwrap().total - scl_loss(&batch, tau).unwrap().total).abs());
    }
    ensure(
        cl_gap <= 1e-12 && scl_gap <= 1e-12,
        format!("50 batches, max |SACL(λ=0) − CL| = {cl_gap:.1e}, max |SACL(one-hot, λ=1) − SCL| = {scl_gap:.1e}"),
    )
}

fn decomposition_convergence() -> Check {
    let cfg = &shared().cfg;
    let start = Instant::now();
    let family = MixtureFamily::balanced(
        cfg.usize("theorem_classes").unwrap(),
        cfg.usize("theorem_dim").unwrap(),
        cfg.f64("concentration").unwrap(),
    );
    let study = convergence_study(
        &family,
        &[200, 2000, 20000],
        20,
        cfg.f64("theorem_tau").unwrap(),
        RngStream::new(cfg.seed(), 4),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m: Vec<f64> = study.summary.iter().map(|s| s.median).collect();
    let decreasing = m.windows(2).all(|w| w[1] < w[0]);

    let n = 1000;
    let identical = SphereMixture::new(
        Matrix::from_vec(n, 2, [0.6, 0.8].repeat(n)).unwrap(),
        (0..n).map(|i| i % 5).collect(),
        5,
    )
    .unwrap();
    let closed = (((n - 1) as f64) / n as f64).ln().abs();
    let gap = (alignment_uniformity(&identical, 0, 0.5).unwrap().error - closed).abs();
    ensure(
        decreasing && m[2] <= m[0] / 3.0 && secs < 60.0 && gap <= 1e-9,
        format!(
            "median error {:.3e} / {:.3e} / {:.3e} at n = 200 / 2000 / 20000, {secs:.2} s; identical-embedding gap {gap:.1e}",
            m[0], m[1], m[2]
        ),
    )
}

fn hard_positive_monotonicity() -> Check {
    let rows = [
        [1.0, 0.3, 0.2, 0.1],
        [0.8, 0.5, 0.1, 0.2],
        [0.9, 0.1, 0.6, 0.0],
        [0.7, 0.4, 0.3, 0.5],
        [0.6, 0.2, 0.2, 0.9],
        [0.9, 0.9, 0.1, 0.1],
        [0.5, 0.1, 0.8, 0.3],
        [1.0, 0.0, 0.0, 0.4],
    ];
    let labels = vec![0, 0, 1, 1, 2, 2, 0, 1];
    let batch = EmbeddingBatch::without_homologs(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
    let ks = [1.0, 2.0, 4.0, 8.0];
    let taus = [1.0, 0.5, 0.1, 0.05];
    let value = |k: f64, t: f64| hard_positive_magnitude(&batch, 0, k, t).unwrap().value;
    let in_k = taus.iter().all(|&t| ks.windows(2).all(|w| value(w[1], t) > value(w[0], t)));
    let in_tau = ks.iter().all(|&k| taus.windows(2).all(|w| value(k, w[1]) > value(k, w[0])));
    ensure(
        in_k && in_tau,
        format!("increasing in k: {in_k}, increasing as tau falls: {in_tau}"),
    )
}

fn sacl_beats_cl() -> Check {
    let sacl = summarize(sacl_outcomes(), EvalMode::Inductive).unwrap();
    let cl_start = Instant::now();
    let cl = summarize(&outcomes(&cl_encoder().encoder), EvalMode::Inductive).unwrap();
    let secs = (shared().setup + sacl_encoder().elapsed + cl_encoder().elapsed + cl_start.elapsed()).as_secs_f64();
    let gap = sacl.mean - cl.mean;
    let separated = sacl.mean - sacl.ci95 > cl.mean + cl.ci95;
    ensure(
        gap >= 0.03 && separated && secs < 300.0,
        format!(
            "SACL {:.4} ± {:.4} vs CL {:.4} ± {:.4} ({:+.2} points), {secs:.1} s",
            sacl.mean,
            sacl.ci95,
            cl.mean,
            cl.ci95,
            100.0 * gap
        ),
    )
}

fn transductive_not_worse() -> Check {
    let ind = summarize(sacl_outcomes(), EvalMode::Inductive).unwrap();
    let tr = summarize(sacl_outcomes(), EvalMode::Transductive).unwrap();
    ensure(
        tr.mean >= ind.mean,
        format!(
            "transductive {:.4} ± {:.4} vs inductive {:.4} ± {:.4} over {} episodes",
            tr.mean,
            tr.ci95,
            ind.mean,
            ind.ci95,
            sacl_outcomes().len()
        ),
    )
}

fn joint_accuracy_arithmetic() -> Check {
    let per_class = 600;
    let r = GfslReport::from_accuracies(0.5614, 0.2535, 80 * per_class, 20 * per_class, 80, 20).unwrap();
    ensure(
        (r.acc_joint - 0.4998).abs() <= 5e-4,
        format!("joint {:.5} (harmonic {:.4})", r.acc_joint, r.acc_harmonic),
    )
}

fn prototype_oracles() -> Check {
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut worst = 0.0f64;
    for e in 0..100u64 {
        let mut rng = RngStream::new(e, 77).rng();
        let dim = 8;
        let classes = 7;
        let per_class = 12;
        let set = EmbeddedSet::from_features(
            normal_matrix(&mut rng, classes * per_class, dim),
            (0..classes * per_class).map(|i| i / per_class).collect(),
            classes,
        )
        .unwrap();
        let shot = rng.random_range(1..=5);
        let ep = sample_episode(&set, EpisodeShape::new(5, shot, 5), &mut rng).unwrap();

        let protos = compute_prototypes(&ep.support, &ep.support_labels, 5, shot).unwrap();
        let mut direct_protos = vec![vec![0.0; dim]; 5];
        for (row, &y) in ep.support.row_iter().zip(&ep.support_labels) {
            for (p, x) in direct_protos[y].iter_mut().zip(row) {
                *p += x / shot as f64;
            }
        }
        for (c, dp) in direct_protos.iter().enumerate() {
            for (a, b) in protos.prototypes().row(c).iter().zip(dp) {
                worst = worst.max((a - b).abs());
            }
        }

        let mut posts = Vec::new();
        for q in ep.query.row_iter() {
            let (_, post) = predict_inductive(q, protos.prototypes()).unwrap();
            let ex: Vec<f64> = direct_protos.iter().map(|p| cos(q, p).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (a, b) in post.iter().zip(&ex) {
                worst = worst.max((a - b / z).abs());
            }
            posts.push(ex.iter().map(|v| v / z).collect::<Vec<f64>>());
        }

        let rect = rectify_prototypes(&protos, &ep.query).unwrap();
        for c in 0..5 {
            let k = shot as f64;
            let mass: f64 = k + posts.iter().map(|p| p[c]).sum::<f64>();
            for d in 0..dim {
                let num = k * direct_protos[c][d] + ep.query.row_iter().zip(&posts).map(|(q, p)| p[c] * q[d]).sum::<f64>();
                worst = worst.max((rect.active()[(c, d)] - num / mass).abs());
            }
        }
    }

    let protos = PrototypeSet::from_matrix(Matrix::from_rows(&[[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]]).unwrap(), 2).unwrap();
    let q = Matrix::from_rows(&[[0.6, 0.8, 0.0]]).unwrap();
    let fixed = rectify_with_posteriors(&protos, &q, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
    let fixed_point = fixed.active() == protos.prototypes();
    let qs = Matrix::from_rows(&[[0.3, -0.2, 0.9], [0.5, 0.5, 0.5]]).unwrap();
    let null = rectify_with_posteriors(&protos, &qs, &Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()).unwrap();
    let null_evidence = null.active().row(1) == protos.prototypes().row(1);
    ensure(
        worst <= 1e-12 && fixed_point && null_evidence,
        format!("100 episodes, max deviation {worst:.1e}; fixed point {fixed_point}, null evidence {null_evidence}"),
    )
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["train_log.csv", "episodes.csv", "summary.csv"]
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).expect("artifact present")))
        .collect()
}

fn determinism() -> Check {
    let dir = std::env::temp_dir().join(format!("sacl-acceptance-{}", std::process::id()));
    let mut runs = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.join(format!("threads{threads}"));
        let out_s = out.to_str().unwrap().to_string();
        for sub in ["train", "eval"] {
            let status = Command::new(env!("CARGO_BIN_EXE_sacl"))
                .args([sub, "--seed", "0", "--threads", threads, "--out", &out_s])
                .env_remove("SACL_SEED")
                .output()
                .expect("binary runs");
            if !status.status.success() {
                let _ = fs::remove_dir_all(&dir);
                return Err(format!("{sub} with {threads} threads failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        runs.push(read_outputs(&out));
    }
    let _ = fs::remove_dir_all(&dir);
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            "train_log.csv, episodes.csv and summary.csv identical for 1 and 8 threads".into()
        } else {
            format!("differing outputs: {differing:?}")
        },
    )
}

fn temperature_corner() -> Check {
    let corner = train(&[("tau_cold", "0.5"), ("tau_hot", "7.5")]);
    let hot = summarize(&outcomes(&corner.encoder), EvalMode::Inductive).unwrap();
    let cold = summarize(sacl_outcomes(), EvalMode::Inductive).unwrap();
    ensure(
        cold.mean >= hot.mean,
        format!(
            "(0.05, 2.5): {:.4} ± {:.4} vs (0.5, 7.5): {:.4} ± {:.4}",
            cold.mean, cold.ci95, hot.mean, hot.ci95
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("degenerate equivalence", degenerate_equivalence),
        ("decomposition convergence", decomposition_convergence),
        ("hard-positive monotonicity", hard_positive_monotonicity),
        ("SACL over CL", sacl_beats_cl),
        ("transductive >= inductive", transductive_not_worse),
        ("joint accuracy arithmetic", joint_accuracy_arithmetic),
        ("prototype oracles", prototype_oracles),
        ("determinism", determinism),
        ("temperature corner", temperature_corner),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{:>2}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
