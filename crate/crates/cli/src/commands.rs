//! Subcommand bodies. Each returns whether its checks passed; errors are
//! reported separately by the caller.

use std::fmt::Write as _;
use std::path::Path;

use sacl_core::fewshot::{summarize, EpisodeOutcome, EvalMode, GfslReport};
use sacl_core::gradcheck::{central_difference, relative_error};
use sacl_core::matrix::Matrix;
use sacl_core::numerics::softmax_with_temperature;
use sacl_core::rng::RngStream;
use sacl_core::sacl::{anchor_terms, pair_weights, sacl_grad_features, sacl_loss, sacl_loss_and_grad, EmbeddingBatch};
use sacl_core::teacher::{SimilarityMatrix, TeacherModel};
use sacl_core::theory::{convergence_study, MixtureFamily};
use sacl_core::training::{train_embedding, write_train_log, Encoder};
use sacl_core::{Error, Result};

use crate::config::RunConfig;
use crate::output::Artifacts;
use crate::pipeline::{self, Datasets};
use crate::plot::{line_chart, Series};

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail(String),
}

fn modes(cfg: &RunConfig) -> Result<Vec<EvalMode>> {
    match cfg.str("mode") {
        "inductive" => Ok(vec![EvalMode::Inductive]),
        "transductive" => Ok(vec![EvalMode::Transductive]),
        "both" => Ok(vec![EvalMode::Inductive, EvalMode::Transductive]),
        other => Err(Error::Config(format!(
            "mode = '{other}' must be inductive, transductive or both"
        ))),
    }
}

fn bytes_of(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let data = pipeline::load_data(cfg)?;
    let teacher = pipeline::build_teacher(cfg, &data)?;
    let teacher_acc = teacher.accuracy(&data.base)?;
    let outcome = train_embedding(&data.base, &teacher, &pipeline::train_config(cfg)?)?;
    let mut files = Artifacts::new(out)?;
    files.write("teacher.bin", bytes_of(|b| teacher.write_checkpoint(b)))?;
    files.write("encoder.bin", bytes_of(|b| outcome.encoder.write_checkpoint(b)))?;
    files.write("train_log.csv", bytes_of(|b| write_train_log(&outcome.log, b)))?;
    let mut echo = format!("# teacher training accuracy: {teacher_acc}\n");
    echo.push_str(&cfg.render());
    files.write("config.txt", echo)?;
    let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "teacher accuracy {teacher_acc:.4}; {} iterations, final loss {last:.4}",
        outcome.log.len()
    );
    files.commit();
    Ok(Status::Pass)
}

fn load_encoder(path: &Path) -> Result<Encoder<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Encoder::read_checkpoint(std::io::BufReader::new(file))
}

fn gfsl_csv(r: &GfslReport) -> String {
    format!(
        "acc_base,acc_novel,acc_joint,acc_harmonic,base_classes,novel_classes\n{},{},{},{},{},{}\n",
        r.acc_base, r.acc_novel, r.acc_joint, r.acc_harmonic, r.base_classes, r.novel_classes
    )
}

fn print_gfsl(r: &GfslReport) {
    println!(
        "gfsl: base {:.4} novel {:.4} joint {:.4} harmonic {:.4}",
        r.acc_base, r.acc_novel, r.acc_joint, r.acc_harmonic
    );
}

/// Inputs for the joint-accuracy arithmetic: `acc_base, acc_novel, base_classes, novel_classes`.
pub fn parse_gfsl_fixture(raw: &str) -> Result<(f64, f64, usize, usize)> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("'{raw}' is not ACC_BASE,ACC_NOVEL,BASE_CLASSES,NOVEL_CLASSES"));
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
        parts[3].parse().map_err(|_| bad())?,
    ))
}

pub struct EvalOptions<'a> {
    pub encoder: &'a Path,
    pub gfsl: bool,
    pub gfsl_from: Option<&'a str>,
}

fn summary_rows(outcomes: &[EpisodeOutcome], modes: &[EvalMode], cfg: &RunConfig) -> Result<String> {
    let mut s = String::from("mode,mean,ci95,episodes,way,shot,query\n");
    for &m in modes {
        let sum = summarize(outcomes, m)?;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.name(),
            sum.mean,
            sum.ci95,
            outcomes.len(),
            cfg.usize("way")?,
            cfg.usize("shot")?,
            cfg.usize("query")?
        );
        println!("{}: {:.4} ± {:.4}", m.name(), sum.mean, sum.ci95);
    }
    Ok(s)
}

pub fn eval(cfg: &RunConfig, out: &Path, opts: &EvalOptions) -> Result<Status> {
    let modes = modes(cfg)?;
    if let Some(raw) = opts.gfsl_from {
        let (acc_b, acc_n, cb, cn) = parse_gfsl_fixture(raw)?;
        let per_class = cfg.usize("gfsl_test_per_class")?;
        let report = GfslReport::from_accuracies(acc_b, acc_n, cb * per_class, cn * per_class, cb, cn)?;
        let mut files = Artifacts::new(out)?;
        files.write("gfsl.csv", gfsl_csv(&report))?;
        print_gfsl(&report);
        files.commit();
        return Ok(Status::Pass);
    }
    let encoder = load_encoder(opts.encoder)?;
    let data = pipeline::load_data(cfg)?;
    let outcomes = pipeline::run_episodes(cfg, &encoder, &data.novel)?;
    let mut episodes = String::from("episode,acc_inductive,acc_transductive\n");
    for (e, o) in outcomes.iter().enumerate() {
        let _ = writeln!(episodes, "{e},{},{}", o.inductive, o.transductive);
    }
    let summary = summary_rows(&outcomes, &modes, cfg)?;
    let report = if opts.gfsl {
        Some(pipeline::gfsl(cfg, &encoder, &data)?)
    } else {
        None
    };
    let mut files = Artifacts::new(out)?;
    files.write("episodes.csv", episodes)?;
    files.write("summary.csv", summary)?;
    if let Some(r) = &report {
        files.write("gfsl.csv", gfsl_csv(r))?;
        print_gfsl(r);
    }
    files.commit();
    Ok(Status::Pass)
}

struct GradProblem {
    features: Matrix<f64>,
    labels: Vec<usize>,
    homolog: Vec<usize>,
    similarity: SimilarityMatrix<f64>,
}

/// Random labeled batch with homologous pairs and random teacher posteriors.
fn random_problem(two_n: usize, d: usize, stream: RngStream) -> Result<GradProblem> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream.rng();
    let classes = 4;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let features = Matrix::from_vec(two_n, d, (0..two_n * d).map(|_| normal()).collect())?;
    let mut rows = Matrix::zeros(two_n, classes);
    for r in 0..two_n {
        let z: Vec<f64> = (0..classes).map(|_| 3.0 * normal()).collect();
        rows.row_mut(r).copy_from_slice(&softmax_with_temperature(&z, 2.5)?);
    }
    let mut labels = Vec::with_capacity(two_n);
    for _ in 0..two_n / 2 {
        let y = rng.random_range(0..classes);
        labels.extend([y, y]);
    }
    let homolog = (0..two_n).map(|i| i ^ 1).collect();
    Ok(GradProblem {
        features,
        labels,
        homolog,
        similarity: SimilarityMatrix::from_rows(rows, 2.5)?,
    })
}

pub fn grad_check(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let reps = cfg.usize("grad_reps")?;
    let h = cfg.f64("grad_step")?;
    let root = RngStream::new(cfg.seed(), 5);
    let mut csv = String::from("config,two_n,dim,lambda,tau_cold,err_embeddings,err_features\n");
    let mut worst: f64 = 0.0;
    let mut id = 0u64;
    for &two_n in &[8usize, 32] {
        for &d in &[4usize, 16] {
            for &lambda in &[0.0, 0.3, 1.0] {
                for &tau in &[0.05, 0.5] {
                    for _ in 0..reps {
                        let GradProblem {
                            features: f,
                            labels,
                            homolog,
                            similarity: sim,
                        } = random_problem(two_n, d, root.child(id))?;
                        let w = pair_weights(&sim, &labels, &homolog, lambda)?;
                        let batch = EmbeddingBatch::new(f.clone(), labels.clone(), homolog.clone())?;
                        let (_, ge) = sacl_loss_and_grad(&batch, &w, tau)?;
                        let e = batch.embeddings().clone();
                        let ne = central_difference(
                            |x| {
                                let m = Matrix::from_vec(two_n, d, x.to_vec()).expect("shape");
                                (0..two_n)
                                    .map(|i| anchor_terms(&m, i, w.raw().row(i), tau).expect("valid").loss)
                                    .sum()
                            },
                            e.as_slice(),
                            h,
                        );
                        let gf = sacl_grad_features(&batch, &w, tau)?;
                        let nf = central_difference(
                            |x| {
                                let m = Matrix::from_vec(two_n, d, x.to_vec()).expect("shape");
                                let b = EmbeddingBatch::new(m, labels.clone(), homolog.clone()).expect("valid");
                                sacl_loss(&b, &w, tau, false).expect("valid").total
                            },
                            f.as_slice(),
                            h,
                        );
                        let (err_e, err_f) = (relative_error(ge.as_slice(), &ne), relative_error(gf.as_slice(), &nf));
                        worst = worst.max(err_e).max(err_f);
                        let _ = writeln!(csv, "{id},{two_n},{d},{lambda},{tau},{err_e},{err_f}");
                        id += 1;
                    }
                }
            }
        }
    }
    let mut files = Artifacts::new(out)?;
    files.write("grad_check.csv", csv)?;
    files.commit();
    println!("{id} configurations, max relative error {worst:.3e}");
    Ok(if worst < 1e-6 {
        Status::Pass
    } else {
        Status::Fail(format!("max relative error {worst:.3e} is not below 1e-6"))
    })
}

pub fn theorem(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let family = MixtureFamily::balanced(cfg.usize("theorem_classes")?, cfg.usize("theorem_dim")?, cfg.f64("concentration")?);
    let study = convergence_study(
        &family,
        &cfg.usize_list("theorem_sizes")?,
        cfg.usize("theorem_reps")?,
        cfg.f64("theorem_tau")?,
        RngStream::new(cfg.seed(), 4),
    )?;
    let mut rows = String::from("n,rep,error,alignment,uniformity,lhs\n");
    for r in &study.rows {
        let e = &r.estimate;
        let _ = writeln!(rows, "{},{},{},{},{},{}", r.n, r.rep, e.error, e.alignment, e.uniformity, e.lhs);
    }
    let mut summary = String::from("n,median_error,iqr\n");
    for s in &study.summary {
        let _ = writeln!(summary, "{},{},{}", s.n, s.median, s.iqr);
        println!("n = {:>6}: median error {:.3e}, iqr {:.3e}", s.n, s.median, s.iqr);
    }
    println!("log-error slope {:.3e}; monotone: {}", study.log_error_slope, study.monotone);
    let mut files = Artifacts::new(out)?;
    files.write("theorem.csv", rows)?;
    files.write("theorem_summary.csv", summary)?;
    files.commit();
    Ok(if study.monotone {
        Status::Pass
    } else {
        Status::Fail("median decomposition error is not strictly decreasing".into())
    })
}

struct Variant {
    name: String,
    encoder: Encoder<f64>,
    curve: Vec<(usize, f64)>,
    outcomes: Vec<EpisodeOutcome>,
}

fn run_variant(name: String, cfg: &RunConfig, data: &Datasets, teacher: &TeacherModel<f64>) -> Result<Variant> {
    let (outcome, curve) = pipeline::train_with_curve(cfg, data, teacher)?;
    let outcomes = pipeline::run_episodes(cfg, &outcome.encoder, &data.novel)?;
    let ind = summarize(&outcomes, EvalMode::Inductive)?;
    println!("{name}: {:.4} ± {:.4}", ind.mean, ind.ci95);
    Ok(Variant {
        name,
        encoder: outcome.encoder,
        curve,
        outcomes,
    })
}

fn curves_csv(variants: &[Variant]) -> String {
    let mut s = String::from("variant,iter,accuracy\n");
    for v in variants {
        for &(i, a) in &v.curve {
            let _ = writeln!(s, "{},{i},{a}", v.name);
        }
    }
    s
}

fn curves_svg(title: &str, variants: &[Variant]) -> String {
    let series: Vec<Series> = variants
        .iter()
        .map(|v| Series {
            name: v.name.clone(),
            points: v.curve.iter().map(|&(i, a)| (i as f64, a)).collect(),
        })
        .collect();
    line_chart(title, "iteration", "5-way accuracy", &series)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let data = pipeline::load_data(cfg)?;
    let teacher = pipeline::build_teacher(cfg, &data)?;
    let study = cfg.str("study").to_string();
    let mut variants = Vec::new();
    let table = match study.as_str() {
        "loss" => {
            let mut t = String::from("loss,shot1_mean,shot1_ci95,shot5_mean,shot5_ci95\n");
            for loss in ["cl", "scl", "sacl"] {
                let c = cfg.with("loss", loss)?.with("shot", 1)?;
                let v = run_variant(loss.into(), &c, &data, &teacher)?;
                let one = summarize(&v.outcomes, EvalMode::Inductive)?;
                let five = summarize(&pipeline::run_episodes(&c.with("shot", 5)?, &v.encoder, &data.novel)?, EvalMode::Inductive)?;
                let _ = writeln!(t, "{loss},{},{},{},{}", one.mean, one.ci95, five.mean, five.ci95);
                variants.push(v);
            }
            t
        }
        "temperature" => {
            let hots = cfg.f64_list("tau_hot_grid")?;
            let mut t = String::from("tau_cold");
            for h in &hots {
                let _ = write!(t, ",tau_hot_{h}");
            }
            t.push('\n');
            for cold in cfg.f64_list("tau_cold_grid")? {
                let _ = write!(t, "{cold}");
                for &hot in &hots {
                    let c = cfg.with("tau_cold", cold)?.with("tau_hot", hot)?;
                    let v = run_variant(format!("cold {cold} / hot {hot}"), &c, &data, &teacher)?;
                    let _ = write!(t, ",{}", summarize(&v.outcomes, EvalMode::Inductive)?.mean);
                    variants.push(v);
                }
                t.push('\n');
            }
            t
        }
        "batch" => {
            let mut t = String::from("batch_size,mean,ci95\n");
            for b in cfg.usize_list("batch_sizes")? {
                let c = cfg.with("batch_size", b)?;
                let v = run_variant(format!("batch {b}"), &c, &data, &teacher)?;
                let s = summarize(&v.outcomes, EvalMode::Inductive)?;
                let _ = writeln!(t, "{b},{},{}", s.mean, s.ci95);
                variants.push(v);
            }
            t
        }
        other => {
            return Err(Error::Config(format!(
                "study = '{other}' must be loss, temperature or batch"
            )))
        }
    };
    let mut files = Artifacts::new(out)?;
    files.write(&format!("ablate_{study}.csv"), table)?;
    files.write(&format!("ablate_{study}_curves.csv"), curves_csv(&variants))?;
    files.write(
        &format!("ablate_{study}.svg"),
        curves_svg(&format!("accuracy during training ({study})"), &variants),
    )?;
    files.commit();
    Ok(Status::Pass)
}

pub fn compare_losses(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let data = pipeline::load_data(cfg)?;
    let teacher = pipeline::build_teacher(cfg, &data)?;
    let mut csv = String::from("loss,mode,mean,ci95,episodes,way,shot,query\n");
    for loss in ["cl", "scl", "sacl"] {
        let c = cfg.with("loss", loss)?;
        let enc = train_embedding(&data.base, &teacher, &pipeline::train_config(&c)?)?.encoder;
        let outcomes = pipeline::run_episodes(&c, &enc, &data.novel)?;
        for mode in [EvalMode::Inductive, EvalMode::Transductive] {
            let s = summarize(&outcomes, mode)?;
            let _ = writeln!(
                csv,
                "{loss},{},{},{},{},{},{},{}",
                mode.name(),
                s.mean,
                s.ci95,
                outcomes.len(),
                c.usize("way")?,
                c.usize("shot")?,
                c.usize("query")?
            );
            println!("{loss} {}: {:.4} ± {:.4}", mode.name(), s.mean, s.ci95);
        }
    }
    let mut files = Artifacts::new(out)?;
    files.write("compare_losses.csv", csv)?;
    files.commit();
    Ok(Status::Pass)
}
