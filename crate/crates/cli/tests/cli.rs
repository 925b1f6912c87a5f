use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sacl"))
        .args(args)
        .env_remove("SACL_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn smoke_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let t = sacl(&["train", "--preset", "smoke", "--out", p(&out)]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert_eq!(listing(&out), ["config.txt", "encoder.bin", "teacher.bin", "train_log.csv"]);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iter,loss,lambda,teacher_batch_acc\n"));
    assert_eq!(log.lines().count(), 21);
    assert!(fs::read(out.join("encoder.bin")).unwrap().starts_with(b"SACLENC1"));

    let e = sacl(&["eval", "--out", p(&out), "--gfsl"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("mode,mean,ci95,episodes,way,shot,query"));
    assert!(lines.next().unwrap().starts_with("inductive,"));
    assert!(lines.next().unwrap().starts_with("transductive,"));
    let episodes = fs::read_to_string(out.join("episodes.csv")).unwrap();
    assert!(episodes.starts_with("episode,acc_inductive,acc_transductive\n"));
    assert_eq!(episodes.lines().count(), 51);
    let gfsl = fs::read_to_string(out.join("gfsl.csv")).unwrap();
    assert!(gfsl.starts_with("acc_base,acc_novel,acc_joint,acc_harmonic,base_classes,novel_classes\n"));
}

#[test]
fn same_seed_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let args = ["--preset", "smoke", "--seed", "9", "--threads", threads, "--out", p(&out)];
        assert!(sacl(&[&["train"], &args[..]].concat()).status.success());
        assert!(sacl(&[&["eval"], &args[..]].concat()).status.success());
        runs.push(out);
    }
    for f in ["train_log.csv", "encoder.bin", "episodes.csv", "summary.csv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unwritable_output_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("run");
    let r = sacl(&["train", "--preset", "smoke", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(listing(dir.path()), ["file"]);

    // a directory squatting on a later artifact name makes the write fail midway
    let out = dir.path().join("partial");
    fs::create_dir_all(out.join("train_log.csv")).unwrap();
    let r = sacl(&["train", "--preset", "smoke", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(listing(&out), ["train_log.csv"]);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nbatch_size = 16\nbogus_key = 3\n").unwrap();
    let r = sacl(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus_key"));

    let r = sacl(&["train", "--preset", "smoke", "--set", "nope=1", "--out", p(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let r = sacl(&["eval", "--preset", "smoke", "--out", p(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("encoder.bin"));
    assert!(listing(dir.path()).is_empty());
}

#[test]
fn too_few_episodes_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(sacl(&["train", "--preset", "smoke", "--out", p(&out)]).status.success());
    let r = sacl(&["eval", "--out", p(&out), "--episodes", "1"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn joint_accuracy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(sacl(&["train", "--preset", "smoke", "--out", p(&out)]).status.success());
    let r = sacl(&["eval", "--out", p(&out), "--gfsl-from", "0.5614,0.2535,80,20"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("gfsl.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[2] - 0.4998).abs() <= 5e-4, "{}", row[2]);
    assert_eq!((row[4], row[5]), (80.0, 20.0));
}

#[test]
fn grad_check_and_theorem_pass() {
    let dir = tempfile::tempdir().unwrap();
    let g = sacl(&["grad-check", "--preset", "smoke", "--out", p(dir.path())]);
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stderr));
    let csv = fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24);

    let t = sacl(&["theorem", "--sizes", "200,2000,20000", "--reps", "20", "--out", p(dir.path())]);
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    let rows = fs::read_to_string(dir.path().join("theorem.csv")).unwrap();
    assert!(rows.starts_with("n,rep,error,alignment,uniformity,lhs\n"));
    assert_eq!(rows.lines().count(), 61);
    assert!(dir.path().join("theorem_summary.csv").exists());
}

#[test]
fn ablation_writes_table_curves_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let r = sacl(&["ablate", "--preset", "smoke", "--study", "batch", "--out", p(dir.path())]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = fs::read_to_string(dir.path().join("ablate_batch.csv")).unwrap();
    assert!(table.starts_with("batch_size,mean,ci95\n"));
    assert_eq!(table.lines().count(), 3);
    let svg = fs::read_to_string(dir.path().join("ablate_batch.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(dir.path().join("ablate_batch_curves.csv").exists());
}

#[test]
fn bad_arguments_exit_with_usage_error() {
    let r = sacl(&["train", "--preset", "nonexistent"]);
    assert_eq!(r.status.code(), Some(2));
    let r = sacl(&["frobnicate"]);
    assert_ne!(r.status.code(), Some(0));
}
