//! Layered `key = value` configuration: built-in defaults, then a preset,
//! then a config file, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sacl_core::training::{LambdaMode, LossKind};
use sacl_core::{Error, Result};

/// Every recognized key with its built-in default.
pub const KEYS: &[(&str, &str)] = &[
    // data
    ("dim", "32"),
    ("signal_dim", "6"),
    ("base_classes", "12"),
    ("novel_classes", "5"),
    ("per_class", "200"),
    ("stddev", "0.45"),
    ("angle", "0.15"),
    ("confusable", "0:12,1:13"),
    ("base_csv", ""),
    ("novel_csv", ""),
    // teacher
    ("teacher_epochs", "200"),
    ("teacher_lr", "0.001"),
    ("teacher_batch", "64"),
    // encoder training
    ("batch_size", "128"),
    ("iterations", "500"),
    ("lr", "0.001"),
    ("tau_hot", "2.5"),
    ("tau_cold", "0.05"),
    ("lambda", "adaptive"),
    ("loss", "sacl"),
    ("noise_sigma", "0.1"),
    ("scale_lo", "0.8"),
    ("scale_hi", "1.2"),
    ("hidden", "64,64"),
    ("out_dim", "32"),
    // evaluation
    ("way", "5"),
    ("shot", "1"),
    ("query", "15"),
    ("episodes", "1000"),
    ("mode", "both"),
    ("gfsl_shot", "5"),
    ("gfsl_test_per_class", "50"),
    // theorem study
    ("theorem_classes", "5"),
    ("theorem_dim", "16"),
    ("theorem_tau", "0.5"),
    ("theorem_sizes", "200,2000,20000"),
    ("theorem_reps", "20"),
    ("concentration", "4"),
    // gradient check
    ("grad_reps", "5"),
    ("grad_step", "1e-6"),
    // ablations
    ("study", "loss"),
    ("eval_every", "50"),
    ("curve_episodes", "200"),
    ("batch_sizes", "64,128,256,512,1024"),
    ("tau_cold_grid", "0.05,0.1,0.5"),
    ("tau_hot_grid", "2.5,5.0,7.5"),
    // run
    ("seed", "0"),
];

pub const PRESETS: &[&str] = &["synthetic-default", "smoke"];

/// Overrides applied by a preset on top of the defaults.
pub fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "synthetic-default" => Ok(&[]),
        "smoke" => Ok(&[
            ("per_class", "40"),
            ("teacher_epochs", "10"),
            ("batch_size", "32"),
            ("iterations", "20"),
            ("episodes", "50"),
            ("gfsl_test_per_class", "10"),
            ("theorem_sizes", "50,200,800"),
            ("theorem_reps", "5"),
            ("grad_reps", "1"),
            ("eval_every", "10"),
            ("curve_episodes", "20"),
            ("batch_sizes", "16,32"),
        ]),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Resolved configuration values.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .find(|(k, _)| *k == key)
        .map(|(k, _)| *k)
        .ok_or_else(|| Error::Config(format!("unknown configuration key '{key}'")))
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let k = k.trim();
        known(k).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// `env_seed` applies only when neither the file nor the overrides set `seed`.
    pub fn resolve(
        preset_name: Option<&str>,
        file: Option<&Path>,
        env_seed: Option<u64>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> =
            KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect();
        for &(k, v) in preset(preset_name.unwrap_or("synthetic-default"))? {
            values.insert(known(k)?, v.to_string());
        }
        if let Some(seed) = env_seed {
            values.insert("seed", seed.to_string());
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            for (k, v) in parse_config(&text)? {
                values.insert(known(&k)?, v);
            }
        }
        for (k, v) in overrides {
            values.insert(known(k)?, v.clone());
        }
        let cfg = Self { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn defaults() -> Self {
        Self::resolve(None, None, None, &[]).expect("defaults are valid")
    }

    /// Type-checks every key.
    fn validate(&self) -> Result<()> {
        for key in [
            "dim", "signal_dim", "base_classes", "novel_classes", "per_class", "teacher_epochs",
            "teacher_batch", "batch_size", "iterations", "out_dim", "way", "shot", "query",
            "episodes", "gfsl_shot", "gfsl_test_per_class", "theorem_classes", "theorem_dim",
            "theorem_reps", "grad_reps", "eval_every", "curve_episodes",
        ] {
            self.usize(key)?;
        }
        for key in [
            "stddev", "angle", "teacher_lr", "lr", "tau_hot", "tau_cold", "noise_sigma", "scale_lo",
            "scale_hi", "theorem_tau", "concentration", "grad_step",
        ] {
            self.f64(key)?;
        }
        for key in ["hidden", "theorem_sizes", "batch_sizes"] {
            self.usize_list(key)?;
        }
        self.f64_list("tau_cold_grid")?;
        self.f64_list("tau_hot_grid")?;
        self.u64("seed")?;
        self.lambda()?;
        self.loss()?;
        self.pairs("confusable")?;
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("'{key}' is not a configuration key"))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = '{raw}' is not a valid value")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let raw = self.str(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: '{s}' is not a valid entry")))
            })
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
    }

    /// `a:b` pairs separated by commas.
    pub fn pairs(&self, key: &str) -> Result<Vec<(usize, usize)>> {
        let raw = self.str(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                let bad = || Error::Config(format!("{key}: '{p}' is not an 'a:b' pair"));
                let (a, b) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            })
            .collect()
    }

    pub fn lambda(&self) -> Result<LambdaMode> {
        match self.str("lambda") {
            "adaptive" => Ok(LambdaMode::Adaptive),
            other => other
                .parse()
                .map(LambdaMode::Fixed)
                .map_err(|_| Error::Config(format!("lambda = '{other}' is neither 'adaptive' nor a number"))),
        }
    }

    pub fn loss(&self) -> Result<LossKind> {
        self.str("loss").parse()
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed").expect("validated")
    }

    /// Copy with one value replaced.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        let mut next = self.clone();
        next.values.insert(known(key)?, value.to_string());
        next.validate()?;
        Ok(next)
    }

    /// The resolved values as a config file that reproduces this run.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
