//! Flat `key = value` run configuration.
//!
//! Values resolve in three layers: built-in defaults, then the `--config`
//! file, then command-line flags. Every value is parsed before any work
//! starts; the resolved set is written to `config.txt` in the run directory
//! so a run can be replayed with `--config <run>/config.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latentloop::inference::InterventionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Path,
    Float,
    Int,
    Bool,
    IntList,
    Mode,
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key { name, kind, default, help }
}

pub const KEYS: &[Key] = &[
    key("out", Kind::Path, "", "run directory (default runs/<command>-<seed>)"),
    key("seed", Kind::Int, "12345", "master seed"),
    key("workers", Kind::Int, "1", "worker threads; results do not depend on it"),
    key("dataset", Kind::Path, "", "training dataset file"),
    key("eval", Kind::Path, "", "evaluation dataset file"),
    key("basis", Kind::Path, "", "PCA basis file"),
    key("checkpoint", Kind::Path, "", "model checkpoint file"),
    key("n_train", Kind::Int, "2000", "synthetic training examples"),
    key("n_eval", Kind::Int, "500", "synthetic evaluation examples (hard only)"),
    key("task_seed", Kind::Int, "7", "seed of the synthetic task structure"),
    key("hard_fraction", Kind::Float, "0.5", "share of hard synthetic queries"),
    key("n_classes", Kind::Int, "4", "synthetic answer classes"),
    key("tau", Kind::Float, "0", "accuracy threshold for latent supervision"),
    key("attempts", Kind::Int, "8", "base-model attempts per query"),
    key("variance_target", Kind::Float, "0.95", "retained variance for the PCA fit"),
    key("epochs", Kind::Int, "2", "training epochs"),
    key("batch_size", Kind::Int, "8", "examples per optimizer step"),
    key("lr", Kind::Float, "1e-5", "backbone peak learning rate"),
    key("lr_latent", Kind::Float, "1e-5", "latent head peak learning rate"),
    key("warmup_ratio", Kind::Float, "0.03", "linear warmup share of all steps"),
    key("weight_decay", Kind::Float, "0.01", "decoupled weight decay"),
    key("lambda_latent", Kind::Float, "1.0", "latent loss weight"),
    key("mix", Kind::Float, "0", "scheduled-sampling replacement probability"),
    key("budget", Kind::Int, "4", "latent tokens per span (perfect square)"),
    key("budgets", Kind::IntList, "0,4,16,36", "sweep budgets"),
    key("seeds", Kind::IntList, "12345,12346,12347", "sweep decode seeds"),
    key("mode", Kind::Mode, "clean", "clean, noise or zero_latent"),
    key("noise_scale", Kind::Float, "1.0", "noise std in units of sqrt(eigenvalue)"),
    key("norm_match", Kind::Bool, "true", "match the centered clean norm under noise"),
    key("ema", Kind::Bool, "false", "EMA norm calibration of injected latents"),
    key("ema_decay", Kind::Float, "0.9", "EMA decay"),
    key("max_tokens", Kind::Int, "32", "text tokens generated per example"),
    key("force_span", Kind::Bool, "true", "open the latent span right after the think prefix"),
    key("grad_examples", Kind::Int, "3", "examples in the gradient check"),
    key("fd_step", Kind::Float, "1e-5", "central-difference step"),
    key("samples_per_tensor", Kind::Int, "6", "random entries checked per tensor"),
    key("grad_tol", Kind::Float, "1e-4", "maximum allowed relative error"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Configuration problem; reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(key: &str, value: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("invalid value '{value}' for key '{key}': {why}"))
}

fn check(kind: Kind, key: &str, value: &str) -> Result<(), ConfigError> {
    match kind {
        Kind::Path => Ok(()),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            Ok(_) => Err(invalid(key, value, "not finite")),
            Err(e) => Err(invalid(key, value, e)),
        },
        Kind::Int => value.parse::<u64>().map(|_| ()).map_err(|e| invalid(key, value, e)),
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|e| invalid(key, value, e)),
        Kind::IntList => parse_list(value).map(|_| ()).map_err(|e| invalid(key, value, e)),
        Kind::Mode => match value {
            "clean" | "noise" | "zero_latent" => Ok(()),
            _ => Err(invalid(key, value, "expected clean, noise or zero_latent")),
        },
    }
}

fn parse_list(value: &str) -> Result<Vec<u64>, std::num::ParseIntError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Fully resolved and validated settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Parses a config file body. Unknown keys are rejected by name.
    pub fn parse_file(text: &str) -> Result<Vec<(&'static str, String)>, ConfigError> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("config line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = find_key(k).ok_or_else(|| ConfigError(format!("unknown config key '{k}'")))?;
            out.push((key.name, v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        overrides: &[(&'static str, String)],
    ) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<&'static str, String> =
            KEYS.iter().map(|k| (k.name, k.default.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(Self::parse_file(&text)?);
        }
        values.extend(overrides.iter().cloned());
        for k in KEYS {
            check(k.kind, k.name, &values[k.name])?;
        }
        if values["out"].is_empty() {
            values.insert("out", format!("runs/{command}-{}", values["seed"]));
        }
        let cfg = Self {
            command: command.to_string(),
            values,
        };
        if cfg.usize("workers") == 0 {
            return Err(invalid("workers", "0", "must be at least 1"));
        }
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.u64(key) as usize
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key).parse().expect("validated")
    }

    pub fn list(&self, key: &str) -> Vec<u64> {
        parse_list(self.raw(key)).expect("validated")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// An input path that must be set and exist.
    pub fn input(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let p = self
            .path(key)
            .ok_or_else(|| ConfigError(format!("key '{key}' is required for {}", self.command)))?;
        if !p.is_file() {
            return Err(ConfigError(format!("key '{key}': no such file {}", p.display())));
        }
        Ok(p)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn mode(&self) -> InterventionMode {
        match self.raw("mode") {
            "clean" => InterventionMode::Clean,
            "zero_latent" => InterventionMode::ZeroLatent,
            _ => InterventionMode::Noise {
                scale: self.f64("noise_scale"),
                norm_match: self.bool("norm_match"),
            },
        }
    }

    /// The resolved configuration in file form.
    pub fn render(&self) -> String {
        let mut s = format!("# latentloop {} run configuration\n", self.command);
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.name, self.values[k.name]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_and_rendering() {
        let file = RunConfig::parse_file("# c\nlr = 0.5\n\nseed=3 # trailing\n").unwrap();
        let cfg = RunConfig::resolve("train", None, &[file, vec![("seed", "9".into())]].concat()).unwrap();
        assert_eq!(cfg.f64("lr"), 0.5);
        assert_eq!(cfg.u64("seed"), 9);
        assert_eq!(cfg.out_dir(), PathBuf::from("runs/train-9"));
        let again = RunConfig::parse_file(&cfg.render()).unwrap();
        let cfg2 = RunConfig::resolve("train", None, &again).unwrap();
        assert_eq!(cfg.render(), cfg2.render());
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse_file("bogus = 1").unwrap_err();
        assert!(e.0.contains("'bogus'"));
        let e = RunConfig::resolve("train", None, &[("lr", "fast".into())]).unwrap_err();
        assert!(e.0.contains("'lr'"));
        let e = RunConfig::resolve("train", None, &[("budgets", "4,x".into())]).unwrap_err();
        assert!(e.0.contains("'budgets'"));
        let e = RunConfig::resolve("train", None, &[("workers", "0".into())]).unwrap_err();
        assert!(e.0.contains("'workers'"));
    }

    #[test]
    fn mode_parsing() {
        let cfg = RunConfig::resolve("x", None, &[("mode", "noise".into()), ("norm_match", "false".into())]).unwrap();
        assert_eq!(
            cfg.mode(),
            InterventionMode::Noise {
                scale: 1.0,
                norm_match: false
            }
        );
        assert!(RunConfig::resolve("x", None, &[("mode", "loud".into())]).is_err());
    }
}
