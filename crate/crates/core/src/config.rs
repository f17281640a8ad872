//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! missing keys take their defaults. Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Hyperparameters of the miniature two-view network and its training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub feat_dim: usize,
    pub content_dim: usize,
    pub model_dim: usize,
    pub blocks: usize,
    pub decoder_blocks: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub holdout: usize,
    pub eval_every: usize,
    pub sigma: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            depth: 4,
            height: 4,
            width: 4,
            feat_dim: 16,
            content_dim: 8,
            model_dim: 32,
            blocks: 2,
            decoder_blocks: 1,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            holdout: 32,
            eval_every: 100,
            sigma: 0.05,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Benchmark, solver and toy-model settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid_d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feat_dim: usize,
    pub tau: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub outlier_fraction: f64,
    pub instances: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub hypo_sizes: Vec<usize>,
    pub max_refs: usize,
    pub sparse_trials: usize,
    pub bootstrap: usize,
    pub out_dir: String,
    pub toy: ToyConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid_d: 8,
            grid_h: 8,
            grid_w: 8,
            feat_dim: 16,
            tau: 0.1,
            lambda: 1.0,
            sigma: 0.1,
            outlier_fraction: 0.3,
            instances: 500,
            seed: 0,
            methods: ["wcv", "no-weights", "mask-only", "objectness-only"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            hypo_sizes: vec![1000, 10000, 100000],
            max_refs: 7,
            sparse_trials: 100,
            bootstrap: 1000,
            out_dir: "out".to_string(),
            toy: ToyConfig::default(),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn count(value: &str) -> std::result::Result<usize, String> {
    let n: usize = parse(value)?;
    if n == 0 {
        return Err("must be at least 1".into());
    }
    Ok(n)
}

fn dim(value: &str) -> std::result::Result<usize, String> {
    let n = count(value)?;
    if n < 2 {
        return Err("grid extents must be at least 2".into());
    }
    Ok(n)
}

fn positive(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err("must be positive and finite".into());
    }
    Ok(v)
}

fn non_negative(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err("must be non-negative and finite".into());
    }
    Ok(v)
}

fn fraction(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value)?;
    if !(0.0..1.0).contains(&v) {
        return Err("must lie in [0, 1)".into());
    }
    Ok(v)
}

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: std::result::Result<Vec<T>, String> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err("list must be non-empty".into());
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Applies one `key=value` assignment.
    fn set(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        let t = &mut self.toy;
        let r = match key {
            "grid_d" => dim(value).map(|v| self.grid_d = v),
            "grid_h" => dim(value).map(|v| self.grid_h = v),
            "grid_w" => dim(value).map(|v| self.grid_w = v),
            "feat_dim" => count(value).map(|v| self.feat_dim = v),
            "tau" => positive(value).map(|v| self.tau = v),
            "lambda" => positive(value).map(|v| self.lambda = v),
            "sigma" => non_negative(value).map(|v| self.sigma = v),
            "outlier_fraction" => fraction(value).map(|v| self.outlier_fraction = v),
            "instances" => count(value).map(|v| self.instances = v),
            "seed" => parse(value).map(|v| self.seed = v),
            "methods" => list::<String>(value).and_then(|v| {
                for m in &v {
                    crate::harness::Method::parse(m).map_err(|e| e.to_string())?;
                }
                self.methods = v;
                Ok(())
            }),
            "hypo_sizes" => list::<usize>(value).and_then(|v| {
                if v.contains(&0) {
                    return Err("grid sizes must be at least 1".into());
                }
                self.hypo_sizes = v;
                Ok(())
            }),
            "max_refs" => count(value).map(|v| self.max_refs = v),
            "sparse_trials" => count(value).map(|v| self.sparse_trials = v),
            "bootstrap" => count(value).map(|v| self.bootstrap = v),
            "out_dir" => {
                if value.is_empty() {
                    Err("must be non-empty".into())
                } else {
                    self.out_dir = value.to_string();
                    Ok(())
                }
            }
            "toy_depth" => count(value).map(|v| t.depth = v),
            "toy_height" => count(value).map(|v| t.height = v),
            "toy_width" => count(value).map(|v| t.width = v),
            "toy_feat_dim" => count(value).map(|v| t.feat_dim = v),
            "toy_content_dim" => count(value).map(|v| t.content_dim = v),
            "toy_model_dim" => count(value).map(|v| t.model_dim = v),
            "toy_blocks" => count(value).map(|v| t.blocks = v),
            "toy_decoder_blocks" => parse(value).map(|v| t.decoder_blocks = v),
            "toy_steps" => parse(value).map(|v| t.steps = v),
            "toy_batch" => count(value).map(|v| t.batch = v),
            "toy_lr" => non_negative(value).map(|v| t.lr = v),
            "toy_weight_decay" => non_negative(value).map(|v| t.weight_decay = v),
            "toy_grad_clip" => non_negative(value).map(|v| t.grad_clip = v),
            "toy_holdout" => count(value).map(|v| t.holdout = v),
            "toy_eval_every" => count(value).map(|v| t.eval_every = v),
            "toy_sigma" => non_negative(value).map(|v| t.sigma = v),
            "toy_outlier_fraction" => fraction(value).map(|v| t.outlier_fraction = v),
            "toy_seed" => parse(value).map(|v| t.seed = v),
            _ => return None,
        };
        Some(r)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.toy;
        vec![
            ("grid_d", self.grid_d.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("sigma", self.sigma.to_string()),
            ("outlier_fraction", self.outlier_fraction.to_string()),
            ("instances", self.instances.to_string()),
            ("seed", self.seed.to_string()),
            ("methods", self.methods.join(",")),
            ("hypo_sizes", join(&self.hypo_sizes)),
            ("max_refs", self.max_refs.to_string()),
            ("sparse_trials", self.sparse_trials.to_string()),
            ("bootstrap", self.bootstrap.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("toy_depth", t.depth.to_string()),
            ("toy_height", t.height.to_string()),
            ("toy_width", t.width.to_string()),
            ("toy_feat_dim", t.feat_dim.to_string()),
            ("toy_content_dim", t.content_dim.to_string()),
            ("toy_model_dim", t.model_dim.to_string()),
            ("toy_blocks", t.blocks.to_string()),
            ("toy_decoder_blocks", t.decoder_blocks.to_string()),
            ("toy_steps", t.steps.to_string()),
            ("toy_batch", t.batch.to_string()),
            ("toy_lr", t.lr.to_string()),
            ("toy_weight_decay", t.weight_decay.to_string()),
            ("toy_grad_clip", t.grad_clip.to_string()),
            ("toy_holdout", t.holdout.to_string()),
            ("toy_eval_every", t.eval_every.to_string()),
            ("toy_sigma", t.sigma.to_string()),
            ("toy_outlier_fraction", t.outlier_fraction.to_string()),
            ("toy_seed", t.seed.to_string()),
        ]
    }

    /// Parses configuration text; line numbers in errors are 1-based.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::InvalidValue {
                    line,
                    key: trimmed.to_string(),
                    reason: "expected key=value".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidValue {
                    line,
                    key: key.to_string(),
                    reason: "key given more than once".into(),
                });
            }
            match cfg.set(key, value) {
                None => {
                    return Err(Error::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Some(Err(reason)) => {
                    return Err(Error::InvalidValue {
                        line,
                        key: key.to_string(),
                        reason,
                    })
                }
                Some(Ok(())) => {}
            }
        }
        Ok(cfg)
    }

    /// Serializes every key, in a form [`Config::parse_str`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").expect("writing to a String");
        }
        out
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::parse_str(&text)
}

pub fn save_config(path: impl AsRef<Path>, cfg: &Config) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cfg.to_text()).map_err(|e| Error::io(path, e))
}
