//! Flat dotted-key configuration.
//!
//! A config file is a single JSON object whose keys are dotted paths, e.g.
//! `{"gap.mode": "memory", "gap.tau": 0.01}`. Unknown keys and ill-typed
//! values are rejected with the offending key name. Command-line flags are
//! applied on top of the file with [`Config::set`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::decoder::Strategy;
use crate::gap::GapMode;
use crate::types::Aggregation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not a JSON object of dotted keys: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
}

/// Noise variance used by the "viecap-regime" preset.
pub const VIECAP_SIGMA2: f64 = 16e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub name: String,
    pub dim: usize,
    pub patch_size: u32,
    pub input_resolution: u32,
    pub seed: u64,
    pub attention: bool,
    pub grid_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapConfig {
    pub mode: GapMode,
    pub tau: f64,
    pub sigma2: f64,
    pub preset: String,
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub checkpoint: Option<PathBuf>,
    pub strategy: Strategy,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub cache_bytes: usize,
    pub max_image_bytes: usize,
    pub workers: usize,
    pub queue: usize,
    pub cors_origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub jobs: usize,
    /// Scorer used per box by the dense mAP: a plugin name, or `rouge_l`.
    /// A plugin name without a configured plugin falls back to ROUGE-L.
    pub dense_similarity: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    pub url: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub concurrency: usize,
    pub rate_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub gap: GapConfig,
    pub aggregation: Aggregation,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub service: ServiceConfig,
    pub eval: EvalConfig,
    pub llm: LlmConfig,
    /// External scorer commands keyed by metric name (`metrics.plugin.<name>`).
    pub plugins: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                name: "synthetic".into(),
                dim: 64,
                patch_size: 14,
                input_resolution: 518,
                seed: 0,
                attention: true,
                grid_dir: None,
            },
            gap: GapConfig {
                mode: GapMode::Memory,
                tau: 0.01,
                sigma2: 0.08,
                preset: "default".into(),
                bank: None,
            },
            aggregation: Aggregation::Uniform,
            decoder: DecoderConfig {
                checkpoint: None,
                strategy: Strategy::Greedy,
                max_len: 64,
                layers: 4,
                heads: 4,
                d_model: 64,
            },
            train: TrainConfig {
                epochs: 10,
                lr: 1e-5,
                weight_decay: 0.01,
                batch_size: 64,
                seed: 0,
                deterministic: true,
            },
            service: ServiceConfig {
                port: 8080,
                cache_bytes: 256 << 20,
                max_image_bytes: 16 << 20,
                workers: 4,
                queue: 64,
                cors_origin: "*".into(),
            },
            eval: EvalConfig { jobs: 1, dense_similarity: "meteor".into() },
            llm: LlmConfig {
                url: None,
                model: "llama3-8b".into(),
                timeout_secs: 60,
                max_retries: 2,
                concurrency: 4,
                rate_per_sec: 2.0,
            },
            plugins: BTreeMap::new(),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), reason: reason.into() }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| bad(key, format!("expected a number, got {v}")))
}

fn as_positive(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = as_f64(key, v)?;
    if x <= 0.0 {
        return Err(bad(key, "must be > 0"));
    }
    Ok(x)
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| bad(key, format!("expected a nonnegative integer, got {v}")))
}

fn as_count(key: &str, v: &Value) -> Result<usize, ConfigError> {
    let x = as_usize(key, v)?;
    if x == 0 {
        return Err(bad(key, "must be >= 1"));
    }
    Ok(x)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| bad(key, format!("expected a string, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| bad(key, format!("expected a boolean, got {v}")))
}

impl Config {
    /// Reads a config file; an empty file yields all defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        if text.trim().is_empty() {
            return Ok(cfg);
        }
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(ConfigError::Syntax("top level must be an object".into()));
        };
        // presets first so explicit keys override them
        if let Some(preset) = map.get("gap.preset") {
            cfg.set("gap.preset", preset.clone())?;
        }
        for (key, value) in map.iter().filter(|(k, _)| k.as_str() != "gap.preset") {
            cfg.set(key, value.clone())?;
        }
        Ok(cfg)
    }

    /// Sets one dotted key, validating its value.
    pub fn set(&mut self, key: &str, v: Value) -> Result<(), ConfigError> {
        match key {
            "backbone.name" => self.backbone.name = as_str(key, &v)?.to_string(),
            "backbone.dim" => self.backbone.dim = as_count(key, &v)?,
            "backbone.patch_size" => self.backbone.patch_size = as_count(key, &v)? as u32,
            "backbone.input_resolution" => self.backbone.input_resolution = as_count(key, &v)? as u32,
            "backbone.seed" => self.backbone.seed = as_usize(key, &v)? as u64,
            "backbone.attention" => self.backbone.attention = as_bool(key, &v)?,
            "backbone.grid_dir" => self.backbone.grid_dir = Some(as_str(key, &v)?.into()),
            "gap.mode" => {
                self.gap.mode = as_str(key, &v)?.parse().map_err(|e: String| bad(key, e))?;
            }
            "gap.tau" => self.gap.tau = as_positive(key, &v)?,
            "gap.sigma2" => {
                let s = as_f64(key, &v)?;
                if s < 0.0 {
                    return Err(bad(key, "variance must be nonnegative"));
                }
                self.gap.sigma2 = s;
            }
            "gap.preset" => {
                match as_str(key, &v)? {
                    "default" => {}
                    "viecap-regime" => {
                        self.gap.sigma2 = VIECAP_SIGMA2;
                        self.train.epochs = 15;
                        self.train.batch_size = 80;
                        self.train.lr = 2e-5;
                    }
                    other => return Err(bad(key, format!("unknown preset `{other}`"))),
                }
                self.gap.preset = as_str(key, &v)?.to_string();
            }
            "gap.bank" => self.gap.bank = Some(as_str(key, &v)?.into()),
            "regions.aggregation" => {
                self.aggregation = as_str(key, &v)?.parse().map_err(|e: String| bad(key, e))?;
            }
            "decoder.checkpoint" => self.decoder.checkpoint = Some(as_str(key, &v)?.into()),
            "decoder.strategy" => {
                self.decoder.strategy = match as_str(key, &v)? {
                    "greedy" => Strategy::Greedy,
                    "beam" => Strategy::Beam(3),
                    other => {
                        let k = other
                            .strip_prefix("beam:")
                            .and_then(|k| k.parse::<usize>().ok())
                            .filter(|k| *k >= 1)
                            .ok_or_else(|| bad(key, format!("expected greedy, beam or beam:<k>, got `{other}`")))?;
                        Strategy::Beam(k)
                    }
                }
            }
            "decoder.max_len" => self.decoder.max_len = as_count(key, &v)?,
            "decoder.layers" => self.decoder.layers = as_count(key, &v)?,
            "decoder.heads" => self.decoder.heads = as_count(key, &v)?,
            "decoder.d_model" => self.decoder.d_model = as_count(key, &v)?,
            "train.epochs" => self.train.epochs = as_count(key, &v)?,
            "train.lr" => self.train.lr = as_positive(key, &v)?,
            "train.weight_decay" => {
                let wd = as_f64(key, &v)?;
                if wd < 0.0 {
                    return Err(bad(key, "must be nonnegative"));
                }
                self.train.weight_decay = wd;
            }
            "train.batch_size" => self.train.batch_size = as_count(key, &v)?,
            "train.seed" => self.train.seed = as_usize(key, &v)? as u64,
            "train.deterministic" => self.train.deterministic = as_bool(key, &v)?,
            "service.port" => {
                let p = as_usize(key, &v)?;
                self.service.port = u16::try_from(p).map_err(|_| bad(key, "port out of range"))?;
            }
            "service.cache_bytes" => self.service.cache_bytes = as_usize(key, &v)?,
            "service.max_image_bytes" => self.service.max_image_bytes = as_count(key, &v)?,
            "service.workers" => self.service.workers = as_count(key, &v)?,
            "service.queue" => self.service.queue = as_usize(key, &v)?,
            "service.cors_origin" => self.service.cors_origin = as_str(key, &v)?.to_string(),
            "eval.jobs" => self.eval.jobs = as_count(key, &v)?,
            "eval.dense_similarity" => self.eval.dense_similarity = as_str(key, &v)?.to_string(),
            "llm.url" => self.llm.url = Some(as_str(key, &v)?.to_string()),
            "llm.model" => self.llm.model = as_str(key, &v)?.to_string(),
            "llm.timeout_secs" => self.llm.timeout_secs = as_count(key, &v)? as u64,
            "llm.max_retries" => self.llm.max_retries = as_usize(key, &v)?,
            "llm.concurrency" => self.llm.concurrency = as_count(key, &v)?,
            "llm.rate_per_sec" => self.llm.rate_per_sec = as_positive(key, &v)?,
            _ => {
                if let Some(name) = key.strip_prefix("metrics.plugin.").filter(|n| !n.is_empty()) {
                    self.plugins.insert(name.to_string(), as_str(key, &v)?.to_string());
                } else {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Flat snapshot of every key, sufficient to rebuild this config.
    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let path = |m: &mut BTreeMap<String, Value>, key: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                m.insert(key.to_string(), json!(p.display().to_string()));
            }
        };
        m.insert("backbone.name".into(), json!(self.backbone.name));
        m.insert("backbone.dim".into(), json!(self.backbone.dim));
        m.insert("backbone.patch_size".into(), json!(self.backbone.patch_size));
        m.insert("backbone.input_resolution".into(), json!(self.backbone.input_resolution));
        m.insert("backbone.seed".into(), json!(self.backbone.seed));
        m.insert("backbone.attention".into(), json!(self.backbone.attention));
        path(&mut m, "backbone.grid_dir", &self.backbone.grid_dir);
        m.insert("gap.mode".into(), json!(self.gap.mode.to_string()));
        m.insert("gap.tau".into(), json!(self.gap.tau));
        m.insert("gap.sigma2".into(), json!(self.gap.sigma2));
        m.insert("gap.preset".into(), json!(self.gap.preset));
        path(&mut m, "gap.bank", &self.gap.bank);
        m.insert("regions.aggregation".into(), json!(self.aggregation.to_string()));
        path(&mut m, "decoder.checkpoint", &self.decoder.checkpoint);
        m.insert("decoder.strategy".into(), json!(self.decoder.strategy.to_string()));
        m.insert("decoder.max_len".into(), json!(self.decoder.max_len));
        m.insert("decoder.layers".into(), json!(self.decoder.layers));
        m.insert("decoder.heads".into(), json!(self.decoder.heads));
        m.insert("decoder.d_model".into(), json!(self.decoder.d_model));
        m.insert("train.epochs".into(), json!(self.train.epochs));
        m.insert("train.lr".into(), json!(self.train.lr));
        m.insert("train.weight_decay".into(), json!(self.train.weight_decay));
        m.insert("train.batch_size".into(), json!(self.train.batch_size));
        m.insert("train.seed".into(), json!(self.train.seed));
        m.insert("train.deterministic".into(), json!(self.train.deterministic));
        m.insert("service.port".into(), json!(self.service.port));
        m.insert("service.cache_bytes".into(), json!(self.service.cache_bytes));
        m.insert("service.max_image_bytes".into(), json!(self.service.max_image_bytes));
        m.insert("service.workers".into(), json!(self.service.workers));
        m.insert("service.queue".into(), json!(self.service.queue));
        m.insert("service.cors_origin".into(), json!(self.service.cors_origin));
        m.insert("eval.jobs".into(), json!(self.eval.jobs));
        m.insert("eval.dense_similarity".into(), json!(self.eval.dense_similarity));
        if let Some(url) = &self.llm.url {
            m.insert("llm.url".into(), json!(url));
        }
        m.insert("llm.model".into(), json!(self.llm.model));
        m.insert("llm.timeout_secs".into(), json!(self.llm.timeout_secs));
        m.insert("llm.max_retries".into(), json!(self.llm.max_retries));
        m.insert("llm.concurrency".into(), json!(self.llm.concurrency));
        m.insert("llm.rate_per_sec".into(), json!(self.llm.rate_per_sec));
        for (name, cmd) in &self.plugins {
            m.insert(format!("metrics.plugin.{name}"), json!(cmd));
        }
        m
    }
}
