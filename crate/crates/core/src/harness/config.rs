//! Run configuration: a TOML document with nested `task`, `model`,
//! `normalization` and `baselines` sections. Every field has a default and
//! unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::tasks::TaskSpec;
use crate::tuner::{Normalization, NormalizationMode};

/// Weighting method driving the backbone cotangent.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Equal,
    Grap,
    GradNorm,
    Dwa,
    Mgda,
    PcGrad,
    Fixed(Vec<f64>),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Equal => "equal",
            Method::Grap => "grap",
            Method::GradNorm => "gradnorm",
            Method::Dwa => "dwa",
            Method::Mgda => "mgda",
            Method::PcGrad => "pcgrad",
            Method::Fixed(_) => "fixed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Fixed(w) => {
                let parts: Vec<String> = w.iter().map(|v| format!("{v:?}")).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "equal" => Method::Equal,
            "grap" => Method::Grap,
            "gradnorm" => Method::GradNorm,
            "dwa" => Method::Dwa,
            "mgda" => Method::Mgda,
            "pcgrad" => Method::PcGrad,
            _ => {
                let Some(list) = s.strip_prefix("fixed:") else {
                    return Err(Error::Config(format!("unknown method {s:?}")));
                };
                let w = list
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("bad fixed weights {list:?}: {e}")))?;
                Method::Fixed(w)
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of the backbone; the embedding width is `task.d`.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Activation applied to the embedding itself.
    pub embedding_activation: Activation,
    /// Hidden widths of every pretraining head.
    pub head_hidden: Vec<usize>,
    /// Hidden widths of the downstream head.
    pub downstream_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            activation: Activation::Tanh,
            embedding_activation: Activation::Identity,
            head_hidden: Vec::new(),
            downstream_hidden: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    pub mode: NormalizationMode,
    pub detach_norm: bool,
    /// Lower clamp for tuned weights.
    pub floor: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            mode: NormalizationMode::CompositeGrad,
            detach_norm: false,
            floor: 0.0,
        }
    }
}

impl NormalizationConfig {
    pub fn normalization(&self) -> Normalization {
        Normalization {
            mode: self.mode,
            detach_norm: self.detach_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub gradnorm_alpha: f64,
    pub dwa_window: usize,
    pub dwa_temperature: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            gradnorm_alpha: 1.5,
            dwa_window: 50,
            dwa_temperature: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Backbone learning rate.
    pub lr: f64,
    /// Weight learning rate; defaults to `lr`.
    pub lr_w: Option<f64>,
    /// Pretraining-head learning rate; defaults to `lr`.
    pub lr_heads: Option<f64>,
    /// Downstream-head learning rate; defaults to `lr`.
    pub lr_downstream: Option<f64>,
    /// Trajectory rows are written every `eval_every` steps and at the end.
    pub eval_every: usize,
    /// Fraction of the weight trajectory skipped before taking medians.
    pub burn_in: f64,
    /// Record wall-clock step time; off keeps trajectories byte-stable.
    pub log_timing: bool,
    pub output_dir: Option<PathBuf>,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub normalization: NormalizationConfig,
    pub baselines: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Grap,
            seed: 0,
            steps: 1500,
            batch_size: 128,
            lr: 0.05,
            lr_w: None,
            lr_heads: None,
            lr_downstream: None,
            eval_every: 10,
            burn_in: 0.2,
            log_timing: false,
            output_dir: None,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            normalization: NormalizationConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config; `task.seed` falls back to `seed`.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let task_seed_given = table
            .get("task")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !task_seed_given {
            cfg.task.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets both the run seed and the task seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.task.seed = seed;
        self
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn lr_w(&self) -> f64 {
        self.lr_w.unwrap_or(self.lr)
    }

    pub fn lr_heads(&self) -> f64 {
        self.lr_heads.unwrap_or(self.lr)
    }

    pub fn lr_downstream(&self) -> f64 {
        self.lr_downstream.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lr", self.lr),
            ("lr_heads", self.lr_heads()),
            ("lr_downstream", self.lr_downstream()),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let lr_w = self.lr_w();
        if !(lr_w.is_finite() && lr_w >= 0.0) {
            return bad(format!("lr_w must be nonnegative, got {lr_w}"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!("burn_in {} outside [0, 1)", self.burn_in));
        }
        if !(self.normalization.floor.is_finite() && self.normalization.floor >= 0.0) {
            return bad(format!("weight floor {}", self.normalization.floor));
        }
        let b = &self.baselines;
        if !(b.gradnorm_alpha.is_finite() && b.dwa_temperature > 0.0 && b.dwa_window > 0) {
            return bad("invalid baseline hyperparameters".into());
        }
        if self.model.hidden.contains(&0) || self.model.head_hidden.contains(&0) || self.model.downstream_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if let Method::Fixed(w) = &self.method {
            if w.len() != self.task.num_losses() {
                return bad(format!(
                    "fixed method has {} weights for {} losses",
                    w.len(),
                    self.task.num_losses()
                ));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("fixed weights must be finite and nonnegative".into());
            }
        }
        self.task.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Resolved TOML preceded by a comment line carrying its hash.
    pub fn echo(&self) -> Result<String> {
        let body = self.to_toml()?;
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        Ok(format!("# content-sha256: {hash}\n{body}"))
    }
}
