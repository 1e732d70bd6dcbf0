//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are namespaced:
//!
//! | key | meaning |
//! |-----|---------|
//! | `dgp.k` | consideration-set size |
//! | `dgp.n_queries`, `dgp.n_items` | dataset and catalog size |
//! | `dgp.q` | creator treatment probability |
//! | `dgp.noise_sd` | outcome noise standard deviation |
//! | `dgp.spec` | `table1`, `no-uplift`, `flat` or `sharp` |
//! | `dgp.seed` | dataset seed |
//! | `dgp.treatment` | `random`, `all` or `none` |
//! | `study.replications`, `study.folds`, `study.oracle_n`, `study.base_seed`, `study.threads` | Monte Carlo study |
//! | `study.estimators` | comma list of `db, ht-dim, ha-dim, ipw, aipw, pdl` |
//! | `net.hidden` | comma list of hidden widths |
//! | `train.*` | `learning_rate, epochs, batch_size, seed, validation_fraction, early_stop_patience, output_clamp` |
//! | `hessian.*` | `mode` (`auto`, `exact`, `montecarlo`), `mc_draws`, `exact_max_k`, `seed` |
//! | `estimate.*` | `estimators`, `q`, `folds`, `seed`, `force` |
//! | `oracle.n` | oracle sample size |
//! | `check.seed`, `check.orthogonality_draws` | invariant suite |
//! | `io.in`, `io.out`, `io.csv` | file paths |
//!
//! Command-line flags write the same keys after the file is read, so flags
//! win.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use gte_core::debiased::{HessianMode, HessianPolicy};
use gte_core::nnet::{NetConfig, TrainConfig};
use gte_core::simulator::{DgpConfig, ScoreSpec};

pub const KEYS: &[&str] = &[
    "dgp.k",
    "dgp.n_queries",
    "dgp.n_items",
    "dgp.q",
    "dgp.noise_sd",
    "dgp.spec",
    "dgp.seed",
    "dgp.treatment",
    "study.replications",
    "study.folds",
    "study.estimators",
    "study.oracle_n",
    "study.base_seed",
    "study.threads",
    "net.hidden",
    "train.learning_rate",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.validation_fraction",
    "train.early_stop_patience",
    "train.output_clamp",
    "hessian.mode",
    "hessian.mc_draws",
    "hessian.exact_max_k",
    "hessian.seed",
    "estimate.estimators",
    "estimate.q",
    "estimate.folds",
    "estimate.seed",
    "estimate.force",
    "oracle.n",
    "check.seed",
    "check.orthogonality_draws",
    "io.in",
    "io.out",
    "io.csv",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { path: origin.into(), line: i + 1, msg: format!("expected `key = value`, got `{line}`") });
            };
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }

    /// Sets `key` when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), ConfigError> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| ConfigError::BadValue { key: key.into(), value: v.into() }))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|_| ConfigError::BadValue { key: key.into(), value: s.into() }))
                    .collect()
            })
            .transpose()
    }

    pub fn dgp(&self) -> Result<DgpConfig, ConfigError> {
        let d = DgpConfig::default();
        let spec = match self.raw("dgp.spec") {
            Some(s) => ScoreSpec::from_name(s).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => d.score_spec,
        };
        let treatment_override = match self.raw("dgp.treatment").unwrap_or("random") {
            "random" => None,
            "all" => Some(true),
            "none" => Some(false),
            v => return Err(ConfigError::BadValue { key: "dgp.treatment".into(), value: v.into() }),
        };
        let cfg = DgpConfig {
            n_items: self.get_or("dgp.n_items", d.n_items)?,
            n_queries: self.get_or("dgp.n_queries", d.n_queries)?,
            set_size: self.get_or("dgp.k", d.set_size)?,
            treat_prob: self.get_or("dgp.q", d.treat_prob)?,
            noise_sd: self.get_or("dgp.noise_sd", d.noise_sd)?,
            score_spec: spec,
            seed: self.get_or("dgp.seed", d.seed)?,
            treatment_override,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn net(&self) -> Result<NetConfig, ConfigError> {
        let hidden = self.list("net.hidden")?.unwrap_or_else(|| NetConfig::default().hidden);
        if hidden.contains(&0) {
            return Err(ConfigError::Invalid("net.hidden widths must be positive".into()));
        }
        Ok(NetConfig { hidden })
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.get_or("train.learning_rate", d.learning_rate)?,
            epochs: self.get_or("train.epochs", d.epochs)?,
            batch_size: self.get_or("train.batch_size", d.batch_size)?,
            seed: self.get_or("train.seed", d.seed)?,
            validation_fraction: self.get_or("train.validation_fraction", d.validation_fraction)?,
            early_stop_patience: self.get_or("train.early_stop_patience", d.early_stop_patience)?,
            output_clamp: self.get_or("train.output_clamp", d.output_clamp)?,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn hessian(&self) -> Result<HessianPolicy, ConfigError> {
        let d = HessianPolicy::default();
        let mode = match self.raw("hessian.mode") {
            Some(m) => HessianMode::from_name(m).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => d.mode,
        };
        let p = HessianPolicy {
            mode,
            mc_draws: self.get_or("hessian.mc_draws", d.mc_draws)?,
            exact_max_k: self.get_or("hessian.exact_max_k", d.exact_max_k)?,
            seed: self.get_or("hessian.seed", d.seed)?,
        };
        if p.mode == HessianMode::MonteCarlo && p.mc_draws == 0 {
            return Err(ConfigError::Invalid("hessian.mc_draws must be at least 1".into()));
        }
        Ok(p)
    }
}
