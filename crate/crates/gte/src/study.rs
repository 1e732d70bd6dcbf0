//! Monte Carlo replication study: bias, spread, estimated SE and coverage
//! of every estimator against the simulator's ground-truth GTE.
//!
//! Every replication draws a fresh catalog, and its truth is the GTE of that
//! catalog. Catalog-to-catalog movement of the GTE is not something a
//! single experiment can see, so scoring against the population value would
//! charge it to every estimator. The population GTE is reported alongside.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use anyhow::Result;
use gte_core::baselines::{self, BaselineReport, OutcomeModel};
use gte_core::debiased::{self, DebiasedConfig, HessianPolicy};
use gte_core::nnet::{NetConfig, TrainConfig};
use gte_core::rng::{self, Stream};
use gte_core::simulator::{self, Dataset, DgpConfig, OracleGte};
use gte_core::stats;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, Settings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Estimator {
    #[serde(rename = "DB")]
    Db,
    #[serde(rename = "HT-DIM")]
    HtDim,
    #[serde(rename = "HA-DIM")]
    HaDim,
    #[serde(rename = "IPW")]
    Ipw,
    #[serde(rename = "AIPW")]
    Aipw,
    #[serde(rename = "PDL")]
    Pdl,
}

impl Estimator {
    pub const ALL: [Estimator; 6] =
        [Estimator::Db, Estimator::HtDim, Estimator::HaDim, Estimator::Ipw, Estimator::Aipw, Estimator::Pdl];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Db => "DB",
            Estimator::HtDim => "HT-DIM",
            Estimator::HaDim => "HA-DIM",
            Estimator::Ipw => "IPW",
            Estimator::Aipw => "AIPW",
            Estimator::Pdl => "PDL",
        }
    }

    /// Whether the estimator trains networks.
    pub fn uses_nets(self) -> bool {
        matches!(self, Estimator::Db | Estimator::Aipw | Estimator::Pdl)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Estimator::ALL
            .into_iter()
            .find(|e| e.label().to_ascii_lowercase() == lower)
            .ok_or_else(|| format!("unknown estimator `{s}` (expected db, ht-dim, ha-dim, ipw, aipw or pdl)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    pub folds: usize,
    pub estimators: Vec<Estimator>,
    pub oracle_n: usize,
    pub hessian: HessianPolicy,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub base_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            replications: 100,
            folds: 3,
            estimators: Estimator::ALL.to_vec(),
            oracle_n: 100_000,
            hessian: HessianPolicy::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            base_seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let d = StudyConfig::default();
        let cfg = StudyConfig {
            dgp: s.dgp()?,
            replications: s.get_or("study.replications", d.replications)?,
            folds: s.get_or("study.folds", d.folds)?,
            estimators: s.list("study.estimators")?.unwrap_or(d.estimators),
            oracle_n: s.get_or("study.oracle_n", d.oracle_n)?,
            hessian: s.hessian()?,
            net: s.net()?,
            train: s.train()?,
            base_seed: s.get_or("study.base_seed", d.base_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replications == 0 {
            return Err(ConfigError::Invalid("study.replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(ConfigError::Invalid("study.estimators must name at least one estimator".into()));
        }
        if self.oracle_n == 0 {
            return Err(ConfigError::Invalid("study.oracle_n must be at least 1".into()));
        }
        if self.folds < 2 && self.estimators.contains(&Estimator::Db) {
            return Err(ConfigError::Invalid("study.folds must be at least 2 for DB".into()));
        }
        self.dgp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Dataset configuration of replication `rep`.
    pub fn replication_dgp(&self, rep: usize) -> DgpConfig {
        DgpConfig { seed: rng::mix(self.base_seed, rep as u64, Stream::Replication as u64), ..self.dgp.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replicate {
    pub rep: usize,
    pub estimator: Estimator,
    pub tau_hat: f64,
    pub se: f64,
    /// GTE of this replication's catalog.
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub rep: usize,
    pub estimator: Estimator,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub k: usize,
    pub replications: usize,
    pub failures: usize,
    /// Mean of `tau_hat - truth`, each replication against its own catalog.
    pub bias_mean: f64,
    /// Monte Carlo SD over the square root of the number of replications.
    pub bias_se: f64,
    /// SD of `tau_hat - truth` across replications.
    pub mc_sd: f64,
    pub est_se_mean: f64,
    /// Share of 95% intervals that contain the replication's truth.
    pub coverage: f64,
    /// Mean of `tau_hat` minus the population GTE.
    pub bias_population: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub k: usize,
    /// Population GTE (infinite catalog).
    pub oracle: OracleGte,
    pub summaries: Vec<EstimatorSummary>,
    pub replicates: Vec<Replicate>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("{estimator} failed in {failed} of {total} replications (first: {first})")]
    TooManyFailures { estimator: Estimator, failed: usize, total: usize, first: String },
}

/// Table-1 statistics of `(tau_hat, se, truth)` triples. `gte` is the
/// population value, used only for `bias_population`.
pub fn summarize(estimator: Estimator, k: usize, draws: &[(f64, f64, f64)], failures: usize, gte: f64) -> EstimatorSummary {
    let errs: Vec<f64> = draws.iter().map(|d| d.0 - d.2).collect();
    let taus: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let ses: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let mc_sd = if errs.len() > 1 { stats::sd(&errs) } else { f64::NAN };
    let covered = draws.iter().filter(|(t, s, truth)| (t - truth).abs() <= stats::Z95 * s).count();
    EstimatorSummary {
        estimator,
        k,
        replications: draws.len(),
        failures,
        bias_mean: stats::mean(&errs),
        bias_se: mc_sd / (draws.len() as f64).sqrt(),
        mc_sd,
        est_se_mean: stats::mean(&ses),
        coverage: covered as f64 / draws.len() as f64,
        bias_population: stats::mean(&taus) - gte,
    }
}

fn pair(r: &BaselineReport) -> (f64, f64) {
    (r.tau_hat, r.se)
}

/// Runs every configured estimator on replication `rep`.
pub fn run_replication(config: &StudyConfig, rep: usize) -> Vec<Result<Replicate, Failure>> {
    let dgp = config.replication_dgp(rep);
    let fail = |estimator, error: String| Failure { rep, estimator, error };
    let dataset = match simulator::simulate(&dgp) {
        Ok(d) => d,
        Err(e) => return config.estimators.iter().map(|&est| Err(fail(est, e.to_string()))).collect(),
    };
    let truth = match simulator::catalog_gte(dataset.catalog(), &dgp, config.oracle_n) {
        Ok(o) => o.gte,
        Err(e) => return config.estimators.iter().map(|&est| Err(fail(est, e.to_string()))).collect(),
    };
    let mut outcome_model: Option<Result<baselines::PdlModel, String>> = None;
    let mut results = Vec::with_capacity(config.estimators.len());
    for &est in &config.estimators {
        let r = estimate_on(est, &dataset, config, dgp.seed, &mut outcome_model);
        results.push(match r {
            Ok((tau_hat, se)) => Ok(Replicate { rep, estimator: est, tau_hat, se, truth }),
            Err(e) => Err(fail(est, e)),
        });
    }
    results
}

fn estimate_on(
    est: Estimator,
    dataset: &Dataset,
    config: &StudyConfig,
    seed: u64,
    outcome_model: &mut Option<Result<baselines::PdlModel, String>>,
) -> Result<(f64, f64), String> {
    let q = config.dgp.treat_prob;
    let err = |e: gte_core::Error| e.to_string();
    match est {
        Estimator::Db => {
            let cfg = DebiasedConfig {
                folds: config.folds,
                treat_prob: q,
                net: config.net.clone(),
                train: config.train.clone(),
                hessian: config.hessian.clone(),
                seed,
            };
            debiased::estimate_gte(dataset, &cfg).map(|r| (r.tau_hat, r.se)).map_err(err)
        }
        Estimator::HtDim => baselines::ht_dim(dataset, q).map(|r| pair(&r)).map_err(err),
        Estimator::HaDim => baselines::ha_dim(dataset).map(|r| pair(&r)).map_err(err),
        Estimator::Ipw => baselines::ipw(dataset, q).map(|r| pair(&r)).map_err(err),
        Estimator::Aipw | Estimator::Pdl => {
            let model = outcome_model.get_or_insert_with(|| {
                let train = TrainConfig { seed: rng::mix(seed, 0, Stream::Init as u64), ..config.train.clone() };
                baselines::fit_pdl(dataset, &config.net, &train).map_err(err)
            });
            let model: &dyn OutcomeModel = model.as_ref().map_err(Clone::clone)?;
            let r = if est == Estimator::Aipw {
                baselines::aipw(dataset, q, model)
            } else {
                baselines::contrast_report(dataset, model, "PDL")
            };
            r.map(|r| pair(&r)).map_err(err)
        }
    }
}

/// Runs the study on the current rayon pool. Results do not depend on the
/// number of workers.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let oracle = simulator::oracle_gte(&DgpConfig { seed: config.base_seed, ..config.dgp.clone() }, config.oracle_n)?;
    let mut per_rep: Vec<(usize, Vec<Result<Replicate, Failure>>)> =
        (0..config.replications).into_par_iter().map(|rep| (rep, run_replication(config, rep))).collect();
    per_rep.sort_by_key(|r| r.0);
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (_, results) in per_rep {
        for r in results {
            match r {
                Ok(x) => replicates.push(x),
                Err(f) => failures.push(f),
            }
        }
    }
    let k = config.dgp.set_size;
    let mut summaries = Vec::with_capacity(config.estimators.len());
    for &est in &config.estimators {
        let draws: Vec<(f64, f64, f64)> =
            replicates.iter().filter(|r| r.estimator == est).map(|r| (r.tau_hat, r.se, r.truth)).collect();
        let failed: Vec<&Failure> = failures.iter().filter(|f| f.estimator == est).collect();
        if failed.len() * 10 > config.replications || draws.is_empty() {
            return Err(StudyError::TooManyFailures {
                estimator: est,
                failed: failed.len(),
                total: config.replications,
                first: failed.first().map(|f| f.error.clone()).unwrap_or_default(),
            }
            .into());
        }
        summaries.push(summarize(est, k, &draws, failed.len(), oracle.gte));
    }
    Ok(StudyReport { k, oracle, summaries, replicates, failures })
}

pub const TABLE_COLUMNS: [&str; 7] = ["estimator", "k", "bias_mean", "bias_se", "mc_sd", "est_se_mean", "coverage"];

/// Writes the Table-1 style summary of one or more studies.
pub fn write_table<W: Write>(reports: &[&StudyReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_COLUMNS)?;
    for r in reports {
        for s in &r.summaries {
            w.write_record([
                s.estimator.label().to_string(),
                s.k.to_string(),
                s.bias_mean.to_string(),
                s.bias_se.to_string(),
                s.mc_sd.to_string(),
                s.est_se_mean.to_string(),
                s.coverage.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn study_json(r: &StudyReport) -> Value {
    json!({
        "k": r.k,
        "oracle": {"gte": r.oracle.gte, "mc_se": r.oracle.mc_se},
        "estimators": r.summaries,
        "replicates": r.replicates,
        "failures": r.failures,
    })
}
