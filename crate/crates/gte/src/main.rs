use std::fs::File;
use std::io::{self as stdio, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gte::checks::{run_checks, CheckOptions, Fault};
use gte::config::{ConfigError, Settings};
use gte::io;
use gte::study::{run_study, study_json, write_table, Estimator, StudyConfig};
use gte_core::baselines;
use gte_core::debiased::{estimate_gte, DebiasedConfig};
use gte_core::simulator::{dim_limits, oracle_gte, simulate};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gte", version, about = "Global treatment effect estimation under creator-side randomization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an experiment and write its dataset CSV
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dgp: DgpArgs,
        /// Output path [io.out] (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ground-truth GTE and difference-in-means limits of a DGP
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dgp: DgpArgs,
        /// Population draws [oracle.n]
        #[arg(long)]
        n: Option<usize>,
    },
    /// Estimate the GTE from a dataset CSV
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV [io.in]
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Comma list of db, ht-dim, ha-dim, ipw, aipw, pdl [estimate.estimators]
        #[arg(long)]
        estimator: Option<String>,
        /// Creator treatment probability [estimate.q]
        #[arg(long)]
        q: Option<f64>,
        /// Cross-fitting folds [estimate.folds]
        #[arg(long)]
        folds: Option<usize>,
        /// Seed of folds, network initialization and Hessian draws [estimate.seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Run IPW and AIPW even for sets of 15 or more slots [estimate.force]
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        nets: NetArgs,
        #[command(flatten)]
        hessian: HessianArgs,
        /// Output path [io.out]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo study: bias, spread, SE and coverage per estimator
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dgp: DgpArgs,
        /// Replications [study.replications]
        #[arg(long)]
        replications: Option<usize>,
        /// Cross-fitting folds [study.folds]
        #[arg(long)]
        folds: Option<usize>,
        /// Comma list of estimators [study.estimators]
        #[arg(long)]
        estimators: Option<String>,
        /// Oracle draws [study.oracle_n]
        #[arg(long)]
        oracle_n: Option<usize>,
        /// Root seed of all replications [study.base_seed]
        #[arg(long)]
        base_seed: Option<u64>,
        /// Worker threads [study.threads] (all cores when absent)
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        nets: NetArgs,
        #[command(flatten)]
        hessian: HessianArgs,
        /// JSON report path [io.out] (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary table CSV path [io.csv]
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the invariant suite
    Check {
        #[command(flatten)]
        common: Common,
        /// Suite seed [check.seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Draws of the orthogonality test [check.orthogonality_draws]
        #[arg(long)]
        orthogonality_draws: Option<usize>,
        /// Corrupt a component on purpose to exercise the suite
        #[arg(long, hide = true, value_parser = ["grad-mu"])]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DgpArgs {
    /// Consideration-set size [dgp.k]
    #[arg(long)]
    k: Option<usize>,
    /// Queries per dataset [dgp.n_queries]
    #[arg(long)]
    queries: Option<usize>,
    /// Catalog size [dgp.n_items]
    #[arg(long)]
    items: Option<usize>,
    /// Creator treatment probability [dgp.q]
    #[arg(long = "treat-prob")]
    treat_prob: Option<f64>,
    /// Outcome noise standard deviation [dgp.noise_sd]
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Score specification: table1, no-uplift, flat, sharp [dgp.spec]
    #[arg(long)]
    spec: Option<String>,
    /// Dataset seed [dgp.seed]
    #[arg(long = "dgp-seed")]
    dgp_seed: Option<u64>,
    /// random, all or none [dgp.treatment]
    #[arg(long)]
    treatment: Option<String>,
}

#[derive(Args)]
struct NetArgs {
    /// Hidden widths, e.g. 64,64 [net.hidden]
    #[arg(long)]
    hidden: Option<String>,
    /// [train.learning_rate]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [train.epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// [train.batch_size]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [train.validation_fraction]
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// [train.early_stop_patience]
    #[arg(long)]
    patience: Option<usize>,
    /// [train.output_clamp]
    #[arg(long)]
    output_clamp: Option<f64>,
}

#[derive(Args)]
struct HessianArgs {
    /// auto, exact or montecarlo [hessian.mode]
    #[arg(long)]
    hessian: Option<String>,
    /// [hessian.mc_draws]
    #[arg(long)]
    mc_draws: Option<usize>,
    /// [hessian.exact_max_k]
    #[arg(long)]
    exact_max_k: Option<usize>,
}

fn settings(common: &Common) -> Result<Settings, ConfigError> {
    match &common.config {
        Some(p) => Settings::load(p),
        None => Ok(Settings::default()),
    }
}

impl DgpArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        s.flag("dgp.k", self.k)?;
        s.flag("dgp.n_queries", self.queries)?;
        s.flag("dgp.n_items", self.items)?;
        s.flag("dgp.q", self.treat_prob)?;
        s.flag("dgp.noise_sd", self.noise_sd)?;
        s.flag("dgp.spec", self.spec.as_ref())?;
        s.flag("dgp.seed", self.dgp_seed)?;
        s.flag("dgp.treatment", self.treatment.as_ref())
    }
}

impl NetArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        s.flag("net.hidden", self.hidden.as_ref())?;
        s.flag("train.learning_rate", self.learning_rate)?;
        s.flag("train.epochs", self.epochs)?;
        s.flag("train.batch_size", self.batch_size)?;
        s.flag("train.validation_fraction", self.validation_fraction)?;
        s.flag("train.early_stop_patience", self.patience)?;
        s.flag("train.output_clamp", self.output_clamp)
    }
}

impl HessianArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        s.flag("hessian.mode", self.hessian.as_ref())?;
        s.flag("hessian.mc_draws", self.mc_draws)?;
        s.flag("hessian.exact_max_k", self.exact_max_k)
    }
}

fn sink(path: Option<&str>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {p}"))?)),
        None => Box::new(BufWriter::new(stdio::stdout().lock())),
    })
}

fn emit_json(value: &serde_json::Value, path: Option<&str>) -> Result<()> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn estimators(text: &str) -> Result<Vec<Estimator>, ConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(ConfigError::Invalid))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, dgp, out } => {
            let mut s = settings(&common)?;
            dgp.apply(&mut s)?;
            s.flag("io.out", out.map(|p| p.display().to_string()))?;
            let data = simulate(&s.dgp()?)?;
            let mut w = sink(s.raw("io.out"))?;
            io::write_dataset(&data, &mut w)?;
            w.flush()?;
        }
        Command::Oracle { common, dgp, n } => {
            let mut s = settings(&common)?;
            dgp.apply(&mut s)?;
            s.flag("oracle.n", n)?;
            let cfg = s.dgp()?;
            let n = s.get_or("oracle.n", 100_000usize)?;
            let gte = oracle_gte(&cfg, n)?;
            let lim = dim_limits(&cfg, n)?;
            let report = json!({
                "k": cfg.set_size,
                "spec": cfg.score_spec.name(),
                "n": n,
                "gte": gte.gte,
                "mc_se": gte.mc_se,
                "tau_ht": lim.tau_ht,
                "tau_ha": lim.tau_ha,
                "treated_share": lim.treated_share,
            });
            emit_json(&report, None)?;
        }
        Command::Estimate { common, input, estimator, q, folds, seed, force, nets, hessian, out } => {
            let mut s = settings(&common)?;
            s.flag("io.in", input.map(|p| p.display().to_string()))?;
            s.flag("estimate.estimators", estimator)?;
            s.flag("estimate.q", q)?;
            s.flag("estimate.folds", folds)?;
            s.flag("estimate.seed", seed)?;
            if force {
                s.set("estimate.force", "true")?;
            }
            nets.apply(&mut s)?;
            hessian.apply(&mut s)?;
            s.flag("io.out", out.map(|p| p.display().to_string()))?;
            let path = s.raw("io.in").ok_or_else(|| ConfigError::Invalid("estimate needs --in or io.in".into()))?;
            let list = estimators(s.raw("estimate.estimators").unwrap_or("db"))?;
            if list.is_empty() {
                return Err(ConfigError::Invalid("no estimator named".into()).into());
            }
            let q = s.get_or("estimate.q", 0.5)?;
            let force = s.get_or("estimate.force", false)?;
            let cfg = DebiasedConfig {
                folds: s.get_or("estimate.folds", 3)?,
                treat_prob: q,
                net: s.net()?,
                train: s.train()?,
                hessian: s.hessian()?,
                seed: s.get_or("estimate.seed", 0)?,
            };
            let file = File::open(path).with_context(|| format!("cannot open {path}"))?;
            let data = io::read_dataset(BufReader::new(file))?;
            let mut reports = Vec::new();
            let mut model = None;
            for est in list {
                if matches!(est, Estimator::Ipw | Estimator::Aipw) && data.set_size() >= 15 && !force {
                    eprintln!("skipping {est}: weights of order q^-{} (use --force)", data.set_size());
                    continue;
                }
                let pdl = |m: &mut Option<baselines::PdlModel>| -> Result<baselines::PdlModel> {
                    if m.is_none() {
                        *m = Some(baselines::fit_pdl(&data, &cfg.net, &cfg.train)?);
                    }
                    Ok(m.clone().expect("fitted above"))
                };
                let r = match est {
                    Estimator::Db => io::estimate_json(&estimate_gte(&data, &cfg)?),
                    Estimator::HtDim => io::baseline_json(&baselines::ht_dim(&data, q)?),
                    Estimator::HaDim => io::baseline_json(&baselines::ha_dim(&data)?),
                    Estimator::Ipw => io::baseline_json(&baselines::ipw(&data, q)?),
                    Estimator::Aipw => io::baseline_json(&baselines::aipw(&data, q, &pdl(&mut model)?)?),
                    Estimator::Pdl => io::baseline_json(&baselines::contrast_report(&data, &pdl(&mut model)?, "PDL")?),
                };
                reports.push(r);
            }
            let value = if reports.len() == 1 { reports.pop().expect("one report") } else { json!(reports) };
            emit_json(&value, s.raw("io.out"))?;
        }
        Command::Montecarlo {
            common,
            dgp,
            replications,
            folds,
            estimators: est,
            oracle_n,
            base_seed,
            threads,
            nets,
            hessian,
            out,
            csv,
        } => {
            let mut s = settings(&common)?;
            dgp.apply(&mut s)?;
            s.flag("study.replications", replications)?;
            s.flag("study.folds", folds)?;
            s.flag("study.estimators", est)?;
            s.flag("study.oracle_n", oracle_n)?;
            s.flag("study.base_seed", base_seed)?;
            s.flag("study.threads", threads)?;
            nets.apply(&mut s)?;
            hessian.apply(&mut s)?;
            s.flag("io.out", out.map(|p| p.display().to_string()))?;
            s.flag("io.csv", csv.map(|p| p.display().to_string()))?;
            let cfg = StudyConfig::from_settings(&s)?;
            let threads: Option<usize> = s.get("study.threads")?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(t) = threads {
                pool = pool.num_threads(t);
            }
            let started = std::time::Instant::now();
            let report = pool.build()?.install(|| run_study(&cfg))?;
            eprintln!("{} replications in {:.1?}", cfg.replications, started.elapsed());
            emit_json(&study_json(&report), s.raw("io.out"))?;
            if let Some(p) = s.raw("io.csv") {
                write_table(&[&report], File::create(p).with_context(|| format!("cannot create {p}"))?)?;
            }
        }
        Command::Check { common, seed, orthogonality_draws, inject_fault } => {
            let mut s = settings(&common)?;
            s.flag("check.seed", seed)?;
            s.flag("check.orthogonality_draws", orthogonality_draws)?;
            let opts = CheckOptions {
                seed: s.get_or("check.seed", 0)?,
                orthogonality_draws: s.get_or("check.orthogonality_draws", CheckOptions::default().orthogonality_draws)?,
                fault: inject_fault.map(|_| Fault::GradMu),
            };
            let results = run_checks(&opts);
            let mut out = stdio::stdout().lock();
            for r in &results {
                if r.passed {
                    writeln!(out, "ok    {}", r.name)?;
                } else {
                    writeln!(out, "FAIL  {} (seed {}): {}", r.name, r.seed, r.detail)?;
                }
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            writeln!(out, "{} of {} checks passed", results.len() - failed, results.len())?;
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<gte_core::Error>(), Some(gte_core::Error::Config(_)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
