//! Debiased (Neyman-orthogonal) estimation of the global treatment effect.
//!
//! For one query with score bundle `b` the plug-in value is
//! `mu(b) = sum_k Z_k [p_k(W = 1) - p_k(W = 0)]`. The influence value is
//!
//! ```text
//! psi = mu(b) - grad_mu(b)^T H(b)^{-1} grad_loss(b; W, k*, Y)
//! ```
//!
//! where the loss is `-log p_{k*}(W) + (Z_{k*} - Y)^2` and `H` is the Hessian
//! of that loss averaged over the randomized treatment vector `W` (and over
//! `k*` given `W` for the response block). At the true scores the expected
//! loss gradient vanishes, which makes the correction exactly mean-zero and
//! the estimator first-order insensitive to nuisance error.
//!
//! Bundle coordinates are ordered `(S0_2..S0_K, S1_1..S1_K, Z_1..Z_K)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::choice::{self, probs_into, probs_uniform, FitDiagnostics, NuisanceSet, ScoreBundle};
use crate::linalg::Matrix;
use crate::nnet::{NetConfig, TrainConfig};
use crate::rng::{self, Stream};
use crate::simulator::{for_each_pattern, Dataset, Observation};
use crate::stats;
use crate::{Error, Result};

/// Eigenvalue floor below which the expected Hessian is jittered.
pub const SINGULAR_EIG: f64 = 1e-10;
/// Ridge added to a near-singular Hessian, relative to `trace / dim`.
pub const JITTER_SCALE: f64 = 1e-8;

/// Plug-in GTE contribution of one query.
pub fn plugin_mu(bundle: &ScoreBundle) -> f64 {
    let p1 = probs_uniform(bundle, true);
    let p0 = probs_uniform(bundle, false);
    bundle.z.iter().zip(p1.iter().zip(&p0)).map(|(z, (a, b))| z * (a - b)).sum()
}

/// Gradient of [`plugin_mu`] in bundle coordinates.
pub fn grad_mu(bundle: &ScoreBundle) -> Vec<f64> {
    let k = bundle.k();
    let p1 = probs_uniform(bundle, true);
    let p0 = probs_uniform(bundle, false);
    let m1: f64 = p1.iter().zip(&bundle.z).map(|(p, z)| p * z).sum();
    let m0: f64 = p0.iter().zip(&bundle.z).map(|(p, z)| p * z).sum();
    let mut g = vec![0.0; 3 * k - 1];
    for s in 1..k {
        g[s - 1] = p1[s] * (bundle.z[s] - m1) - p0[s] * (bundle.z[s] - m0);
    }
    for s in 0..k {
        g[k - 1 + s] = p1[s] * (bundle.z[s] - m1);
        g[2 * k - 1 + s] = p1[s] - p0[s];
    }
    g
}

/// Slot and multiplier of each choice-block coordinate: the logit of slot
/// `s` is `S0_s + w_s S1_s`.
#[inline]
fn choice_coord(k: usize, j: usize, treated: impl Fn(usize) -> bool) -> (usize, f64) {
    if j < k - 1 {
        (j + 1, 1.0)
    } else {
        let s = j - (k - 1);
        (s, if treated(s) { 1.0 } else { 0.0 })
    }
}

fn check_obs(bundle: &ScoreBundle, w: &[bool], k_star: usize) -> Result<()> {
    if w.len() != bundle.k() {
        return Err(Error::Shape { expected: bundle.k(), got: w.len() });
    }
    if k_star >= bundle.k() {
        return Err(Error::Input(format!("exposed slot {k_star} out of range for K = {}", bundle.k())));
    }
    Ok(())
}

fn grad_loss_unchecked(bundle: &ScoreBundle, w: &[bool], k_star: usize, y: f64, p: &mut [f64], g: &mut [f64]) {
    let k = bundle.k();
    probs_into(bundle, |s| w[s], p);
    for j in 0..2 * k - 1 {
        let (s, c) = choice_coord(k, j, |s| w[s]);
        g[j] = c * (p[s] - if s == k_star { 1.0 } else { 0.0 });
    }
    for s in 0..k {
        g[2 * k - 1 + s] = if s == k_star { 2.0 * (bundle.z[s] - y) } else { 0.0 };
    }
}

/// Gradient of `choice_loss + response_loss` in bundle coordinates.
pub fn grad_loss(bundle: &ScoreBundle, w: &[bool], k_star: usize, y: f64) -> Result<Vec<f64>> {
    check_obs(bundle, w, k_star)?;
    let mut p = vec![0.0; bundle.k()];
    let mut g = vec![0.0; bundle.dim()];
    grad_loss_unchecked(bundle, w, k_star, y, &mut p, &mut g);
    Ok(g)
}

/// Adds `weight` times the loss Hessian under treatment pattern `w` to `h`.
/// The response block is the exposure-conditional expectation `2 p_k(w)`.
fn accumulate_hessian(h: &mut Matrix, bundle: &ScoreBundle, w: impl Fn(usize) -> bool + Copy, weight: f64, p: &mut [f64]) {
    let k = bundle.k();
    probs_into(bundle, w, p);
    let nc = 2 * k - 1;
    for a in 0..nc {
        let (sa, ca) = choice_coord(k, a, w);
        if ca == 0.0 {
            continue;
        }
        for b in 0..=a {
            let (sb, cb) = choice_coord(k, b, w);
            if cb == 0.0 {
                continue;
            }
            let v = if sa == sb { p[sa] * (1.0 - p[sa]) } else { -p[sa] * p[sb] };
            let add = weight * ca * cb * v;
            h[(a, b)] += add;
            if a != b {
                h[(b, a)] += add;
            }
        }
    }
    for s in 0..k {
        h[(nc + s, nc + s)] += weight * 2.0 * p[s];
    }
}

/// Loss Hessian for one treatment vector: the exact Hessian of the choice
/// loss plus the response block `2 diag(p(w))`, which is the expectation of
/// `2 diag(1[k* = k])` over the exposure lottery.
pub fn hessian_loss(bundle: &ScoreBundle, w: &[bool]) -> Result<Matrix> {
    if w.len() != bundle.k() {
        return Err(Error::Shape { expected: bundle.k(), got: w.len() });
    }
    let mut h = Matrix::zeros(bundle.dim());
    let mut p = vec![0.0; bundle.k()];
    accumulate_hessian(&mut h, bundle, |s| w[s], 1.0, &mut p);
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum HessianMode {
    /// Exact when `K <= exact_max_k`, Monte Carlo otherwise.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

impl HessianMode {
    pub fn name(self) -> &'static str {
        match self {
            HessianMode::Auto => "auto",
            HessianMode::Exact => "exact",
            HessianMode::MonteCarlo => "montecarlo",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(HessianMode::Auto),
            "exact" => Ok(HessianMode::Exact),
            "montecarlo" | "mc" => Ok(HessianMode::MonteCarlo),
            _ => Err(Error::Config(format!("unknown hessian mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HessianPolicy {
    pub mode: HessianMode,
    pub mc_draws: usize,
    pub exact_max_k: usize,
    /// Root seed of the Monte Carlo draws; each query uses its own stream.
    pub seed: u64,
}

impl Default for HessianPolicy {
    fn default() -> Self {
        Self { mode: HessianMode::Auto, mc_draws: 500, exact_max_k: 12, seed: 0 }
    }
}

impl HessianPolicy {
    pub fn exact() -> Self {
        Self { mode: HessianMode::Exact, ..Self::default() }
    }

    pub fn monte_carlo(draws: usize) -> Self {
        Self { mode: HessianMode::MonteCarlo, mc_draws: draws, ..Self::default() }
    }

    fn uses_exact(&self, k: usize) -> Result<bool> {
        match self.mode {
            HessianMode::Exact if k > self.exact_max_k => Err(Error::EnumerationLimit { k, max: self.exact_max_k }),
            HessianMode::Exact => Ok(true),
            HessianMode::MonteCarlo if self.mc_draws == 0 => {
                Err(Error::Config("Monte Carlo Hessian needs mc_draws >= 1".into()))
            }
            HessianMode::MonteCarlo => Ok(false),
            HessianMode::Auto => Ok(k <= self.exact_max_k.min(crate::simulator::MAX_ENUMERATION_K)),
        }
    }
}

/// Expected loss Hessian over `W ~ Bernoulli(q)^K`, exactly or by Monte
/// Carlo draws from `rng`.
pub fn expected_hessian<R: Rng + ?Sized>(
    bundle: &ScoreBundle,
    q: f64,
    policy: &HessianPolicy,
    rng: &mut R,
) -> Result<Matrix> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("treatment probability must be in (0, 1), got {q}")));
    }
    let k = bundle.k();
    let mut h = Matrix::zeros(bundle.dim());
    let mut p = vec![0.0; k];
    if policy.uses_exact(k)? {
        for_each_pattern(k, q, |mask, weight| {
            accumulate_hessian(&mut h, bundle, |s| mask & (1 << s) != 0, weight, &mut p);
        });
    } else {
        let mut w = vec![false; k];
        let weight = 1.0 / policy.mc_draws as f64;
        for _ in 0..policy.mc_draws {
            w.iter_mut().for_each(|v| *v = rng.random_bool(q));
            accumulate_hessian(&mut h, bundle, |s| w[s], weight, &mut p);
        }
    }
    Ok(h)
}

/// Per-query pieces of the debiased estimator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InfluenceRecord {
    pub query_id: u64,
    pub mu: f64,
    pub correction: f64,
    pub psi: f64,
    /// Smallest eigenvalue of the Hessian actually solved against.
    pub h_min_eig: f64,
    pub jittered: bool,
}

/// Solves `H u = grad_mu`, jittering a near-singular `H` once.
fn solve_hessian(mut h: Matrix, rhs: &[f64], query_id: u64) -> Result<(Vec<f64>, f64, bool)> {
    let mut min_eig = h.min_eigenvalue();
    let mut jittered = false;
    if !(min_eig >= SINGULAR_EIG) {
        let lambda = JITTER_SCALE * h.trace() / h.dim() as f64;
        h.add_diagonal(lambda);
        min_eig = h.min_eigenvalue();
        jittered = true;
        if !(min_eig > 0.0) {
            return Err(Error::SingularHessian { query_id });
        }
    }
    let chol = h.cholesky().ok_or(Error::SingularHessian { query_id })?;
    Ok((chol.solve(rhs), min_eig, jittered))
}

/// Influence value of one observation given its (fold-external) bundle.
pub fn psi_value(obs: &Observation, bundle: &ScoreBundle, q: f64, policy: &HessianPolicy) -> Result<InfluenceRecord> {
    check_obs(bundle, &obs.treatment, obs.exposed_slot)?;
    if !bundle.is_finite() {
        return Err(Error::Input(format!("query {}: non-finite score bundle", obs.query_id)));
    }
    let mu = plugin_mu(bundle);
    let gmu = grad_mu(bundle);
    let gl = grad_loss(bundle, &obs.treatment, obs.exposed_slot, obs.outcome)?;
    let mut mc = rng::indexed_stream(policy.seed, obs.query_id, Stream::Hessian);
    let h = expected_hessian(bundle, q, policy, &mut mc)?;
    let (u, h_min_eig, jittered) = solve_hessian(h, &gmu, obs.query_id)?;
    let correction: f64 = u.iter().zip(&gl).map(|(a, b)| a * b).sum();
    Ok(InfluenceRecord { query_id: obs.query_id, mu, correction, psi: mu - correction, h_min_eig, jittered })
}

/// `psi` with an exact Hessian and no eigen-analysis, for derivative probes.
fn psi_fast(bundle: &ScoreBundle, w: &[bool], k_star: usize, y: f64, q: f64) -> f64 {
    let k = bundle.k();
    let mut h = Matrix::zeros(bundle.dim());
    let mut p = vec![0.0; k];
    for_each_pattern(k, q, |mask, weight| {
        accumulate_hessian(&mut h, bundle, |s| mask & (1 << s) != 0, weight, &mut p);
    });
    let u = h.cholesky().map(|c| c.solve(&grad_mu(bundle))).unwrap_or_else(|| vec![f64::NAN; bundle.dim()]);
    let mut g = vec![0.0; bundle.dim()];
    grad_loss_unchecked(bundle, w, k_star, y, &mut p, &mut g);
    plugin_mu(bundle) - u.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
}

/// Expectation of `psi(hat)` over `(W, k*, Y)` drawn from the model `truth`
/// with `E[Y | k*] = Z_true,k*`, by exact enumeration and an exact Hessian.
pub fn expected_psi(hat: &ScoreBundle, truth: &ScoreBundle, q: f64) -> Result<f64> {
    let k = hat.k();
    if truth.k() != k {
        return Err(Error::Shape { expected: k, got: truth.k() });
    }
    let h = expected_hessian(hat, q, &HessianPolicy::exact(), &mut rng::stream(0, Stream::Hessian))?;
    let (u, _, _) = solve_hessian(h, &grad_mu(hat), 0)?;
    let mut mean_grad = vec![0.0; hat.dim()];
    let mut g = vec![0.0; hat.dim()];
    let mut p_true = vec![0.0; k];
    let mut p_hat = vec![0.0; k];
    let mut w = vec![false; k];
    for_each_pattern(k, q, |mask, weight| {
        for (s, v) in w.iter_mut().enumerate() {
            *v = mask & (1 << s) != 0;
        }
        probs_into(truth, |s| w[s], &mut p_true);
        for ks in 0..k {
            grad_loss_unchecked(hat, &w, ks, truth.z[ks], &mut p_hat, &mut g);
            for (m, gi) in mean_grad.iter_mut().zip(&g) {
                *m += weight * p_true[ks] * gi;
            }
        }
    });
    Ok(plugin_mu(hat) - u.iter().zip(&mean_grad).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrthogonalityReport {
    /// Monte Carlo mean of each component of the gradient of psi.
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Component with the largest |mean| / se.
    pub worst: usize,
    pub max_z: f64,
}

/// Monte Carlo estimate of `E[grad psi]` at the true scores.
///
/// `truth` draws a query's true bundle; `(W, k*, Y)` are then drawn from
/// the model with Gaussian response noise of s.d. `noise_sd`, and the
/// gradient of `psi` with respect to the bundle is taken by central
/// differences (the Hessian moves with the bundle).
pub fn orthogonality_check<R, F>(mut truth: F, q: f64, n_mc: usize, noise_sd: f64, rng: &mut R) -> Result<OrthogonalityReport>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> ScoreBundle,
{
    if n_mc < 2 {
        return Err(Error::Config("orthogonality check needs n_mc >= 2".into()));
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    for _ in 0..n_mc {
        let b = truth(rng);
        let k = b.k();
        if k > crate::simulator::MAX_ENUMERATION_K {
            return Err(Error::EnumerationLimit { k, max: crate::simulator::MAX_ENUMERATION_K });
        }
        if sum.is_empty() {
            sum = vec![0.0; b.dim()];
            sq = vec![0.0; b.dim()];
        }
        let w: Vec<bool> = (0..k).map(|_| rng.random_bool(q)).collect();
        let mut p = vec![0.0; k];
        probs_into(&b, |s| w[s], &mut p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut ks = k - 1;
        for (s, ps) in p.iter().enumerate() {
            acc += ps;
            if u < acc {
                ks = s;
                break;
            }
        }
        let eps: f64 = StandardNormal.sample(rng);
        let y = b.z[ks] + noise_sd * eps;
        let coords = b.to_vec();
        for j in 0..coords.len() {
            let step = 1e-5 * coords[j].abs().max(1.0);
            let mut plus = coords.clone();
            plus[j] += step;
            let mut minus = coords.clone();
            minus[j] -= step;
            let fp = psi_fast(&ScoreBundle::from_vec(k, &plus)?, &w, ks, y, q);
            let fm = psi_fast(&ScoreBundle::from_vec(k, &minus)?, &w, ks, y, q);
            let d = (fp - fm) / (2.0 * step);
            sum[j] += d;
            sq[j] += d * d;
        }
    }
    let n = n_mc as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| libm::sqrt(((s / n - m * m) * n / (n - 1.0)).max(0.0) / n))
        .collect();
    let (worst, max_z) = mean
        .iter()
        .zip(&se)
        .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
        .enumerate()
        .fold((0, 0.0), |best, (i, z)| if z > best.1 { (i, z) } else { best });
    Ok(OrthogonalityReport { mean, se, worst, max_z })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SensitivityProbe {
    pub deltas: Vec<f64>,
    /// Change of the population debiased value at each delta.
    pub debiased_shift: Vec<f64>,
    /// Change of the population plug-in value at each delta.
    pub plugin_shift: Vec<f64>,
}

/// Moves every nuisance by `delta * direction` (in bundle coordinates) and
/// reports how the population-level debiased and plug-in values respond.
pub fn sensitivity_probe(truth: &[ScoreBundle], direction: &[ScoreBundle], q: f64, deltas: &[f64]) -> Result<SensitivityProbe> {
    if truth.len() != direction.len() || truth.is_empty() {
        return Err(Error::Input("truth and direction must be aligned and non-empty".into()));
    }
    let base_db: f64 = stats::mean(&truth.iter().map(plugin_mu).collect::<Vec<_>>());
    let base_plugin = base_db;
    let mut out = SensitivityProbe { deltas: deltas.to_vec(), debiased_shift: Vec::new(), plugin_shift: Vec::new() };
    for &delta in deltas {
        let mut db = 0.0;
        let mut pl = 0.0;
        for (t, d) in truth.iter().zip(direction) {
            let coords: Vec<f64> = t.to_vec().iter().zip(d.to_vec()).map(|(a, b)| a + delta * b).collect();
            let hat = ScoreBundle::from_vec(t.k(), &coords)?;
            db += expected_psi(&hat, t, q)?;
            pl += plugin_mu(&hat);
        }
        let n = truth.len() as f64;
        out.debiased_shift.push(db / n - base_db);
        out.plugin_shift.push(pl / n - base_plugin);
    }
    Ok(out)
}

/// Settings of the cross-fitted estimator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DebiasedConfig {
    pub folds: usize,
    pub treat_prob: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub hessian: HessianPolicy,
    /// Seeds the fold split, the network initializations and the Monte
    /// Carlo Hessian draws.
    pub seed: u64,
}

impl Default for DebiasedConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            treat_prob: 0.5,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            hessian: HessianPolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldEstimate {
    pub id: u32,
    pub n: usize,
    pub tau: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimateDiagnostics {
    pub min_eig: f64,
    pub jittered: usize,
    /// Held-out nuisance fit, averaged over folds.
    pub fit: FitDiagnostics,
    /// Mean plug-in value over all queries.
    pub plugin: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n: usize,
    pub per_fold: Vec<FoldEstimate>,
    pub diagnostics: EstimateDiagnostics,
    pub records: Vec<InfluenceRecord>,
}

/// Random partition of `0..n` into `folds` near-equal sorted index sets.
pub fn fold_split(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Folds));
    let mut out = Vec::with_capacity(folds);
    let base = n / folds;
    let extra = n % folds;
    let mut at = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut part = order[at..at + len].to_vec();
        part.sort_unstable();
        out.push(part);
        at += len;
    }
    out
}

/// Influence records of the queries `idx` given their bundles.
pub fn psi_records(
    dataset: &Dataset,
    idx: &[usize],
    bundles: &[ScoreBundle],
    q: f64,
    policy: &HessianPolicy,
) -> Result<Vec<InfluenceRecord>> {
    idx.iter()
        .zip(bundles)
        .map(|(&i, b)| psi_value(&dataset.observations()[i], b, q, policy))
        .collect()
}

/// Assembles the report from per-fold influence records (`folds[f]` holds
/// the records of fold `f`).
pub fn assemble_report(folds: Vec<Vec<InfluenceRecord>>, fits: &[FitDiagnostics], warnings: Vec<String>) -> Result<EstimateReport> {
    let n: usize = folds.iter().map(Vec::len).sum();
    if n == 0 || folds.iter().any(Vec::is_empty) {
        return Err(Error::Input("every fold needs at least one query".into()));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    for (f, recs) in folds.iter().enumerate() {
        let psi: Vec<f64> = recs.iter().map(|r| r.psi).collect();
        per_fold.push(FoldEstimate { id: f as u32, n: psi.len(), tau: stats::mean(&psi), var: stats::variance(&psi, 0) });
    }
    let tau_hat = stats::mean(&per_fold.iter().map(|f| f.tau).collect::<Vec<_>>());
    let var = stats::mean(&per_fold.iter().map(|f| f.var).collect::<Vec<_>>());
    let se = libm::sqrt(var / n as f64);
    let records: Vec<InfluenceRecord> = folds.into_iter().flatten().collect();
    let fit = if fits.is_empty() {
        FitDiagnostics { logloss: f64::NAN, accuracy: f64::NAN, auc: f64::NAN, mse: f64::NAN }
    } else {
        let m = |g: fn(&FitDiagnostics) -> f64| stats::mean(&fits.iter().map(g).collect::<Vec<_>>());
        FitDiagnostics { logloss: m(|d| d.logloss), accuracy: m(|d| d.accuracy), auc: m(|d| d.auc), mse: m(|d| d.mse) }
    };
    let diagnostics = EstimateDiagnostics {
        min_eig: records.iter().map(|r| r.h_min_eig).fold(f64::INFINITY, f64::min),
        jittered: records.iter().filter(|r| r.jittered).count(),
        fit,
        plugin: stats::mean(&records.iter().map(|r| r.mu).collect::<Vec<_>>()),
        warnings,
    };
    Ok(EstimateReport {
        tau_hat,
        se,
        ci95: (tau_hat - stats::Z95 * se, tau_hat + stats::Z95 * se),
        n,
        per_fold,
        diagnostics,
        records,
    })
}

/// Cross-fitted debiased GTE estimate.
///
/// Queries are split at random into `folds` parts; for each part the
/// nuisances are trained on the remaining queries and the influence values
/// are evaluated on the part itself.
pub fn estimate_gte(dataset: &Dataset, config: &DebiasedConfig) -> Result<EstimateReport> {
    if config.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", config.folds)));
    }
    if dataset.len() < config.folds {
        return Err(Error::Input(format!("{} queries cannot fill {} folds", dataset.len(), config.folds)));
    }
    let q = config.treat_prob;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("treat_prob must be in (0, 1), got {q}")));
    }
    let parts = fold_split(dataset.len(), config.folds, config.seed);
    let mut records = Vec::with_capacity(config.folds);
    let mut fits = Vec::with_capacity(config.folds);
    let mut warnings = Vec::new();
    for (f, test) in parts.iter().enumerate() {
        let train: Vec<usize> = parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, p)| p.iter().copied()).collect();
        let mut train = train;
        train.sort_unstable();
        let obs = dataset.observations();
        let treated = test.iter().filter(|&&i| obs[i].exposed_treated()).count();
        if treated == 0 || treated == test.len() {
            warnings.push(format!("fold {f}: no exposed {} queries", if treated == 0 { "treated" } else { "control" }));
        }
        let train_cfg = TrainConfig { seed: rng::mix(config.seed, f as u64, Stream::Init as u64), ..config.train.clone() };
        let nuisances: NuisanceSet = choice::fit_nuisances(dataset, &train, &config.net, &train_cfg, f as u32)?;
        let bundles = choice::bundles_from_nuisances(&nuisances, dataset, test)?;
        let held_out: Vec<&Observation> = test.iter().map(|&i| &obs[i]).collect();
        fits.push(choice::diagnostics_from_bundles(&bundles, &held_out)?);
        let policy = HessianPolicy { seed: rng::mix(config.seed, f as u64, Stream::Hessian as u64), ..config.hessian.clone() };
        records.push(psi_records(dataset, test, &bundles, q, &policy)?);
    }
    assemble_report(records, &fits, warnings)
}
