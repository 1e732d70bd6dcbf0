//! Synthetic creator-side marketplace.
//!
//! Items carry two attributes and a treatment flag that is drawn once when
//! the catalog is created and persists for every query that includes the
//! item. Each query draws a viewer, a consideration set sampled without
//! replacement from the catalog, one exposed slot from the multinomial logit
//! over `s0 + w * s1`, and an outcome `z + noise` for the exposed item.
//!
//! [`oracle_gte`] and [`dim_limits`] are the brute-force references: both
//! integrate the inner exposure lottery analytically and use noiseless
//! responses, and [`dim_limits`] additionally enumerates all `2^K`
//! treatment vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Largest set size accepted by the `2^K` enumeration oracles.
pub const MAX_ENUMERATION_K: usize = 20;

/// Viewer covariates are drawn from `Unif(0, VIEWER_MAX)`.
pub const VIEWER_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Item {
    pub id: u64,
    /// Synthetic items carry `[c1, c2]`; external data may carry any width.
    pub features: Vec<f64>,
    pub treated: bool,
}

/// One viewer query with its consideration set and realized exposure.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Observation {
    pub query_id: u64,
    pub viewer: Vec<f64>,
    pub item_ids: Vec<u64>,
    pub treatment: Vec<bool>,
    pub exposed_slot: usize,
    pub outcome: f64,
}

impl Observation {
    pub fn set_size(&self) -> usize {
        self.item_ids.len()
    }

    pub fn exposed_treated(&self) -> bool {
        self.treatment[self.exposed_slot]
    }
}

/// Built-in `(s0, s1, z)` triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScoreSpec {
    /// `s0 = u + 0.1 u^2`, `s1 = c1 * u`, `z = u` with `u = v + c2`.
    #[default]
    Table1,
    /// Table1 baseline and response, no treatment uplift.
    NoUplift,
    /// Table1 baseline, no uplift, constant response `z = 1`.
    Flat,
    /// Near-deterministic choice: `s0 = 100 c2`, no uplift, `z = u`.
    Sharp,
}

impl ScoreSpec {
    pub const ALL: [ScoreSpec; 4] = [ScoreSpec::Table1, ScoreSpec::NoUplift, ScoreSpec::Flat, ScoreSpec::Sharp];

    pub fn name(self) -> &'static str {
        match self {
            ScoreSpec::Table1 => "table1",
            ScoreSpec::NoUplift => "no-uplift",
            ScoreSpec::Flat => "flat",
            ScoreSpec::Sharp => "sharp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown score spec `{name}`")))
    }

    /// Closed-form `(s0, s1, z)` for viewer covariate `v` and item `(c1, c2)`.
    #[inline]
    pub fn eval(self, v: f64, c1: f64, c2: f64) -> (f64, f64, f64) {
        let u = v + c2;
        let base = u + 0.1 * u * u;
        match self {
            ScoreSpec::Table1 => (base, c1 * u, u),
            ScoreSpec::NoUplift => (base, 0.0, u),
            ScoreSpec::Flat => (base, 0.0, 1.0),
            ScoreSpec::Sharp => (100.0 * c2, 0.0, u),
        }
    }
}

impl core::str::FromStr for ScoreSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

/// True scores of `item` for a viewer.
pub fn true_scores(spec: ScoreSpec, viewer: &[f64], item: &Item) -> Result<(f64, f64, f64)> {
    let v = *viewer.first().ok_or_else(|| Error::Input("viewer has no covariates".into()))?;
    if item.features.len() < 2 {
        return Err(Error::Shape { expected: 2, got: item.features.len() });
    }
    Ok(spec.eval(v, item.features[0], item.features[1]))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DgpConfig {
    pub n_items: usize,
    pub n_queries: usize,
    pub set_size: usize,
    pub treat_prob: f64,
    pub noise_sd: f64,
    pub score_spec: ScoreSpec,
    pub seed: u64,
    /// Forces every item into treatment (`Some(true)`) or control.
    pub treatment_override: Option<bool>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_queries: 3000,
            set_size: 3,
            treat_prob: 0.5,
            // outcome noise has variance 0.1
            noise_sd: libm::sqrt(0.1),
            score_spec: ScoreSpec::Table1,
            seed: 0,
            treatment_override: None,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_queries == 0 || self.set_size == 0 {
            return Err(Error::Config("n_items, n_queries and set_size must be positive".into()));
        }
        if self.set_size > self.n_items {
            return Err(Error::Config(format!(
                "set_size {} exceeds catalog size {}",
                self.set_size, self.n_items
            )));
        }
        if !(self.treat_prob > 0.0 && self.treat_prob < 1.0) {
            return Err(Error::Config(format!("treat_prob must be in (0, 1), got {}", self.treat_prob)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }
}

/// Catalog plus the logged queries of one experiment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    /// Sorted by id.
    catalog: Vec<Item>,
    observations: Vec<Observation>,
    /// Query counts aligned with `catalog`.
    appearance_counts: Vec<usize>,
}

impl Dataset {
    /// Validates and indexes a catalog and its observations.
    ///
    /// Every observation must reference existing, distinct items, carry the
    /// catalog treatment status of each item, have an in-range exposed slot
    /// and share one set size.
    pub fn new(mut catalog: Vec<Item>, observations: Vec<Observation>) -> Result<Self> {
        catalog.sort_by_key(|i| i.id);
        if let Some(w) = catalog.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Input(format!("duplicate item id {}", w[0].id)));
        }
        let mut counts = vec![0usize; catalog.len()];
        let k = observations.first().map(Observation::set_size).unwrap_or(0);
        let viewer_dim = observations.first().map(|o| o.viewer.len()).unwrap_or(0);
        for obs in &observations {
            let qid = obs.query_id;
            if obs.set_size() != k || obs.set_size() == 0 {
                return Err(Error::Input(format!("query {qid}: set size {} differs from {k}", obs.set_size())));
            }
            if obs.viewer.len() != viewer_dim {
                return Err(Error::Input(format!("query {qid}: viewer covariate width differs")));
            }
            if obs.treatment.len() != k {
                return Err(Error::Input(format!("query {qid}: treatment vector length mismatch")));
            }
            if obs.exposed_slot >= k {
                return Err(Error::Input(format!("query {qid}: exposed slot {} out of range", obs.exposed_slot)));
            }
            for (slot, id) in obs.item_ids.iter().enumerate() {
                if obs.item_ids[..slot].contains(id) {
                    return Err(Error::Input(format!("query {qid}: item {id} appears twice")));
                }
                let at = catalog
                    .binary_search_by_key(id, |i| i.id)
                    .map_err(|_| Error::Input(format!("query {qid}: unknown item {id}")))?;
                if catalog[at].treated != obs.treatment[slot] {
                    return Err(Error::Input(format!("query {qid}: treatment of item {id} differs from catalog")));
                }
                counts[at] += 1;
            }
        }
        Ok(Self { catalog, observations, appearance_counts: counts })
    }

    pub fn catalog(&self) -> &[Item] {
        &self.catalog
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn appearance_counts(&self) -> &[usize] {
        &self.appearance_counts
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn set_size(&self) -> usize {
        self.observations.first().map(Observation::set_size).unwrap_or(0)
    }

    pub fn viewer_dim(&self) -> usize {
        self.observations.first().map(|o| o.viewer.len()).unwrap_or(0)
    }

    pub fn item_dim(&self) -> usize {
        self.catalog.first().map(|i| i.features.len()).unwrap_or(0)
    }

    pub fn item(&self, id: u64) -> Option<&Item> {
        self.catalog.binary_search_by_key(&id, |i| i.id).ok().map(|at| &self.catalog[at])
    }

    /// Item of `obs` in slot `slot`; panics if the dataset invariant is broken.
    pub fn slot_item(&self, obs: &Observation, slot: usize) -> &Item {
        self.item(obs.item_ids[slot]).expect("observation references a catalog item")
    }

    pub fn max_appearance(&self) -> usize {
        self.appearance_counts.iter().copied().max().unwrap_or(0)
    }

    /// Share of queries whose exposed item is treated.
    pub fn treated_exposure_share(&self) -> f64 {
        let n = self.observations.iter().filter(|o| o.exposed_treated()).count();
        n as f64 / self.observations.len() as f64
    }
}

/// Draws the catalog: `c1 ~ Bernoulli(0.5)`, `c2 ~ Unif(0, 1)`,
/// `w ~ Bernoulli(treat_prob)`, all independent.
pub fn gen_catalog<R: Rng + ?Sized>(config: &DgpConfig, rng: &mut R) -> Vec<Item> {
    let q = config.treat_prob.clamp(0.0, 1.0);
    (0..config.n_items as u64)
        .map(|id| {
            let c1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let c2: f64 = rng.random();
            let treated = match config.treatment_override {
                Some(w) => w,
                None => rng.random_bool(q),
            };
            Item { id, features: vec![c1, c2], treated }
        })
        .collect()
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Simulates one experiment.
pub fn simulate(config: &DgpConfig) -> Result<Dataset> {
    config.validate()?;
    let k = config.set_size;
    let catalog = gen_catalog(config, &mut rng::stream(config.seed, Stream::Catalog));
    let mut viewers = rng::stream(config.seed, Stream::Viewers);
    let mut sets = rng::stream(config.seed, Stream::Sets);
    let mut exposure = rng::stream(config.seed, Stream::Exposure);
    let mut noise = rng::stream(config.seed, Stream::Noise);

    let mut observations = Vec::with_capacity(config.n_queries);
    let mut logits = vec![0.0; k];
    let mut zs = vec![0.0; k];
    for qid in 0..config.n_queries as u64 {
        let v = viewers.random_range(0.0..VIEWER_MAX);
        let picked = rand::seq::index::sample(&mut sets, config.n_items, k);
        let mut item_ids = Vec::with_capacity(k);
        let mut treatment = Vec::with_capacity(k);
        for (slot, idx) in picked.iter().enumerate() {
            let item = &catalog[idx];
            let (s0, s1, z) = config.score_spec.eval(v, item.features[0], item.features[1]);
            logits[slot] = s0 + if item.treated { s1 } else { 0.0 };
            zs[slot] = z;
            item_ids.push(item.id);
            treatment.push(item.treated);
        }
        softmax_in_place(&mut logits);
        let slot = sample_index(&logits, &mut exposure);
        let eps: f64 = StandardNormal.sample(&mut noise);
        observations.push(Observation {
            query_id: qid,
            viewer: vec![v],
            item_ids,
            treatment,
            exposed_slot: slot,
            outcome: zs[slot] + config.noise_sd * eps,
        });
    }
    Dataset::new(catalog, observations)
}

/// Scores of one population query: viewer and i.i.d. item attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueQuery {
    pub v: f64,
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
    pub z: Vec<f64>,
}

/// Draws a population query (viewer plus `k` fresh items) and its true
/// scores. This is the infinite-catalog limit of [`simulate`].
pub fn draw_true_query<R: Rng + ?Sized>(spec: ScoreSpec, k: usize, rng: &mut R) -> TrueQuery {
    let v = rng.random_range(0.0..VIEWER_MAX);
    let mut q = TrueQuery { v, s0: vec![0.0; k], s1: vec![0.0; k], z: vec![0.0; k] };
    for slot in 0..k {
        let c1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let c2: f64 = rng.random();
        let (s0, s1, z) = spec.eval(v, c1, c2);
        q.s0[slot] = s0;
        q.s1[slot] = s1;
        q.z[slot] = z;
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleGte {
    pub gte: f64,
    pub mc_se: f64,
}

/// Ground-truth GTE: global treatment versus global control on common
/// viewer and set draws, with the exposure lottery integrated exactly.
pub fn oracle_gte(config: &DgpConfig, n_oracle: usize) -> Result<OracleGte> {
    if n_oracle == 0 {
        return Err(Error::Config("n_oracle must be positive".into()));
    }
    if config.set_size == 0 {
        return Err(Error::Config("set_size must be positive".into()));
    }
    let k = config.set_size;
    let mut rng = rng::stream(config.seed, Stream::Oracle);
    let mut diffs = Vec::with_capacity(n_oracle);
    let mut p1 = vec![0.0; k];
    let mut p0 = vec![0.0; k];
    for _ in 0..n_oracle {
        let q = draw_true_query(config.score_spec, k, &mut rng);
        for slot in 0..k {
            p1[slot] = q.s0[slot] + q.s1[slot];
            p0[slot] = q.s0[slot];
        }
        softmax_in_place(&mut p1);
        softmax_in_place(&mut p0);
        let d: f64 = (0..k).map(|s| q.z[s] * (p1[s] - p0[s])).sum();
        diffs.push(d);
    }
    Ok(OracleGte { gte: crate::stats::mean(&diffs), mc_se: crate::stats::sem(&diffs) })
}

/// GTE of one finished marketplace: like [`oracle_gte`], but consideration
/// sets are drawn without replacement from `catalog` instead of from the
/// item population. Treatment flags in the catalog are ignored.
pub fn catalog_gte(catalog: &[Item], config: &DgpConfig, n_oracle: usize) -> Result<OracleGte> {
    let k = config.set_size;
    if n_oracle == 0 {
        return Err(Error::Config("n_oracle must be positive".into()));
    }
    if k == 0 || k > catalog.len() {
        return Err(Error::Config(format!("set_size {k} does not fit a catalog of {}", catalog.len())));
    }
    if catalog.iter().any(|it| it.features.len() != 2) {
        return Err(Error::Config("catalog items need two features".into()));
    }
    let mut rng = rng::stream(config.seed, Stream::Oracle);
    let mut diffs = Vec::with_capacity(n_oracle);
    let (mut p1, mut p0, mut zs) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for _ in 0..n_oracle {
        let v = rng.random_range(0.0..VIEWER_MAX);
        let picked = rand::seq::index::sample(&mut rng, catalog.len(), k);
        for (slot, idx) in picked.iter().enumerate() {
            let f = &catalog[idx].features;
            let (s0, s1, z) = config.score_spec.eval(v, f[0], f[1]);
            p1[slot] = s0 + s1;
            p0[slot] = s0;
            zs[slot] = z;
        }
        softmax_in_place(&mut p1);
        softmax_in_place(&mut p0);
        diffs.push((0..k).map(|s| zs[s] * (p1[s] - p0[s])).sum());
    }
    Ok(OracleGte { gte: crate::stats::mean(&diffs), mc_se: crate::stats::sem(&diffs) })
}

/// Calls `f(mask, weight)` for every treatment pattern of a `k`-set, where
/// bit `s` of `mask` is slot `s`'s treatment and `weight` its probability
/// under independent `Bernoulli(q)` assignment.
pub fn for_each_pattern(k: usize, q: f64, mut f: impl FnMut(u32, f64)) {
    debug_assert!(k <= 31);
    for mask in 0u32..(1u32 << k) {
        let ones = mask.count_ones() as i32;
        let weight = libm::pow(q, ones as f64) * libm::pow(1.0 - q, (k as i32 - ones) as f64);
        f(mask, weight);
    }
}

/// Exact per-query moments of the exposed treatment flag, averaged over
/// the `2^K` assignment patterns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExposureMoments {
    /// E[w_{k*} z_{k*}]
    pub treated_y: f64,
    /// E[w_{k*}]
    pub treated: f64,
    /// E[(1 - w_{k*}) z_{k*}]
    pub control_y: f64,
    /// E[1 - w_{k*}]
    pub control: f64,
}

/// Enumerates all treatment patterns of one query.
pub fn exposure_moments(s0: &[f64], s1: &[f64], z: &[f64], q: f64) -> ExposureMoments {
    let k = s0.len();
    // exponentials are shared across patterns
    let m = s0.iter().zip(s1).map(|(a, b)| a.max(a + b)).fold(f64::NEG_INFINITY, f64::max);
    let e0: Vec<f64> = s0.iter().map(|a| libm::exp(a - m)).collect();
    let e1: Vec<f64> = s0.iter().zip(s1).map(|(a, b)| libm::exp(a + b - m)).collect();
    let mut out = ExposureMoments::default();
    for_each_pattern(k, q, |mask, weight| {
        let mut total = 0.0;
        let mut ty = 0.0;
        let mut t = 0.0;
        let mut cy = 0.0;
        for s in 0..k {
            if mask & (1 << s) != 0 {
                total += e1[s];
                t += e1[s];
                ty += e1[s] * z[s];
            } else {
                total += e0[s];
                cy += e0[s] * z[s];
            }
        }
        out.treated_y += weight * ty / total;
        out.treated += weight * t / total;
        out.control_y += weight * cy / total;
        out.control += weight * (total - t) / total;
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DimLimits {
    /// Probability limit of the Horvitz-Thompson DIM estimator.
    pub tau_ht: f64,
    /// Probability limit of the Hajek DIM estimator.
    pub tau_ha: f64,
    /// Limit of the treated exposure share, E[w_{k*}].
    pub treated_share: f64,
}

/// Large-sample limits of both difference-in-means estimators by exact
/// enumeration of treatment vectors on `n_oracle` population queries.
pub fn dim_limits(config: &DgpConfig, n_oracle: usize) -> Result<DimLimits> {
    let k = config.set_size;
    if k > MAX_ENUMERATION_K {
        return Err(Error::EnumerationLimit { k, max: MAX_ENUMERATION_K });
    }
    if k == 0 || n_oracle == 0 {
        return Err(Error::Config("set_size and n_oracle must be positive".into()));
    }
    let q = config.treat_prob;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("treat_prob must be in (0, 1), got {q}")));
    }
    let mut rng = rng::stream(config.seed, Stream::Oracle);
    let mut acc = ExposureMoments::default();
    for _ in 0..n_oracle {
        let tq = draw_true_query(config.score_spec, k, &mut rng);
        let m = exposure_moments(&tq.s0, &tq.s1, &tq.z, q);
        acc.treated_y += m.treated_y;
        acc.treated += m.treated;
        acc.control_y += m.control_y;
        acc.control += m.control;
    }
    let n = n_oracle as f64;
    let (ty, t, cy, c) = (acc.treated_y / n, acc.treated / n, acc.control_y / n, acc.control / n);
    Ok(DimLimits { tau_ht: ty / q - cy / (1.0 - q), tau_ha: ty / t - cy / c, treated_share: t })
}
