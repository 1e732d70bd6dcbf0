//! Multinomial-logit exposure model and viewer response model.
//!
//! Everything downstream works in *score-bundle* coordinates: for one query
//! with `K` slots, the baseline scores relative to slot 1 (`K - 1` values),
//! the treatment uplifts (`K`) and the expected responses (`K`). The
//! exposure probability of slot `k` under treatment vector `w` is
//! `softmax(S0 + w * S1)_k` with `S0_1 = 0`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::nnet::{self, DenseNet, Gradient, NetConfig, Objective, RegressionSet, Tape, TrainConfig};
use crate::rng;
use crate::simulator::{softmax_in_place, Dataset, Observation, ScoreSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreBundle {
    /// `S0_k - S0_1` for slots `2..=K`.
    pub s0_diff: Vec<f64>,
    pub s1: Vec<f64>,
    pub z: Vec<f64>,
}

impl ScoreBundle {
    pub fn new(s0_diff: Vec<f64>, s1: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let k = s1.len();
        if k == 0 {
            return Err(Error::Input("empty score bundle".into()));
        }
        if s0_diff.len() + 1 != k {
            return Err(Error::Shape { expected: k - 1, got: s0_diff.len() });
        }
        if z.len() != k {
            return Err(Error::Shape { expected: k, got: z.len() });
        }
        Ok(Self { s0_diff, s1, z })
    }

    /// Builds a bundle from un-normalized baseline scores.
    pub fn from_raw(s0: &[f64], s1: &[f64], z: &[f64]) -> Self {
        let s0_diff = s0[1..].iter().map(|v| v - s0[0]).collect();
        Self { s0_diff, s1: s1.to_vec(), z: z.to_vec() }
    }

    pub fn k(&self) -> usize {
        self.s1.len()
    }

    /// Number of bundle coordinates, `3K - 1`.
    pub fn dim(&self) -> usize {
        3 * self.k() - 1
    }

    /// Coordinates in the order `(S0_2..S0_K, S1_1..S1_K, Z_1..Z_K)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.s0_diff);
        v.extend_from_slice(&self.s1);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn from_vec(k: usize, coords: &[f64]) -> Result<Self> {
        if k == 0 || coords.len() != 3 * k - 1 {
            return Err(Error::Shape { expected: (3 * k).saturating_sub(1), got: coords.len() });
        }
        Ok(Self {
            s0_diff: coords[..k - 1].to_vec(),
            s1: coords[k - 1..2 * k - 1].to_vec(),
            z: coords[2 * k - 1..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.s0_diff.iter().chain(&self.s1).chain(&self.z).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.s0_diff.iter().chain(&self.s1).chain(&self.z).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Unnormalized logit of `slot` under treatment `w`.
    #[inline]
    pub fn logit(&self, slot: usize, treated: bool) -> f64 {
        let base = if slot == 0 { 0.0 } else { self.s0_diff[slot - 1] };
        if treated {
            base + self.s1[slot]
        } else {
            base
        }
    }
}

/// Exposure probabilities for treatment vector `w`, without validation.
pub(crate) fn probs_into(bundle: &ScoreBundle, w: impl Fn(usize) -> bool, out: &mut [f64]) {
    for (slot, o) in out.iter_mut().enumerate() {
        *o = bundle.logit(slot, w(slot));
    }
    softmax_in_place(out);
}

pub(crate) fn probs_uniform(bundle: &ScoreBundle, treated: bool) -> Vec<f64> {
    let mut p = vec![0.0; bundle.k()];
    probs_into(bundle, |_| treated, &mut p);
    p
}

fn check_w(bundle: &ScoreBundle, w: &[bool]) -> Result<()> {
    if w.len() != bundle.k() {
        return Err(Error::Shape { expected: bundle.k(), got: w.len() });
    }
    if !bundle.is_finite() {
        return Err(Error::Input("score bundle has non-finite entries".into()));
    }
    Ok(())
}

/// Multinomial-logit exposure probabilities of every slot.
pub fn exposure_probs(bundle: &ScoreBundle, w: &[bool]) -> Result<Vec<f64>> {
    check_w(bundle, w)?;
    let mut p = vec![0.0; bundle.k()];
    probs_into(bundle, |s| w[s], &mut p);
    Ok(p)
}

/// Cross-entropy of the realized exposure, `-log p_{k*}`.
pub fn choice_loss(bundle: &ScoreBundle, w: &[bool], k_star: usize) -> Result<f64> {
    check_w(bundle, w)?;
    if k_star >= bundle.k() {
        return Err(Error::Input(format!("exposed slot {k_star} out of range for K = {}", bundle.k())));
    }
    let logits: Vec<f64> = (0..bundle.k()).map(|s| bundle.logit(s, w[s])).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(logits.iter().map(|v| libm::exp(v - m)).sum::<f64>());
    Ok((lse - logits[k_star]).max(0.0))
}

/// Squared error of the exposed item's predicted response.
pub fn response_loss(z_k_star: f64, y: f64) -> f64 {
    (z_k_star - y) * (z_k_star - y)
}

/// Recovers `(S0 differences, S1)` from exact exposure probabilities under
/// the all-control pattern, the pattern that treats only slot 1, and the
/// all-treated pattern.
pub fn identify_from_probs(p_all0: &[f64], p_first1: &[f64], p_all1: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = p_all0.len();
    if p_first1.len() != k || p_all1.len() != k {
        return Err(Error::Shape { expected: k, got: p_first1.len().min(p_all1.len()) });
    }
    if k < 2 {
        return Err(Error::Input("identification needs at least two slots".into()));
    }
    for p in [p_all0, p_first1, p_all1] {
        if let Some(slot) = p.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Identification { slot });
        }
    }
    let s0_diff: Vec<f64> = (1..k).map(|s| libm::log(p_all0[s] / p_all0[0])).collect();
    let rest: f64 = p_first1[1..].iter().sum();
    let others: f64 = s0_diff.iter().map(|v| libm::exp(*v)).sum();
    let s1_first = libm::log(others * p_first1[0] / rest);
    let mut s1 = vec![s1_first; k];
    for s in 1..k {
        s1[s] = libm::log(p_all1[s] / p_all1[0]) - s0_diff[s - 1] + s1_first;
    }
    Ok((s0_diff, s1))
}

/// Affine standardization of the concatenated `(viewer, item)` features.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureSpec {
    pub viewer_dim: usize,
    pub item_dim: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureSpec {
    pub fn identity(viewer_dim: usize, item_dim: usize) -> Self {
        let w = viewer_dim + item_dim;
        Self { viewer_dim, item_dim, shift: vec![0.0; w], scale: vec![1.0; w] }
    }

    /// Mean / standard deviation over every `(viewer, slot item)` pair of
    /// the given queries. Constant columns keep scale 1.
    pub fn fit(dataset: &Dataset, idx: &[usize]) -> Self {
        let mut spec = Self::identity(dataset.viewer_dim(), dataset.item_dim());
        let w = spec.width();
        let mut sum = vec![0.0; w];
        let mut sq = vec![0.0; w];
        let mut n = 0.0;
        let mut row = Vec::with_capacity(w);
        for &i in idx {
            let obs = &dataset.observations()[i];
            for slot in 0..obs.set_size() {
                row.clear();
                row.extend_from_slice(&obs.viewer);
                row.extend_from_slice(&dataset.slot_item(obs, slot).features);
                for j in 0..w {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                n += 1.0;
            }
        }
        if n > 0.0 {
            for j in 0..w {
                let m = sum[j] / n;
                let var = (sq[j] / n - m * m).max(0.0);
                spec.shift[j] = m;
                spec.scale[j] = if var > 1e-12 { libm::sqrt(var) } else { 1.0 };
            }
        }
        spec
    }

    pub fn width(&self) -> usize {
        self.viewer_dim + self.item_dim
    }

    /// Appends the network input for one `(viewer, item)` pair.
    pub fn encode_into(&self, viewer: &[f64], item: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if viewer.len() != self.viewer_dim {
            return Err(Error::Shape { expected: self.viewer_dim, got: viewer.len() });
        }
        if item.len() != self.item_dim {
            return Err(Error::Shape { expected: self.item_dim, got: item.len() });
        }
        for (j, v) in viewer.iter().chain(item).enumerate() {
            out.push((v - self.shift[j]) / self.scale[j]);
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        let mut s = format!("feature_spec viewer={} item={} shift=", self.viewer_dim, self.item_dim);
        join_reals(&mut s, &self.shift);
        s.push_str(" scale=");
        join_reals(&mut s, &self.scale);
        s
    }

    fn from_line(line: &str, ln: usize) -> Result<Self> {
        let bad = |msg: &str| Error::Parse { line: ln, msg: msg.into() };
        let mut it = line.split_whitespace();
        if it.next() != Some("feature_spec") {
            return Err(bad("expected `feature_spec` line"));
        }
        let mut viewer = None;
        let mut item = None;
        let mut shift = None;
        let mut scale = None;
        for tok in it {
            let (key, val) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match key {
                "viewer" => viewer = Some(val.parse::<usize>().map_err(|_| bad("bad viewer width"))?),
                "item" => item = Some(val.parse::<usize>().map_err(|_| bad("bad item width"))?),
                "shift" => shift = Some(parse_reals(val).ok_or_else(|| bad("bad shift"))?),
                "scale" => scale = Some(parse_reals(val).ok_or_else(|| bad("bad scale"))?),
                _ => return Err(bad("unknown feature_spec key")),
            }
        }
        let (viewer_dim, item_dim) = (viewer.ok_or_else(|| bad("missing viewer"))?, item.ok_or_else(|| bad("missing item"))?);
        let (shift, scale) = (shift.ok_or_else(|| bad("missing shift"))?, scale.ok_or_else(|| bad("missing scale"))?);
        if shift.len() != viewer_dim + item_dim || scale.len() != shift.len() {
            return Err(bad("feature_spec widths disagree"));
        }
        Ok(Self { viewer_dim, item_dim, shift, scale })
    }
}

fn join_reals(s: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v:?}");
    }
}

fn parse_reals(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.parse().ok()).collect()
}

/// Fitted `(s0, s1, z)` approximators.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NuisanceSet {
    pub s0: DenseNet,
    pub s1: DenseNet,
    pub z: DenseNet,
    /// Fold whose complement the nets were trained on.
    pub trained_on: u32,
    pub features: FeatureSpec,
}

impl NuisanceSet {
    pub fn new(s0: DenseNet, s1: DenseNet, z: DenseNet, trained_on: u32, features: FeatureSpec) -> Result<Self> {
        let w = features.width();
        for net in [&s0, &s1, &z] {
            if net.input_dim() != w {
                return Err(Error::Shape { expected: w, got: net.input_dim() });
            }
            if net.output_dim() != 1 {
                return Err(Error::Shape { expected: 1, got: net.output_dim() });
            }
        }
        Ok(Self { s0, s1, z, trained_on, features })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("nuisance v1\n");
        let _ = writeln!(s, "fold {}", self.trained_on);
        let _ = writeln!(s, "{}", self.features.to_line());
        for net in [&self.s0, &self.s1, &self.z] {
            s.push_str(&net.to_text());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let expect = |i: usize| -> Result<&str> {
            lines.get(i).copied().ok_or(Error::Parse { line: i + 1, msg: "unexpected end of input".into() })
        };
        if expect(0)?.trim() != "nuisance v1" {
            return Err(Error::Parse { line: 1, msg: "expected `nuisance v1`".into() });
        }
        let fold = expect(1)?
            .strip_prefix("fold ")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or(Error::Parse { line: 2, msg: "expected `fold <id>`".into() })?;
        let features = FeatureSpec::from_line(expect(2)?, 3)?;
        let mut offset = 3;
        let mut nets = Vec::with_capacity(3);
        for _ in 0..3 {
            let rest = lines.get(offset..).unwrap_or(&[]).join("\n");
            let (net, used) = DenseNet::from_text_prefix(&rest).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse { line: line + offset, msg },
                other => other,
            })?;
            nets.push(net);
            offset += used;
        }
        let z = nets.pop().expect("three nets");
        let s1 = nets.pop().expect("three nets");
        let s0 = nets.pop().expect("three nets");
        Self::new(s0, s1, z, fold, features)
    }
}

fn encode_queries(features: &FeatureSpec, dataset: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    let k = dataset.set_size();
    let mut rows = Vec::with_capacity(idx.len() * k * features.width());
    for &i in idx {
        let obs = &dataset.observations()[i];
        for slot in 0..k {
            features.encode_into(&obs.viewer, &dataset.slot_item(obs, slot).features, &mut rows)?;
        }
    }
    Ok(rows)
}

/// Score bundle of one query under fitted nuisances.
pub fn bundle_from_nuisances(nuisances: &NuisanceSet, obs: &Observation, dataset: &Dataset) -> Result<ScoreBundle> {
    let k = obs.set_size();
    let mut rows = Vec::with_capacity(k * nuisances.features.width());
    for slot in 0..k {
        let item = dataset
            .item(obs.item_ids[slot])
            .ok_or_else(|| Error::Input(format!("unknown item {}", obs.item_ids[slot])))?;
        nuisances.features.encode_into(&obs.viewer, &item.features, &mut rows)?;
    }
    let s0 = nuisances.s0.predict_batch(&rows, k);
    let s1 = nuisances.s1.predict_batch(&rows, k);
    let z = nuisances.z.predict_batch(&rows, k);
    Ok(ScoreBundle::from_raw(&s0, &s1, &z))
}

/// Batched [`bundle_from_nuisances`] over the queries `idx` of `dataset`.
pub fn bundles_from_nuisances(nuisances: &NuisanceSet, dataset: &Dataset, idx: &[usize]) -> Result<Vec<ScoreBundle>> {
    let k = dataset.set_size();
    let rows = encode_queries(&nuisances.features, dataset, idx)?;
    let n = idx.len() * k;
    let s0 = nuisances.s0.predict_batch(&rows, n);
    let s1 = nuisances.s1.predict_batch(&rows, n);
    let z = nuisances.z.predict_batch(&rows, n);
    Ok((0..idx.len())
        .map(|q| {
            let r = q * k..(q + 1) * k;
            ScoreBundle::from_raw(&s0[r.clone()], &s1[r.clone()], &z[r])
        })
        .collect())
}

/// Bundle of one query under the simulator's true score functions.
pub fn true_bundle(spec: ScoreSpec, obs: &Observation, dataset: &Dataset) -> ScoreBundle {
    let k = obs.set_size();
    let (mut s0, mut s1, mut z) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let v = obs.viewer[0];
    for slot in 0..k {
        let f = &dataset.slot_item(obs, slot).features;
        (s0[slot], s1[slot], z[slot]) = spec.eval(v, f[0], f[1]);
    }
    ScoreBundle::from_raw(&s0, &s1, &z)
}

/// Per-query choice likelihood for the jointly trained `(s0, s1)` nets.
struct ChoiceObjective {
    k: usize,
    dim: usize,
    rows: Vec<f64>,
    treated: Vec<bool>,
    k_star: Vec<usize>,
}

impl Objective for ChoiceObjective {
    fn n_examples(&self) -> usize {
        self.k_star.len()
    }

    fn evaluate(&self, nets: &[DenseNet], batch: &[usize], grads: Option<&mut [Gradient]>) -> f64 {
        let (k, dim) = (self.k, self.dim);
        let mut x0 = Vec::with_capacity(batch.len() * k * dim);
        let mut x1 = Vec::new();
        let mut treated_pos = Vec::with_capacity(batch.len() * k);
        for &q in batch {
            for slot in 0..k {
                let r = q * k + slot;
                let row = &self.rows[r * dim..(r + 1) * dim];
                x0.extend_from_slice(row);
                if self.treated[r] {
                    treated_pos.push(Some(x1.len() / dim));
                    x1.extend_from_slice(row);
                } else {
                    treated_pos.push(None);
                }
            }
        }
        let n1 = x1.len() / dim;
        let mut tape0 = Tape::default();
        let mut tape1 = Tape::default();
        nets[0].forward_batch(&x0, batch.len() * k, &mut tape0);
        nets[1].forward_batch(&x1, n1, &mut tape1);
        let (out0, out1) = (tape0.output(), tape1.output());

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut d0 = vec![0.0; batch.len() * k];
        let mut d1 = vec![0.0; n1];
        let mut p = vec![0.0; k];
        for (b, &q) in batch.iter().enumerate() {
            for slot in 0..k {
                let r = b * k + slot;
                p[slot] = out0[r] + treated_pos[r].map_or(0.0, |t| out1[t]);
            }
            let ks = self.k_star[q];
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let chosen = p[ks];
            let mut total = 0.0;
            for v in p.iter_mut() {
                *v = libm::exp(*v - m);
                total += *v;
            }
            loss += m + libm::log(total) - chosen;
            for slot in 0..k {
                let r = b * k + slot;
                let g = (p[slot] / total - if slot == ks { 1.0 } else { 0.0 }) * scale;
                d0[r] = g;
                if let Some(t) = treated_pos[r] {
                    d1[t] = g;
                }
            }
        }
        if let Some(grads) = grads {
            let (g0, g1) = grads.split_at_mut(1);
            nets[0].backward(&tape0, &d0, &mut g0[0]);
            if n1 > 0 {
                nets[1].backward(&tape1, &d1, &mut g1[0]);
            }
        }
        loss * scale
    }
}

/// Trains `(s0, s1)` on the choice likelihood and `z` on the exposed
/// responses of the queries `idx`.
pub fn fit_nuisances(
    dataset: &Dataset,
    idx: &[usize],
    net: &NetConfig,
    train: &TrainConfig,
    fold: u32,
) -> Result<NuisanceSet> {
    if idx.is_empty() {
        return Err(Error::Input("cannot fit nuisances on an empty slice".into()));
    }
    train.validate()?;
    let features = FeatureSpec::fit(dataset, idx);
    let dim = features.width();
    let k = dataset.set_size();
    let rows = encode_queries(&features, dataset, idx)?;
    let mut treated = Vec::with_capacity(idx.len() * k);
    let mut k_star = Vec::with_capacity(idx.len());
    let mut z_rows = Vec::with_capacity(idx.len() * dim);
    let mut y = Vec::with_capacity(idx.len());
    for (q, &i) in idx.iter().enumerate() {
        let obs = &dataset.observations()[i];
        treated.extend_from_slice(&obs.treatment);
        k_star.push(obs.exposed_slot);
        let r = q * k + obs.exposed_slot;
        z_rows.extend_from_slice(&rows[r * dim..(r + 1) * dim]);
        y.push(obs.outcome);
    }
    let widths = net.widths(dim, 1);
    let clamp = train.output_clamp;
    let s0 = DenseNet::new(&widths, clamp, rng::mix(train.seed, 0, 1))?;
    let s1 = DenseNet::new(&widths, clamp, rng::mix(train.seed, 0, 2))?;
    let z = DenseNet::new(&widths, clamp, rng::mix(train.seed, 0, 3))?;

    let objective = ChoiceObjective { k, dim, rows, treated, k_star };
    let (mut nets, _) = nnet::train_joint(alloc::vec![s0, s1], &objective, train)?;
    let s1 = nets.pop().expect("two nets");
    let s0 = nets.pop().expect("two nets");

    let z_data = RegressionSet::new(dim, z_rows, y)?;
    let z_cfg = TrainConfig { seed: rng::mix(train.seed, 0, 4), ..train.clone() };
    let (z, _) = nnet::train(z, &z_data, &z_cfg)?;
    NuisanceSet::new(s0, s1, z, fold, features)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitDiagnostics {
    pub logloss: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub mse: f64,
}

/// Held-out fit metrics of score bundles against realized exposures and
/// outcomes. AUC ranks exposed against non-exposed slots by predicted
/// exposure probability, pooled over all queries (ties count one half).
pub fn diagnostics_from_bundles(bundles: &[ScoreBundle], observations: &[&Observation]) -> Result<FitDiagnostics> {
    if bundles.is_empty() || bundles.len() != observations.len() {
        return Err(Error::Input("diagnostics need a non-empty, aligned slice".into()));
    }
    let mut logloss = 0.0;
    let mut hits = 0usize;
    let mut mse = 0.0;
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (b, obs) in bundles.iter().zip(observations) {
        let p = exposure_probs(b, &obs.treatment)?;
        let ks = obs.exposed_slot;
        logloss -= libm::log(p[ks].max(f64::MIN_POSITIVE));
        let top = p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
        if top == ks {
            hits += 1;
        }
        mse += response_loss(b.z[ks], obs.outcome);
        scored.extend(p.iter().enumerate().map(|(i, v)| (*v, i == ks)));
    }
    let n = bundles.len() as f64;
    Ok(FitDiagnostics { logloss: logloss / n, accuracy: hits as f64 / n, auc: pooled_auc(&mut scored), mse: mse / n })
}

/// Mann-Whitney AUC with midranks for ties.
fn pooled_auc(scored: &mut [(f64, bool)]) -> f64 {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = scored.iter().filter(|s| s.1).count() as f64;
    let n_neg = scored.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * scored[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// [`diagnostics_from_bundles`] for fitted nuisances on the queries `idx`.
pub fn fit_diagnostics(nuisances: &NuisanceSet, dataset: &Dataset, idx: &[usize]) -> Result<FitDiagnostics> {
    if idx.is_empty() {
        return Err(Error::Input("empty held-out slice".into()));
    }
    let bundles = bundles_from_nuisances(nuisances, dataset, idx)?;
    let obs: Vec<&Observation> = idx.iter().map(|&i| &dataset.observations()[i]).collect();
    diagnostics_from_bundles(&bundles, &obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bundle2() -> ScoreBundle {
        ScoreBundle::new(vec![1.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn symmetric_scores_give_uniform_probabilities() {
        let b = ScoreBundle::new(vec![0.0; 3], vec![0.0; 4], vec![1.0; 4]).unwrap();
        let p = exposure_probs(&b, &[true, false, true, false]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_slot_softmax() {
        let p = exposure_probs(&bundle2(), &[false, true]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / (1.0 + core::f64::consts::E), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.731_058_578_630_004_9, epsilon = 1e-12);
    }

    #[test]
    fn shift_invariance_of_raw_scores() {
        let a = ScoreBundle::from_raw(&[0.3, -1.0, 2.0], &[0.5, 0.1, -0.4], &[1.0, 2.0, 3.0]);
        let b = ScoreBundle::from_raw(&[10.3, 9.0, 12.0], &[0.5, 0.1, -0.4], &[1.0, 2.0, 3.0]);
        let w = [true, false, true];
        let (pa, pb) = (exposure_probs(&a, &w).unwrap(), exposure_probs(&b, &w).unwrap());
        for (x, y) in pa.iter().zip(&pb) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let b = ScoreBundle::new(vec![800.0, -800.0], vec![0.0; 3], vec![0.0; 3]).unwrap();
        let p = exposure_probs(&b, &[false; 3]).unwrap();
        assert_eq!(p[1], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let b = ScoreBundle::new(vec![f64::NAN], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(exposure_probs(&b, &[false, false]), Err(Error::Input(_))));
    }

    #[test]
    fn choice_loss_examples() {
        let uniform = ScoreBundle::new(vec![0.0; 2], vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_abs_diff_eq!(choice_loss(&uniform, &[false; 3], 1).unwrap(), libm::log(3.0), epsilon = 1e-14);
        let peaked = ScoreBundle::new(vec![60.0, 0.0], vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(choice_loss(&peaked, &[false; 3], 1).unwrap() < 1e-20);
        assert_abs_diff_eq!(choice_loss(&bundle2(), &[false, false], 1).unwrap(), 0.313_261_687_518_222_8, epsilon = 1e-12);
        assert!(choice_loss(&bundle2(), &[false, false], 2).is_err());
    }

    #[test]
    fn response_loss_examples() {
        assert_eq!(response_loss(1.3, 1.3), 0.0);
        assert_eq!(response_loss(0.0, 2.0), 4.0);
        assert_eq!(response_loss(1.5, -0.5), 4.0);
    }

    #[test]
    fn identification_uniform() {
        let u = [1.0 / 3.0; 3];
        let (s0, s1) = identify_from_probs(&u, &u, &u).unwrap();
        assert!(s0.iter().chain(&s1).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn identification_two_slots() {
        let truth = ScoreBundle::new(vec![1.0], vec![0.5, -0.5], vec![0.0; 2]).unwrap();
        let p0 = exposure_probs(&truth, &[false, false]).unwrap();
        let pf = exposure_probs(&truth, &[true, false]).unwrap();
        let p1 = exposure_probs(&truth, &[true, true]).unwrap();
        assert_abs_diff_eq!(p0[0], 0.268_941_421_369_995, epsilon = 1e-12);
        let (s0, s1) = identify_from_probs(&p0, &pf, &p1).unwrap();
        assert_abs_diff_eq!(s0[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s1[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s1[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn identification_rejects_zero_probability() {
        let p = [0.5, 0.5, 0.0];
        let u = [1.0 / 3.0; 3];
        assert_eq!(identify_from_probs(&u, &u, &p), Err(Error::Identification { slot: 2 }));
    }

    #[test]
    fn auc_midranks() {
        let mut s = [(0.1, false), (0.9, true), (0.5, false), (0.5, true)];
        // pairs: (0.9 > 0.1, 0.9 > 0.5, 0.5 > 0.1, 0.5 = 0.5) -> 3.5 / 4
        assert_abs_diff_eq!(pooled_auc(&mut s), 0.875, epsilon = 1e-15);
    }

    #[test]
    fn feature_spec_line_round_trip() {
        let f = FeatureSpec { viewer_dim: 1, item_dim: 2, shift: vec![2.5, 0.5, 0.1], scale: vec![1.4, 0.5, 0.3] };
        assert_eq!(FeatureSpec::from_line(&f.to_line(), 1).unwrap(), f);
        assert!(FeatureSpec::from_line("feature_spec viewer=1", 1).is_err());
    }
}
