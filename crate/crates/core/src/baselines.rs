//! Comparison estimators: difference in means (Horvitz-Thompson and Hájek
//! normalizations), inverse propensity weighting, its augmented version, and
//! a pure prediction ("PDL") estimator.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nnet::{self, DenseNet, NetConfig, RegressionSet, TrainConfig};
use crate::simulator::{Dataset, Observation};
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaselineReport {
    pub estimator: String,
    pub tau_hat: f64,
    pub se: f64,
    /// How `se` was obtained.
    pub se_method: String,
    pub n: usize,
    /// Queries that carry weight in the estimate.
    pub n_effective: usize,
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("treatment probability must be in (0, 1), got {q}")))
    }
}

fn from_summands(estimator: &str, summands: &[f64], n_effective: usize) -> BaselineReport {
    BaselineReport {
        estimator: estimator.into(),
        tau_hat: stats::mean(summands),
        se: stats::sem(summands),
        se_method: "sd of per-query summands / sqrt(n)".into(),
        n: summands.len(),
        n_effective,
    }
}

/// Difference in means normalized by the design probabilities.
pub fn ht_dim(dataset: &Dataset, q: f64) -> Result<BaselineReport> {
    check_q(q)?;
    let s: Vec<f64> = dataset
        .observations()
        .iter()
        .map(|o| if o.exposed_treated() { o.outcome / q } else { -o.outcome / (1.0 - q) })
        .collect();
    Ok(from_summands("HT-DIM", &s, s.len()))
}

/// Difference in means normalized by realized exposure counts.
pub fn ha_dim(dataset: &Dataset) -> Result<BaselineReport> {
    let (t, c): (Vec<&Observation>, Vec<&Observation>) = dataset.observations().iter().partition(|o| o.exposed_treated());
    if t.is_empty() {
        return Err(Error::DegenerateArm("treated"));
    }
    if c.is_empty() {
        return Err(Error::DegenerateArm("control"));
    }
    let yt: Vec<f64> = t.iter().map(|o| o.outcome).collect();
    let yc: Vec<f64> = c.iter().map(|o| o.outcome).collect();
    let var = |y: &[f64]| if y.len() > 1 { stats::variance(y, 1) / y.len() as f64 } else { 0.0 };
    Ok(BaselineReport {
        estimator: "HA-DIM".into(),
        tau_hat: stats::mean(&yt) - stats::mean(&yc),
        se: libm::sqrt(var(&yt) + var(&yc)),
        se_method: "two-sample sqrt(S1^2/n1 + S0^2/n0)".into(),
        n: dataset.len(),
        n_effective: dataset.len(),
    })
}

/// Weight of the realized treatment vector: `q^-K` if every slot is
/// treated, `-(1-q)^-K` if none is, 0 otherwise.
pub fn ipw_weight(w: &[bool], q: f64) -> f64 {
    let k = w.len() as i32;
    if w.iter().all(|&t| t) {
        libm::pow(q, -f64::from(k))
    } else if w.iter().all(|&t| !t) {
        -libm::pow(1.0 - q, -f64::from(k))
    } else {
        0.0
    }
}

pub fn ipw(dataset: &Dataset, q: f64) -> Result<BaselineReport> {
    check_q(q)?;
    let obs = dataset.observations();
    let s: Vec<f64> = obs.iter().map(|o| ipw_weight(&o.treatment, q) * o.outcome).collect();
    let n_eff = obs.iter().filter(|o| ipw_weight(&o.treatment, q) != 0.0).count();
    Ok(from_summands("IPW", &s, n_eff))
}

/// Predicts a query's outcome under a hypothetical treatment vector.
pub trait OutcomeModel {
    fn predict(&self, dataset: &Dataset, obs: &Observation, w: &[bool]) -> Result<f64>;
}

/// The model that always predicts zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOutcome;

impl OutcomeModel for ZeroOutcome {
    fn predict(&self, _: &Dataset, _: &Observation, _: &[bool]) -> Result<f64> {
        Ok(0.0)
    }
}

fn contrasts(dataset: &Dataset, model: &dyn OutcomeModel) -> Result<Vec<(f64, f64)>> {
    let k = dataset.set_size();
    let (ones, zeros) = (alloc::vec![true; k], alloc::vec![false; k]);
    dataset
        .observations()
        .iter()
        .map(|o| Ok((model.predict(dataset, o, &ones)?, model.predict(dataset, o, &zeros)?)))
        .collect()
}

/// IPW with regression adjustment from `model`.
pub fn aipw(dataset: &Dataset, q: f64, model: &dyn OutcomeModel) -> Result<BaselineReport> {
    check_q(q)?;
    let obs = dataset.observations();
    let mu = contrasts(dataset, model)?;
    let s: Vec<f64> = obs
        .iter()
        .zip(&mu)
        .map(|(o, &(m1, m0))| {
            let wt = ipw_weight(&o.treatment, q);
            let resid = if wt > 0.0 {
                wt * (o.outcome - m1)
            } else if wt < 0.0 {
                wt * (o.outcome - m0)
            } else {
                0.0
            };
            m1 - m0 + resid
        })
        .collect();
    let n_eff = obs.iter().filter(|o| ipw_weight(&o.treatment, q) != 0.0).count();
    Ok(from_summands("AIPW", &s, n_eff))
}

/// Outcome network on `(V, c_1.., c_K.., w_1..w_K)` in generated slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct PdlModel {
    pub net: DenseNet,
    /// Standardization of the continuous inputs; treatment flags pass as 0/1.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PdlModel {
    fn encode_into(&self, dataset: &Dataset, obs: &Observation, w: &[bool], out: &mut Vec<f64>) {
        raw_features(dataset, obs, out);
        for (x, (m, s)) in out.iter_mut().zip(self.shift.iter().zip(&self.scale)) {
            *x = (*x - m) / s;
        }
        out.extend(w.iter().map(|&t| if t { 1.0 } else { 0.0 }));
    }
}

impl OutcomeModel for PdlModel {
    fn predict(&self, dataset: &Dataset, obs: &Observation, w: &[bool]) -> Result<f64> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        self.encode_into(dataset, obs, w, &mut x);
        Ok(self.net.forward(&x)?[0])
    }
}

fn raw_features(dataset: &Dataset, obs: &Observation, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&obs.viewer);
    for s in 0..obs.set_size() {
        out.extend_from_slice(&dataset.slot_item(obs, s).features);
    }
}

/// Trains the PDL outcome network on every observed query.
pub fn fit_pdl(dataset: &Dataset, net: &NetConfig, train: &TrainConfig) -> Result<PdlModel> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot fit on an empty dataset".into()));
    }
    let obs = dataset.observations();
    let mut raw = Vec::new();
    let mut buf = Vec::new();
    for o in obs {
        raw_features(dataset, o, &mut buf);
        raw.push(buf.clone());
    }
    let width = raw[0].len();
    let n = obs.len() as f64;
    let mut shift = alloc::vec![0.0; width];
    let mut scale = alloc::vec![0.0; width];
    for j in 0..width {
        let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
        shift[j] = stats::mean(&col);
        let sd = libm::sqrt(col.iter().map(|x| (x - shift[j]) * (x - shift[j])).sum::<f64>() / n);
        scale[j] = if sd > 1e-12 { sd } else { 1.0 };
    }
    let k = dataset.set_size();
    let dim = width + k;
    let mut model = PdlModel { net: DenseNet::zeros(&net.widths(dim, 1), train.output_clamp)?, shift, scale };
    let mut inputs = Vec::with_capacity(obs.len() * dim);
    let mut x = Vec::with_capacity(dim);
    for o in obs {
        model.encode_into(dataset, o, &o.treatment, &mut x);
        inputs.extend_from_slice(&x);
    }
    let data = RegressionSet::new(dim, inputs, obs.iter().map(|o| o.outcome).collect())?;
    let init = DenseNet::new(&net.widths(dim, 1), train.output_clamp, train.seed)?;
    model.net = nnet::train(init, &data, train)?.0;
    Ok(model)
}

/// Mean counterfactual contrast of `model` between all-treated and
/// all-control sets.
pub fn contrast_report(dataset: &Dataset, model: &dyn OutcomeModel, name: &str) -> Result<BaselineReport> {
    let d: Vec<f64> = contrasts(dataset, model)?.into_iter().map(|(a, b)| a - b).collect();
    let mut r = from_summands(name, &d, d.len());
    r.se_method = "sd of per-query contrasts / sqrt(n)".into();
    Ok(r)
}

pub fn pdl(dataset: &Dataset, net: &NetConfig, train: &TrainConfig) -> Result<BaselineReport> {
    let model = fit_pdl(dataset, net, train)?;
    contrast_report(dataset, &model, "PDL")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::Item;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    /// Single-slot queries with the given exposed treatment flags.
    fn toy(flags: &[bool], y: &[f64]) -> Dataset {
        let catalog = vec![
            Item { id: 0, features: vec![0.0, 0.0], treated: false },
            Item { id: 1, features: vec![1.0, 1.0], treated: true },
        ];
        let obs = flags
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (&t, &y))| Observation {
                query_id: i as u64,
                viewer: vec![i as f64],
                item_ids: vec![u64::from(t)],
                treatment: vec![t],
                exposed_slot: 0,
                outcome: y,
            })
            .collect();
        Dataset::new(catalog, obs).unwrap()
    }

    #[test]
    fn dim_examples() {
        let d = toy(&[true, true, false, false], &[1.0; 4]);
        assert_eq!(ht_dim(&d, 0.5).unwrap().tau_hat, 0.0);
        let d = toy(&[true, true, false, false], &[2.0, 2.0, 1.0, 1.0]);
        assert_eq!(ht_dim(&d, 0.5).unwrap().tau_hat, 1.0);
        let ha = ha_dim(&d).unwrap();
        assert_eq!(ha.tau_hat, 1.0);
        assert_eq!(ha.se, 0.0);
    }

    #[test]
    fn ha_dim_needs_both_arms() {
        let d = toy(&[true, true], &[1.0, 2.0]);
        assert_eq!(ha_dim(&d), Err(Error::DegenerateArm("control")));
        let d = toy(&[false], &[1.0]);
        assert_eq!(ha_dim(&d), Err(Error::DegenerateArm("treated")));
    }

    #[test]
    fn ipw_reduces_to_ht_for_single_slot() {
        let d = toy(&[true, false, false, true, false], &[0.3, 1.2, -0.5, 2.0, 0.7]);
        let a = ipw(&d, 0.3).unwrap();
        let b = ht_dim(&d, 0.3).unwrap();
        assert_abs_diff_eq!(a.tau_hat, b.tau_hat, epsilon = 1e-15);
        assert_eq!(a.n_effective, 5);
    }

    #[test]
    fn ipw_weights() {
        assert_eq!(ipw_weight(&[true, true], 0.5), 4.0);
        assert_eq!(ipw_weight(&[false, false], 0.5), -4.0);
        assert_eq!(ipw_weight(&[true, false], 0.5), 0.0);
    }

    #[test]
    fn aipw_with_zero_model_is_ipw() {
        let d = toy(&[true, false, false, true], &[0.3, 1.2, -0.5, 2.0]);
        let a = aipw(&d, 0.4, &ZeroOutcome).unwrap();
        let b = ipw(&d, 0.4).unwrap();
        assert_eq!(a.tau_hat, b.tau_hat);
        assert_eq!(a.n_effective, b.n_effective);
    }

    #[test]
    fn constant_outcome_gives_zero_contrast() {
        use crate::simulator::{simulate, DgpConfig, ScoreSpec};
        let cfg = DgpConfig { n_items: 40, n_queries: 300, set_size: 2, noise_sd: 0.0, score_spec: ScoreSpec::Flat, ..DgpConfig::default() };
        let d = simulate(&cfg).unwrap();
        let train = TrainConfig { epochs: 300, learning_rate: 1e-2, batch_size: 64, validation_fraction: 0.0, ..TrainConfig::default() };
        let r = pdl(&d, &NetConfig { hidden: vec![8] }, &train).unwrap();
        assert!(r.tau_hat.abs() < 0.05, "{r:?}");
    }
}
