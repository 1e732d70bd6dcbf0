//! Cross-module invariant suite. Every check is seeded; a failure reports
//! the seed that reproduces it.

use gte_core::baselines::{ha_dim, ht_dim, ipw, ipw_weight};
use gte_core::choice::{choice_loss, exposure_probs, identify_from_probs, response_loss, ScoreBundle};
use gte_core::debiased::{
    expected_hessian, grad_loss, grad_mu, hessian_loss, orthogonality_check, plugin_mu, psi_value, HessianPolicy,
};
use gte_core::linalg::Matrix;
use gte_core::nnet::{self, param_gradient, DenseNet, LossKind, RegressionSet, TrainConfig};
use gte_core::rng::{self, Stream, StreamRng};
use gte_core::simulator::{self, draw_true_query, DgpConfig, Dataset, Item, Observation, ScoreSpec};
use rand::Rng;
use serde::Serialize;

/// Deliberate defects used to show that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Adds 1e-3 to the first component of the analytic plug-in gradient.
    GradMu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Draws for the Monte Carlo orthogonality test.
    pub orthogonality_draws: usize,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { seed: 0, orthogonality_draws: 100_000, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seed: u64,
}

fn rng_for(seed: u64, tag: u64) -> StreamRng {
    rng::indexed_stream(seed, tag, Stream::Check)
}

fn random_bundle(rng: &mut StreamRng, k: usize, bound: f64) -> ScoreBundle {
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
    let (s0, s1, z) = (draw(k - 1), draw(k), draw(k));
    ScoreBundle::new(s0, s1, z).expect("finite draws")
}

fn random_w(rng: &mut StreamRng, k: usize) -> Vec<bool> {
    (0..k).map(|_| rng.random_bool(0.5)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn central(f: &dyn Fn(&ScoreBundle) -> f64, b: &ScoreBundle, j: usize, h: f64) -> f64 {
    let (mut plus, mut minus) = (b.to_vec(), b.to_vec());
    plus[j] += h;
    minus[j] -= h;
    let k = b.k();
    let at = |x: &[f64]| f(&ScoreBundle::from_vec(k, x).expect("same shape"));
    (at(&plus) - at(&minus)) / (2.0 * h)
}

const CALCULUS_K: [usize; 4] = [2, 3, 5, 8];

pub fn check_probabilities(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 1);
    for i in 0..draws {
        let k = r.random_range(2..=8);
        let b = random_bundle(&mut r, k, 50.0);
        let p = exposure_probs(&b, &random_w(&mut r, k)).map_err(|e| e.to_string())?;
        let err = (p.iter().sum::<f64>() - 1.0).abs();
        if err > 1e-12 {
            return Err(format!("draw {i}: probabilities sum off by {err:e}"));
        }
    }
    Ok(())
}

/// Scores bounded by `C = 2` keep every exposure probability above `e^-8 / K`.
pub fn check_overlap_bound(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 2);
    for i in 0..draws {
        let k = r.random_range(2..=8);
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..=2.0)).collect();
        let s1: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..=2.0)).collect();
        let b = ScoreBundle::from_raw(&raw, &s1, &vec![0.0; k]);
        let p = exposure_probs(&b, &random_w(&mut r, k)).map_err(|e| e.to_string())?;
        let floor = (-8.0f64).exp() / k as f64;
        if let Some(v) = p.iter().find(|&&v| v < floor) {
            return Err(format!("draw {i}: probability {v:e} below {floor:e}"));
        }
    }
    Ok(())
}

pub fn check_identification(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 3);
    for i in 0..draws {
        let k = r.random_range(2..=8);
        let b = random_bundle(&mut r, k, 3.0);
        let mut first = vec![false; k];
        first[0] = true;
        let p = |w: &[bool]| exposure_probs(&b, w).map_err(|e| e.to_string());
        let (s0, s1) = identify_from_probs(&p(&vec![false; k])?, &p(&first)?, &p(&vec![true; k])?).map_err(|e| e.to_string())?;
        let worst = s0.iter().zip(&b.s0_diff).chain(s1.iter().zip(&b.s1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if worst > 1e-10 {
            return Err(format!("draw {i}: recovered scores off by {worst:e}"));
        }
    }
    Ok(())
}

pub fn check_grad_mu(seed: u64, per_k: usize, fault: Option<Fault>) -> Result<(), String> {
    let mut r = rng_for(seed, 4);
    for &k in &CALCULUS_K {
        for i in 0..per_k {
            let b = random_bundle(&mut r, k, 3.0);
            let mut g = grad_mu(&b);
            if fault == Some(Fault::GradMu) {
                g[0] += 1e-3;
            }
            for (j, gj) in g.iter().enumerate() {
                let fd = central(&plugin_mu, &b, j, 1e-6);
                if rel_err(*gj, fd) > 1e-5 {
                    return Err(format!("grad_mu: K={k} instance {i} coordinate {j}: analytic {gj} vs difference {fd}"));
                }
            }
        }
    }
    Ok(())
}

pub fn check_grad_loss(seed: u64, per_k: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 5);
    for &k in &CALCULUS_K {
        for i in 0..per_k {
            let b = random_bundle(&mut r, k, 3.0);
            let w = random_w(&mut r, k);
            let ks = r.random_range(0..k);
            let y = r.random_range(-3.0..3.0);
            let g = grad_loss(&b, &w, ks, y).map_err(|e| e.to_string())?;
            let loss = |x: &ScoreBundle| choice_loss(x, &w, ks).unwrap_or(f64::NAN) + response_loss(x.z[ks], y);
            for (j, gj) in g.iter().enumerate() {
                let fd = central(&loss, &b, j, 1e-6);
                if rel_err(*gj, fd) > 1e-5 {
                    return Err(format!("grad_loss: K={k} instance {i} coordinate {j}: analytic {gj} vs difference {fd}"));
                }
            }
        }
    }
    Ok(())
}

/// Choice block against second differences of the choice loss, PSD, and the
/// response block against the exposure-weighted curvature `2 p_k`.
pub fn check_hessian_loss(seed: u64, per_k: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 6);
    let h = 1e-4;
    for &k in &CALCULUS_K {
        for i in 0..per_k {
            let b = random_bundle(&mut r, k, 3.0);
            let w = random_w(&mut r, k);
            let ks = r.random_range(0..k);
            let an = hessian_loss(&b, &w).map_err(|e| e.to_string())?;
            let nc = 2 * k - 1;
            let base = b.to_vec();
            let f = |a: usize, sa: f64, c: usize, sc: f64| {
                let mut x = base.clone();
                x[a] += sa * h;
                x[c] += sc * h;
                choice_loss(&ScoreBundle::from_vec(k, &x).expect("same shape"), &w, ks).unwrap_or(f64::NAN)
            };
            let mut block = Matrix::zeros(nc);
            for a in 0..nc {
                for c in 0..nc {
                    let fd = (f(a, 1.0, c, 1.0) - f(a, 1.0, c, -1.0) - f(a, -1.0, c, 1.0) + f(a, -1.0, c, -1.0)) / (4.0 * h * h);
                    if rel_err(an[(a, c)], fd) > 1e-5 {
                        return Err(format!("hessian_loss: K={k} instance {i} entry ({a},{c}): {} vs {fd}", an[(a, c)]));
                    }
                    block[(a, c)] = an[(a, c)];
                }
            }
            let min = block.min_eigenvalue();
            if min < -1e-10 {
                return Err(format!("hessian_loss: K={k} instance {i}: choice block min eigenvalue {min:e}"));
            }
            let p = exposure_probs(&b, &w).map_err(|e| e.to_string())?;
            for s in 0..k {
                if rel_err(an[(nc + s, nc + s)], 2.0 * p[s]) > 1e-14 {
                    return Err(format!("hessian_loss: K={k} instance {i}: response block entry {s}"));
                }
            }
        }
    }
    Ok(())
}

pub fn check_expected_hessian_pd(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 7);
    let policy = HessianPolicy::exact();
    for i in 0..draws {
        let k = CALCULUS_K[i % 4];
        let q = [0.2, 0.5, 0.8][i % 3];
        let b = random_bundle(&mut r, k, 3.0);
        let h = expected_hessian(&b, q, &policy, &mut r).map_err(|e| e.to_string())?;
        let min = h.min_eigenvalue();
        if !(min > 0.0) {
            return Err(format!("draw {i} (K={k}, q={q}): min eigenvalue {min:e}"));
        }
    }
    Ok(())
}

fn observation(w: &[bool], k_star: usize, y: f64) -> Observation {
    Observation {
        query_id: 0,
        viewer: vec![0.0],
        item_ids: (0..w.len() as u64).collect(),
        treatment: w.to_vec(),
        exposed_slot: k_star,
        outcome: y,
    }
}

/// With true nuisances the exact mean of `psi` over `(W, k*)`, with
/// `E[Y | k*] = Z_k*`, equals `mu`.
pub fn check_psi_unbiased(seed: u64, queries: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 8);
    let policy = HessianPolicy::exact();
    let q = 0.5f64;
    for i in 0..queries {
        let tq = draw_true_query(ScoreSpec::Table1, 3, &mut r);
        let b = ScoreBundle::from_raw(&tq.s0, &tq.s1, &tq.z);
        let k = b.k();
        let mut mean = 0.0;
        for mask in 0u32..(1 << k) {
            let w: Vec<bool> = (0..k).map(|s| mask & (1 << s) != 0).collect();
            let ones = w.iter().filter(|t| **t).count() as i32;
            let weight = q.powi(ones) * (1.0 - q).powi(k as i32 - ones);
            let p = exposure_probs(&b, &w).map_err(|e| e.to_string())?;
            for ks in 0..k {
                let rec = psi_value(&observation(&w, ks, b.z[ks]), &b, q, &policy).map_err(|e| e.to_string())?;
                mean += weight * p[ks] * rec.psi;
            }
        }
        let mu = plugin_mu(&b);
        if (mean - mu).abs() > 1e-10 {
            return Err(format!("query {i}: E[psi] = {mean} but mu = {mu}"));
        }
    }
    Ok(())
}

pub fn check_normalization(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 9);
    let policy = HessianPolicy::exact();
    for i in 0..draws {
        let k = 4;
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let s1: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let c = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = raw.iter().map(|v| v + c).collect();
        let (a, b) = (ScoreBundle::from_raw(&raw, &s1, &z), ScoreBundle::from_raw(&shifted, &s1, &z));
        let obs = observation(&random_w(&mut r, k), r.random_range(0..k), r.random_range(-1.0..1.0));
        let pa = psi_value(&obs, &a, 0.5, &policy).map_err(|e| e.to_string())?;
        let pb = psi_value(&obs, &b, 0.5, &policy).map_err(|e| e.to_string())?;
        if (pa.psi - pb.psi).abs() > 1e-10 || (pa.mu - pb.mu).abs() > 1e-12 {
            return Err(format!("draw {i}: shift {c} moved psi from {} to {}", pa.psi, pb.psi));
        }
    }
    Ok(())
}

pub fn check_orthogonality(seed: u64, draws: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 10);
    let truth = |r: &mut StreamRng| {
        let q = draw_true_query(ScoreSpec::Table1, 2, r);
        ScoreBundle::from_raw(&q.s0, &q.s1, &q.z)
    };
    let rep = orthogonality_check(truth, 0.5, draws, DgpConfig::default().noise_sd, &mut r).map_err(|e| e.to_string())?;
    if rep.max_z > 3.0 {
        return Err(format!(
            "component {} of E[grad psi] is {:e} = {:.2} standard errors from zero",
            rep.worst, rep.mean[rep.worst], rep.max_z
        ));
    }
    Ok(())
}

fn net_loss(net: &DenseNet, batch: &[(Vec<f64>, LossKind)]) -> f64 {
    batch
        .iter()
        .map(|(x, kind)| {
            let out = net.forward(x).expect("shape checked");
            match kind {
                LossKind::SquaredError(t) => out.iter().zip(t).map(|(o, t)| (o - t) * (o - t)).sum::<f64>(),
                LossKind::Downstream(g) => out.iter().zip(g).map(|(o, g)| o * g).sum::<f64>(),
            }
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Signs of every hidden pre-activation over the batch.
fn activation_pattern(net: &DenseNet, batch: &[(Vec<f64>, LossKind)]) -> Vec<bool> {
    let mut signs = Vec::new();
    let layers = net.layers();
    for (x, _) in batch {
        let mut a = x.clone();
        for layer in &layers[..layers.len() - 1] {
            let z: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    layer.bias[o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            signs.extend(z.iter().map(|v| *v > 0.0));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    signs
}

pub fn check_net_gradients(seed: u64, nets: usize) -> Result<(), String> {
    let mut r = rng_for(seed, 11);
    let h = 1e-5;
    let mut compared = 0usize;
    for case in 0..nets {
        let depth = r.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=16)).collect();
        let net = DenseNet::new(&widths, 1e6, rng::mix(seed, case as u64, 0)).map_err(|e| e.to_string())?;
        let (din, dout) = (widths[0], widths[depth]);
        let batch: Vec<(Vec<f64>, LossKind)> = (0..r.random_range(1..=4))
            .map(|_| {
                let x = (0..din).map(|_| r.random_range(-2.0..2.0)).collect();
                let t = (0..dout).map(|_| r.random_range(-2.0..2.0)).collect();
                (x, if r.random_bool(0.5) { LossKind::SquaredError(t) } else { LossKind::Downstream(t) })
            })
            .collect();
        let g = param_gradient(&net, &batch).map_err(|e| e.to_string())?.flat();
        let params = net.params();
        for (j, &gj) in g.iter().enumerate() {
            let mut p = params.clone();
            p[j] += h;
            let mut plus = net.clone();
            plus.set_params(&p).map_err(|e| e.to_string())?;
            p[j] -= 2.0 * h;
            let mut minus = net.clone();
            minus.set_params(&p).map_err(|e| e.to_string())?;
            // a ReLU switching inside the stencil makes the quotient meaningless
            let base = activation_pattern(&net, &batch);
            if activation_pattern(&plus, &batch) != base || activation_pattern(&minus, &batch) != base {
                continue;
            }
            let fd = (net_loss(&plus, &batch) - net_loss(&minus, &batch)) / (2.0 * h);
            compared += 1;
            if rel_err(gj, fd) > 1e-5 {
                return Err(format!("net {case} {widths:?} parameter {j}: analytic {gj} vs difference {fd}"));
            }
        }
    }
    if compared == 0 {
        return Err("no parameter was away from a kink".into());
    }
    Ok(())
}

pub fn check_clamp(seed: u64) -> Result<(), String> {
    let mut r = rng_for(seed, 12);
    let net = DenseNet::new(&[3, 8, 2], 0.25, seed).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-100.0..100.0)).collect();
        let y = net.forward(&x).map_err(|e| e.to_string())?;
        if y.iter().any(|v| v.abs() > 0.25) {
            return Err(format!("output {y:?} exceeds the clamp"));
        }
    }
    Ok(())
}

pub fn check_training_determinism(seed: u64) -> Result<(), String> {
    let mut r = rng_for(seed, 13);
    let xs: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let data = RegressionSet::new(1, xs, ys).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 20, batch_size: 16, seed, ..TrainConfig::default() };
    let run = || -> Result<Vec<u64>, String> {
        let net = DenseNet::new(&[1, 8, 1], 30.0, seed).map_err(|e| e.to_string())?;
        let (net, _) = nnet::train(net, &data, &cfg).map_err(|e| e.to_string())?;
        Ok(net.params().iter().map(|v| v.to_bits()).collect())
    };
    if run()? != run()? {
        return Err("two identical training runs differ".into());
    }
    Ok(())
}

pub fn check_simulation_determinism(seed: u64) -> Result<(), String> {
    let cfg = DgpConfig { n_items: 50, n_queries: 200, seed, ..DgpConfig::default() };
    let a = simulator::simulate(&cfg).map_err(|e| e.to_string())?;
    let b = simulator::simulate(&cfg).map_err(|e| e.to_string())?;
    if a != b {
        return Err("two simulations with one seed differ".into());
    }
    Ok(())
}

pub fn check_ipw_weights(seed: u64) -> Result<(), String> {
    let cfg = DgpConfig { n_items: 50, n_queries: 500, set_size: 2, seed, ..DgpConfig::default() };
    let d = simulator::simulate(&cfg).map_err(|e| e.to_string())?;
    let q = cfg.treat_prob;
    let allowed = [q.powi(-2), -(1.0 - q).powi(-2), 0.0];
    for o in d.observations() {
        let w = ipw_weight(&o.treatment, q);
        if !allowed.contains(&w) {
            return Err(format!("query {}: weight {w}", o.query_id));
        }
    }
    ipw(&d, q).map_err(|e| e.to_string())?;
    Ok(())
}

/// Balanced fixture whose treated exposure share equals `q`: both
/// difference-in-means normalizations agree.
pub fn check_dim_agreement(seed: u64) -> Result<(), String> {
    let mut r = rng_for(seed, 14);
    let catalog = vec![
        Item { id: 0, features: vec![0.0, 0.0], treated: false },
        Item { id: 1, features: vec![1.0, 0.0], treated: true },
    ];
    let obs: Vec<Observation> = (0..40)
        .map(|i| {
            let t = i % 2 == 0;
            Observation {
                query_id: i,
                viewer: vec![1.0],
                item_ids: vec![u64::from(t)],
                treatment: vec![t],
                exposed_slot: 0,
                outcome: r.random_range(-1.0..1.0),
            }
        })
        .collect();
    let d = Dataset::new(catalog, obs).map_err(|e| e.to_string())?;
    let ht = ht_dim(&d, 0.5).map_err(|e| e.to_string())?.tau_hat;
    let ha = ha_dim(&d).map_err(|e| e.to_string())?.tau_hat;
    if (ht - ha).abs() > 1e-12 {
        return Err(format!("HT {ht} vs HA {ha} on a balanced fixture"));
    }
    Ok(())
}

/// Runs the whole suite.
pub fn run_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    let (s, fault, draws) = (opts.seed, opts.fault, opts.orthogonality_draws);
    let suite: Vec<(&'static str, Box<dyn Fn() -> Result<(), String>>)> = vec![
        ("exposure_probs sums to one", Box::new(move || check_probabilities(s, 10_000))),
        ("overlap bound e^-4C/K", Box::new(move || check_overlap_bound(s, 10_000))),
        ("identification round trip", Box::new(move || check_identification(s, 1000))),
        ("grad_mu finite differences", Box::new(move || check_grad_mu(s, 200, fault))),
        ("grad_loss finite differences", Box::new(move || check_grad_loss(s, 200))),
        ("hessian_loss finite differences and PSD", Box::new(move || check_hessian_loss(s, 200))),
        ("expected_hessian positive definite", Box::new(move || check_expected_hessian_pd(s, 1000))),
        ("raw score shift invariance", Box::new(move || check_normalization(s, 200))),
        ("psi unbiased at true nuisances", Box::new(move || check_psi_unbiased(s, 100))),
        ("psi orthogonality", Box::new(move || check_orthogonality(s, draws))),
        ("param_gradient finite differences", Box::new(move || check_net_gradients(s, 200))),
        ("output clamp", Box::new(move || check_clamp(s))),
        ("training determinism", Box::new(move || check_training_determinism(s))),
        ("simulation determinism", Box::new(move || check_simulation_determinism(s))),
        ("ipw weight support", Box::new(move || check_ipw_weights(s))),
        ("dim normalizations agree on balanced data", Box::new(move || check_dim_agreement(s))),
    ];
    suite
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(()) => (true, String::new()),
                Err(e) => (false, e),
            };
            CheckResult { name, passed, detail, seed: s }
        })
        .collect()
}
