use gte_core::choice::{choice_loss, exposure_probs, response_loss, ScoreBundle};
use gte_core::debiased::{
    expected_hessian, expected_psi, grad_loss, grad_mu, hessian_loss, plugin_mu, psi_value, HessianPolicy,
};
use gte_core::linalg::Matrix;
use gte_core::simulator::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bundle(rng: &mut ChaCha8Rng, k: usize, bound: f64) -> ScoreBundle {
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
    let (s0, s1, z) = (draw(k - 1), draw(k), draw(k));
    ScoreBundle::new(s0, s1, z).unwrap()
}

fn random_w(rng: &mut ChaCha8Rng, k: usize) -> Vec<bool> {
    (0..k).map(|_| rng.random_bool(0.5)).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn central<F: Fn(&ScoreBundle) -> f64>(f: F, b: &ScoreBundle, j: usize, h: f64) -> f64 {
    let mut plus = b.to_vec();
    let mut minus = b.to_vec();
    plus[j] += h;
    minus[j] -= h;
    let k = b.k();
    (f(&ScoreBundle::from_vec(k, &plus).unwrap()) - f(&ScoreBundle::from_vec(k, &minus).unwrap())) / (2.0 * h)
}

#[test]
fn grad_mu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &k in &[2, 3, 5, 8] {
        for _ in 0..200 {
            let b = random_bundle(&mut rng, k, 3.0);
            let g = grad_mu(&b);
            for j in 0..b.dim() {
                let fd = central(plugin_mu, &b, j, 1e-6);
                assert!(close(g[j], fd, 1e-6), "K={k} coord {j}: {} vs {fd}", g[j]);
            }
        }
    }
}

#[test]
fn grad_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &k in &[2, 3, 5, 8] {
        for _ in 0..200 {
            let b = random_bundle(&mut rng, k, 3.0);
            let w = random_w(&mut rng, k);
            let ks = rng.random_range(0..k);
            let y: f64 = rng.random_range(-3.0..3.0);
            let loss = |x: &ScoreBundle| choice_loss(x, &w, ks).unwrap() + response_loss(x.z[ks], y);
            let g = grad_loss(&b, &w, ks, y).unwrap();
            for j in 0..b.dim() {
                let fd = central(loss, &b, j, 1e-6);
                assert!(close(g[j], fd, 1e-6), "K={k} coord {j}: {} vs {fd}", g[j]);
            }
        }
    }
}

#[test]
fn choice_hessian_matches_second_differences_and_is_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-4;
    for &k in &[2, 3, 5, 8] {
        for _ in 0..200 {
            let b = random_bundle(&mut rng, k, 3.0);
            let w = random_w(&mut rng, k);
            let ks = rng.random_range(0..k);
            let an = hessian_loss(&b, &w).unwrap();
            let nc = 2 * k - 1;
            let base = b.to_vec();
            let f = |di: usize, si: f64, dj: usize, sj: f64| {
                let mut x = base.clone();
                x[di] += si * h;
                x[dj] += sj * h;
                choice_loss(&ScoreBundle::from_vec(k, &x).unwrap(), &w, ks).unwrap()
            };
            let mut block = Matrix::zeros(nc);
            for i in 0..nc {
                for j in 0..nc {
                    let fd = (f(i, 1.0, j, 1.0) - f(i, 1.0, j, -1.0) - f(i, -1.0, j, 1.0) + f(i, -1.0, j, -1.0)) / (4.0 * h * h);
                    assert!(close(an[(i, j)], fd, 1e-5), "K={k} ({i},{j}): {} vs {fd}", an[(i, j)]);
                    block[(i, j)] = an[(i, j)];
                }
            }
            assert!(block.min_eigenvalue() >= -1e-10);
            // response block: the exposure lottery's mean of the second derivative 2 * 1[k* = k]
            let p = exposure_probs(&b, &w).unwrap();
            for s in 0..k {
                assert!(close(an[(nc + s, nc + s)], 2.0 * p[s], 1e-14));
            }
            assert_eq!(an.max_asymmetry(), 0.0);
        }
    }
}

#[test]
fn masked_uplift_rows_are_zero_without_treatment() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let b = random_bundle(&mut rng, 4, 2.0);
    let h = hessian_loss(&b, &[false; 4]).unwrap();
    for j in 3..7 {
        for i in 0..b.dim() {
            assert_eq!(h[(i, j)], 0.0);
        }
    }
}

#[test]
fn expected_hessian_two_slot_enumeration() {
    let zero = ScoreBundle::new(vec![0.0], vec![0.0; 2], vec![0.0; 2]).unwrap();
    let h = expected_hessian(&zero, 0.5, &HessianPolicy::exact(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // patterns (0,0), (1,0), (0,1), (1,1), each with weight 1/4, p = (1/2, 1/2)
    let expected = [
        [0.25, -0.125, 0.125, 0.0, 0.0],
        [-0.125, 0.125, -0.0625, 0.0, 0.0],
        [0.125, -0.0625, 0.125, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ];
    for i in 0..5 {
        for j in 0..5 {
            assert!((h[(i, j)] - expected[i][j]).abs() < 1e-15, "({i},{j}) {}", h[(i, j)]);
        }
    }
}

#[test]
fn exact_expected_hessian_is_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let policy = HessianPolicy::exact();
    for i in 0..1000 {
        let k = [2, 3, 5, 8][i % 4];
        let q = [0.2, 0.5, 0.8][i % 3];
        let b = random_bundle(&mut rng, k, 3.0);
        let h = expected_hessian(&b, q, &policy, &mut rng).unwrap();
        assert!(h.min_eigenvalue() > 0.0, "draw {i}");
    }
}

#[test]
fn monte_carlo_hessian_tracks_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let b = random_bundle(&mut rng, 3, 2.0);
        let exact = expected_hessian(&b, 0.5, &HessianPolicy::exact(), &mut rng).unwrap();
        let mut mc = expected_hessian(&b, 0.5, &HessianPolicy::monte_carlo(500), &mut rng).unwrap();
        mc.add_scaled(-1.0, &exact);
        assert!(mc.frobenius() < 5.0 / 500f64.sqrt() * exact.frobenius());
    }
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

#[test]
fn psi_is_unbiased_at_the_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let policy = HessianPolicy::exact();
    for _ in 0..100 {
        let k = 3;
        let q: f64 = 0.5;
        let b = random_bundle(&mut rng, k, 2.0);
        let mut mean = 0.0;
        for mask in 0u32..(1 << k) {
            let w: Vec<bool> = (0..k).map(|s| mask & (1 << s) != 0).collect();
            let ones = w.iter().filter(|t| **t).count() as i32;
            let weight = q.powi(ones) * (1.0 - q).powi(k as i32 - ones);
            let p = exposure_probs(&b, &w).unwrap();
            for ks in 0..k {
                let r = psi_value(&observation(&w, ks, b.z[ks]), &b, q, &policy).unwrap();
                mean += weight * p[ks] * r.psi;
            }
        }
        let mu = plugin_mu(&b);
        assert!((mean - mu).abs() < 1e-10, "{mean} vs {mu}");
        assert!((expected_psi(&b, &b, q).unwrap() - mu).abs() < 1e-10);
    }
}

#[test]
fn raw_score_shift_leaves_everything_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let policy = HessianPolicy::exact();
    for _ in 0..50 {
        let k = 4;
        let s0: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s1: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: f64 = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = s0.iter().map(|v| v + c).collect();
        let a = ScoreBundle::from_raw(&s0, &s1, &z);
        let b = ScoreBundle::from_raw(&shifted, &s1, &z);
        let w = random_w(&mut rng, k);
        let obs = observation(&w, 1, 0.7);
        assert!((plugin_mu(&a) - plugin_mu(&b)).abs() < 1e-12);
        for (x, y) in grad_mu(&a).iter().zip(grad_mu(&b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let ha = expected_hessian(&a, 0.5, &policy, &mut rng).unwrap();
        let hb = expected_hessian(&b, 0.5, &policy, &mut rng).unwrap();
        for (x, y) in ha.as_slice().iter().zip(hb.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let pa = psi_value(&obs, &a, 0.5, &policy).unwrap().psi;
        let pb = psi_value(&obs, &b, 0.5, &policy).unwrap().psi;
        assert!((pa - pb).abs() < 1e-10);
    }
}
