use gte_core::choice::ScoreBundle;
use gte_core::debiased::{orthogonality_check, sensitivity_probe};
use gte_core::rng::{self, Stream};
use gte_core::simulator::{draw_true_query, ScoreSpec};

fn truth(k: usize) -> impl FnMut(&mut rng::StreamRng) -> ScoreBundle {
    move |r| {
        let q = draw_true_query(ScoreSpec::Table1, k, r);
        ScoreBundle::from_raw(&q.s0, &q.s1, &q.z)
    }
}

#[test]
fn gradient_of_psi_has_mean_zero_at_the_truth() {
    let mut r = rng::stream(3, Stream::Check);
    let report = orthogonality_check(truth(2), 0.5, 20_000, 0.1f64.sqrt(), &mut r).unwrap();
    assert!(report.max_z < 3.5, "{report:?}");
}

#[test]
fn debiased_value_reacts_quadratically_to_nuisance_error() {
    let mut r = rng::stream(4, Stream::Check);
    let mut draw = truth(3);
    let queries: Vec<ScoreBundle> = (0..2000).map(|_| draw(&mut r)).collect();
    // every nuisance off by the same relative error. Uniform shifts are a poor
    // probe: they cancel inside the softmax and in sum_k (p1 - p0) z, which
    // leaves the plug-in with almost no first-order response.
    let direction = queries.clone();
    let probe = sensitivity_probe(&queries, &direction, 0.5, &[0.05, 0.1]).unwrap();
    let db = probe.debiased_shift[1].abs() / probe.debiased_shift[0].abs();
    let pl = probe.plugin_shift[1].abs() / probe.plugin_shift[0].abs();
    assert!(db >= 3.0, "{probe:?}");
    assert!((pl - 2.0).abs() <= 0.3, "{probe:?}");
}
