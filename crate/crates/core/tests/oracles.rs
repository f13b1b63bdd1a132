//! Independent reference implementations checked against the library.

mod common;

use common::{
    conv_oracle_error, linear_oracle_error, one_layer_adaptation, random,
    terminal_norm_affine_gradient, vote_accuracy_exact, vote_accuracy_monte_carlo, welford_error,
};
use dilam::model::{build_model, ModelConfig, SwapScope};
use dilam::stats::collect_clear_stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_naive_loops() {
    let (e32, e64) = conv_oracle_error();
    assert!(e32 < 1e-5, "f32 error {e32:e}");
    assert!(e64 < 1e-12, "f64 error {e64:e}");
}

#[test]
fn linear_matches_naive_loops() {
    let err = linear_oracle_error();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn welford_matches_two_pass() {
    let err = welford_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn collected_statistics_do_not_depend_on_batch_size() {
    let config = ModelConfig {
        input_size: [3, 16, 16],
        widths: vec![4, 8],
        ..Default::default()
    };
    let model = build_model::<f32>(&config, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = random::<f32>(&mut rng, &[37, 3, 16, 16]).map(|v| 0.5 + 0.5 * v);
    let a = collect_clear_stats(&model, &images, 37).unwrap();
    for batch in [1, 5, 16] {
        let b = collect_clear_stats(&model, &images, batch).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la
                .mean
                .iter()
                .zip(&lb.mean)
                .chain(la.var.iter().zip(&lb.var))
            {
                assert!(
                    (x - y).abs() <= 1e-5 * (1.0 + x.abs()),
                    "{}: {x} vs {y}",
                    la.name
                );
            }
        }
    }
}

#[test]
fn vote_enumeration_matches_monte_carlo() {
    let exact = vote_accuracy_exact(0.9, &[1.0 / 3.0; 3]);
    let binomial: f64 = (5..=8u32)
        .map(|k| {
            let c = (1..=8u64).product::<u64>()
                / ((1..=k as u64).product::<u64>() * (1..=(8 - k) as u64).product::<u64>());
            c as f64 * 0.9f64.powi(k as i32) * 0.1f64.powi(8 - k as i32)
        })
        .sum();
    // Plurality with spread-out errors wins in more windows than a strict
    // majority does.
    assert!(exact >= binomial && binomial > 0.99);
    let mc = vote_accuracy_monte_carlo(0.9, 10_000, 11);
    assert!(
        (mc - exact).abs() < 0.005,
        "monte carlo {mc} vs exact {exact}"
    );
}

#[test]
fn voting_never_hurts_above_three_quarters() {
    for wrong in [vec![1.0 / 3.0; 3], vec![1.0, 0.0, 0.0], vec![0.5, 0.5]] {
        for p in [0.76, 0.8, 0.85, 0.9, 0.95, 0.99] {
            let w = vote_accuracy_exact(p, &wrong);
            assert!(w >= p, "p {p} errors {wrong:?}: windowed {w}");
        }
    }
}

/// Gradient of the alignment loss on the last norm layer, written out by
/// hand.
#[test]
fn terminal_norm_affine_gradient_is_analytic() {
    let check = terminal_norm_affine_gradient();
    assert!(
        check.worst_relative_error < 1e-3,
        "{:e}",
        check.worst_relative_error
    );
    assert!(check.only_selected_layer);
}

#[test]
fn one_layer_adaptation_reaches_closed_form() {
    for (c, (gamma, gamma_star, beta, beta_star)) in one_layer_adaptation().into_iter().enumerate()
    {
        assert!(
            (gamma - gamma_star).abs() < 0.05,
            "gamma[{c}] {gamma} vs {gamma_star}"
        );
        assert!(
            (beta - beta_star).abs() < 0.05,
            "beta[{c}] {beta} vs {beta_star}"
        );
    }
}

/// Adapting to data drawn from the clear distribution itself barely moves
/// the affine parameters.
#[test]
fn adaptation_without_shift_stays_near_identity() {
    use dilam::adapt::{adapt_affine, AdaptConfig, AffineEntry};
    let config = ModelConfig {
        input_size: [3, 16, 16],
        widths: vec![4, 8],
        ..Default::default()
    };
    let mut model = build_model::<f32>(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let images = random::<f32>(&mut rng, &[256, 3, 16, 16]).map(|v| 0.5 + 0.3 * v);
    let stats = collect_clear_stats(&model, &images, 64).unwrap();
    let before = AffineEntry::capture(&model, "clear", SwapScope::AfterCut);
    let entry = adapt_affine(
        &mut model,
        &stats,
        &images,
        "same",
        &AdaptConfig::default(),
        1,
    )
    .unwrap();
    let drift = before
        .layers
        .iter()
        .zip(&entry.layers)
        .flat_map(|(a, b)| {
            a.gamma
                .iter()
                .zip(&b.gamma)
                .chain(a.beta.iter().zip(&b.beta))
        })
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(drift < 0.05, "max drift {drift}");
}
