mod common;

use common::suites::{distribution_suite, gumbel_stats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagvae::stochastic::{kl_categorical, sample_gaussian_with, GaussianPosterior};
use sagvae::{Tape, Tensor};

#[test]
fn monte_carlo_checks() {
    for (label, ok, detail) in distribution_suite() {
        assert!(ok, "{label}: {detail}");
    }
}

#[test]
fn spec_gumbel_frequency() {
    let (freq, _) = gumbel_stats(0.8, 0.5, 10_000, 3);
    assert!((freq - 0.8).abs() <= 0.02, "{freq}");
}

#[test]
fn bernoulli_kl_values() {
    let a = kl_categorical(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
    assert!((a - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
    assert!((a - 0.3681).abs() < 1e-4);
    let b = kl_categorical(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
    assert!((b - 0.5108).abs() < 1e-4);
    assert!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).is_err());
}

#[test]
fn vanishing_variance_pins_the_mean() {
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::full(&[1000], 0.25));
    let lv = tape.constant(Tensor::full(&[1000], -10.0));
    let post = GaussianPosterior::new(&mut tape, mu, lv).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = sagvae::stochastic::standard_normal(&mut rng, &[1000]).map(|e| e.clamp(-5.0, 5.0));
    let z = sample_gaussian_with(&mut tape, &post, eps).unwrap();
    assert!(tape.value(z).data().iter().all(|v| (v - 0.25).abs() < 0.05));
}
