mod common;

use common::theory::*;
use shrinklab::diagnostics::distortion;
use shrinklab::matrix::Matrix;
use shrinklab::nn::IdentityAutoencoder;
use shrinklab::oracle::monte_carlo_distortion;
use shrinklab::quantizer::Codebook;
use shrinklab::synth::{sample_raw, GaussianMixtureSpec};

#[test]
fn learned_1d_codebooks_never_beat_lloyd_max() {
    for c in distortion_vs_lloyd_max() {
        assert!(
            c.learned >= c.oracle - 1e-9,
            "seed {} S={} {}: learned {} < oracle {}",
            c.seed,
            c.size,
            c.learner,
            c.learned,
            c.oracle
        );
    }
}

#[test]
fn lloyd_max_gaussian_two_levels() {
    let (lo, hi) = lloyd_max_normal_levels();
    let c = normal_two_level();
    assert!((lo + c).abs() < 0.02 && (hi - c).abs() < 0.02, "{lo} {hi}");
}

#[test]
fn lloyd_iterations_are_monotone() {
    let ((km_n, km_bad), (lm_n, lm_bad)) = lloyd_monotonicity(300);
    assert_eq!(km_bad, 0, "k-means: {km_bad} of {km_n} histories increase");
    assert_eq!(lm_bad, 0, "lloyd-max: {lm_bad} of {lm_n} histories increase");
}

#[test]
fn monte_carlo_agrees_with_dataset_distortion() {
    let spec = GaussianMixtureSpec::with_default_means(10, 100_000, 2, 5.0, 1.0, 3).unwrap();
    let (raw, _) = sample_raw(&spec).unwrap();
    let mut tokens: Vec<Vec<f64>> = spec.means.clone();
    for (k, t) in tokens.iter_mut().enumerate() {
        t[0] += 0.3 * (k as f64 - 4.5) / 4.5;
    }
    tokens.push(vec![0.0, 0.0]);
    let tokens = Matrix::from_rows(&tokens);
    let on_data = distortion(&IdentityAutoencoder, &Codebook::new(tokens.clone(), 0.9, 0.25).unwrap(), &raw).unwrap();
    let mc = monte_carlo_distortion(&spec, &tokens, 1_000_000, 11).unwrap();
    assert!((mc - on_data).abs() / on_data < 0.01, "mc {mc} vs dataset {on_data}");
}
