//! Checks of the entropy, perplexity, distortion and Lloyd-iteration identities.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use shrinklab::diagnostics::{distortion, entropy_bound_check, mode_entropy};
use shrinklab::init::{kmeans, KMeansConfig};
use shrinklab::matrix::Matrix;
use shrinklab::nn::IdentityAutoencoder;
use shrinklab::oracle::{lloyd_max_1d, lloyd_max_1d_from};
use shrinklab::quantizer::{perplexity, Codebook};
use shrinklab::rng::stream;
use shrinklab::synth::{generate, GaussianMixtureSpec};

/// Relative slack for "non-increasing" comparisons of recomputed objectives.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// Random simplex vector with a random number of exact zeros.
pub fn random_simplex(rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let k = rng.gen_range(1..=32);
        let zero_p = rng.gen_range(0.0..0.9);
        let w: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(zero_p) { 0.0 } else { -rng.gen::<f64>().max(1e-300).ln() })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.iter().map(|v| v / total).collect();
        }
    }
}

/// Number of the `n` random simplex vectors on which `H ≤ ln M` fails.
pub fn entropy_bound_violations(n: u64) -> u64 {
    let mut rng = stream(7, 300);
    (0..n)
        .filter(|_| !entropy_bound_check(&random_simplex(&mut rng)).unwrap().holds)
        .count() as u64
}

/// Sizes S in 1..=max for which perplexity of uniform usage is not exactly S.
pub fn perplexity_uniform_failures(max: usize) -> Vec<usize> {
    (1..=max)
        .filter(|&s| {
            [1u64, 3, 1000].iter().any(|&c| perplexity(&vec![c; s]).unwrap() != s as f64)
        })
        .collect()
}

pub fn uniform10_entropy_error() -> f64 {
    (mode_entropy(&[0.1; 10]).unwrap() - 10f64.ln()).abs()
}

/// Standardized 1-D 10-mode mixture.
pub fn reference_1d(seed: u64) -> Matrix {
    let spec = GaussianMixtureSpec::with_default_means(10, 500, 1, 5.0, 1.0, seed).unwrap();
    generate(&spec).unwrap().points
}

/// Learned 1-D codebook: EMA updates from the k-means++ seeding, over shuffled batches.
fn ema_learned(points: &Matrix, s: usize, seed: u64) -> Codebook {
    let km = kmeans(
        points,
        s,
        &KMeansConfig {
            max_iters: 0,
            restarts: 1,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let mut cb = Codebook::new(km.centers, 0.9, 0.25).unwrap();
    cb.seed_ema(1.0);
    let mut rng = stream(seed, 301);
    let n = points.rows();
    for _ in 0..200 {
        let idx: Vec<usize> = (0..256).map(|_| rng.gen_range(0..n)).collect();
        let z = points.select_rows(&idx);
        let a = cb.assign(&z).unwrap();
        cb.ema_update(&z, &a).unwrap();
    }
    cb
}

pub struct DistortionCase {
    pub seed: u64,
    pub size: usize,
    pub learner: &'static str,
    pub learned: f64,
    pub oracle: f64,
}

/// Learned 1-D codebooks (k-means and EMA) against Lloyd-Max on the same samples.
pub fn distortion_vs_lloyd_max() -> Vec<DistortionCase> {
    let mut out = Vec::new();
    for seed in 0..3 {
        let points = reference_1d(seed);
        let samples: Vec<f64> = points.iter_rows().map(|r| r[0]).collect();
        for s in [2, 4, 8, 16] {
            let oracle = lloyd_max_1d(&samples, s, 10_000, 0.0).unwrap().distortion;
            let km = kmeans(&points, s, &KMeansConfig { seed, ..Default::default() }).unwrap();
            let km_cb = Codebook::new(km.centers, 0.9, 0.25).unwrap();
            for (learner, cb) in [("kmeans", km_cb), ("ema", ema_learned(&points, s, seed))] {
                out.push(DistortionCase {
                    seed,
                    size: s,
                    learner,
                    learned: distortion(&IdentityAutoencoder, &cb, &points).unwrap(),
                    oracle,
                });
            }
        }
    }
    out
}

pub fn non_increasing(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + MONOTONE_SLACK * w[0].abs())
}

/// Counts `(instances, violations)` of per-iteration monotonicity for k-means
/// (single runs, no restarts) and Lloyd-Max on random inputs.
pub fn lloyd_monotonicity(instances: u64) -> ((u64, u64), (u64, u64)) {
    let mut km = (0, 0);
    let mut lm = (0, 0);
    for inst in 0..instances {
        let mut rng = stream(inst, 302);
        let n = rng.gen_range(20..200);
        let d = rng.gen_range(1..6);
        let k = rng.gen_range(1..12);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = rng.gen_range(0..4) as f64 * 3.0;
                (0..d).map(|_| c + rng.gen_range(-1.0..1.0)).collect()
            })
            .collect();
        let pts = Matrix::from_rows(&rows);
        let res = kmeans(
            &pts,
            k,
            &KMeansConfig {
                max_iters: 100,
                tol: 0.0,
                restarts: 1,
                seed: inst,
            },
        )
        .unwrap();
        km.0 += 1;
        km.1 += u64::from(!non_increasing(&res.objective_history));

        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0) * rng.gen::<f64>()).collect();
        // arbitrary starting levels so the iterations actually move
        let start: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let q = lloyd_max_1d_from(&samples, &start, 200, 0.0).unwrap();
        lm.0 += 1;
        lm.1 += u64::from(!non_increasing(&q.history));
    }
    (km, lm)
}

/// Two-level Lloyd-Max quantizer of 10⁵ standard-normal samples.
pub fn lloyd_max_normal_levels() -> (f64, f64) {
    let mut rng = stream(0, 400);
    let samples: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let q = lloyd_max_1d(&samples, 2, 1000, 0.0).unwrap();
    (q.levels[0], q.levels[1])
}

/// The ±√(2/π) levels of the optimal two-level quantizer of N(0, 1).
pub fn normal_two_level() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}
