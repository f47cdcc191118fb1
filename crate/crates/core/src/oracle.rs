//! Small-scale reference implementations used to cross-check the main code
//! paths. Nothing here calls into the quantizer, k-means or diagnostics code.
//!
//! Intended limits: S ≤ 256, d ≤ 8 for the vector routines and at most 10⁶ samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::GaussianMixtureSpec;

/// Plain linear scan; the first of several equidistant tokens wins.
pub fn exhaustive_nearest(z: &[f64], tokens: &Matrix) -> Result<usize> {
    if tokens.rows() == 0 {
        return Err(Error::EmptyCodebook);
    }
    if z.len() != tokens.cols() {
        return Err(Error::DimensionMismatch {
            context: "exhaustive_nearest",
            expected: tokens.cols(),
            actual: z.len(),
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..tokens.rows() {
        let mut d = 0.0;
        for j in 0..z.len() {
            let diff = z[j] - tokens[(k, j)];
            d += diff * diff;
        }
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydMax1D {
    /// Ascending quantizer levels.
    pub levels: Vec<f64>,
    /// Midpoints between adjacent levels.
    pub boundaries: Vec<f64>,
    pub distortion: f64,
    /// Distortion after each iteration, starting with the initial levels.
    pub history: Vec<f64>,
}

fn cell_stats(sorted: &[f64], levels: &[f64]) -> (Vec<f64>, Vec<usize>, f64) {
    let s = levels.len();
    let mut sums = vec![0.0; s];
    let mut counts = vec![0usize; s];
    let mut err = 0.0;
    let mut k = 0;
    for &x in sorted {
        // samples are ascending, so the cell index only moves up; ties stay low
        while k + 1 < s && (x - levels[k + 1]).abs() < (x - levels[k]).abs() {
            k += 1;
        }
        sums[k] += x;
        counts[k] += 1;
        err += (x - levels[k]) * (x - levels[k]);
    }
    (sums, counts, err / sorted.len() as f64)
}

/// Levels of the best partition of `sorted` into `s` contiguous runs, by dynamic
/// programming over prefix sums with the divide-and-conquer split search.
fn optimal_partition_levels(sorted: &[f64], s: usize) -> Vec<f64> {
    let n = sorted.len();
    let shift = sorted.iter().sum::<f64>() / n as f64;
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        let c = x - shift;
        p1[i + 1] = p1[i] + c;
        p2[i + 1] = p2[i] + c * c;
    }
    let cost = |i: usize, j: usize| {
        let len = (j - i) as f64;
        let sum = p1[j] - p1[i];
        (p2[j] - p2[i] - sum * sum / len).max(0.0)
    };

    // prev[j]: best cost of the first j samples in k runs; arg[k][j]: start of the last run
    let mut prev: Vec<f64> = (0..=n).map(|j| if j == 0 { 0.0 } else { cost(0, j) }).collect();
    let mut arg = vec![vec![0usize; n + 1]];
    for k in 2..=s {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut split = vec![0usize; n + 1];
        // (j range, split range) work items
        let mut stack = vec![(k, n, k - 1, n - 1)];
        while let Some((lo, hi, opt_lo, opt_hi)) = stack.pop() {
            if lo > hi {
                continue;
            }
            let mid = (lo + hi) / 2;
            let mut best = (f64::INFINITY, opt_lo);
            for i in opt_lo..=opt_hi.min(mid - 1) {
                let v = prev[i] + cost(i, mid);
                if v < best.0 {
                    best = (v, i);
                }
            }
            cur[mid] = best.0;
            split[mid] = best.1;
            if mid > lo {
                stack.push((lo, mid - 1, opt_lo, best.1));
            }
            stack.push((mid + 1, hi, best.1, opt_hi));
        }
        arg.push(split);
        prev = cur;
    }

    let mut levels = vec![0.0; s];
    let mut end = n;
    for k in (0..s).rev() {
        let start = if k == 0 { 0 } else { arg[k][end] };
        levels[k] = shift + (p1[end] - p1[start]) / (end - start) as f64;
        end = start;
    }
    levels
}

fn sorted_checked(samples: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::InvalidArgument("need at least one level".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lloyd-max samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < s {
        return Err(Error::DuplicateCenters {
            requested: s,
            distinct: distinct.len(),
        });
    }
    Ok(sorted)
}

/// Empirical Lloyd-Max quantizer with `s` levels. Iterations start from the
/// optimal contiguous partition of the sorted samples, so the result is the
/// global minimum of the empirical distortion.
pub fn lloyd_max_1d(samples: &[f64], s: usize, iters: usize, tol: f64) -> Result<LloydMax1D> {
    let sorted = sorted_checked(samples, s)?;
    let start = optimal_partition_levels(&sorted, s);
    iterate(&sorted, start, iters, tol)
}

/// Lloyd-Max iterations from caller-chosen starting levels.
pub fn lloyd_max_1d_from(samples: &[f64], start: &[f64], iters: usize, tol: f64) -> Result<LloydMax1D> {
    let sorted = sorted_checked(samples, start.len())?;
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lloyd-max start".into()));
    }
    let mut levels = start.to_vec();
    levels.sort_by(f64::total_cmp);
    iterate(&sorted, levels, iters, tol)
}

fn iterate(sorted: &[f64], mut levels: Vec<f64>, iters: usize, tol: f64) -> Result<LloydMax1D> {
    let s = levels.len();
    let (_, _, mut current) = cell_stats(sorted, &levels);
    let mut history = vec![current];
    for _ in 0..iters {
        let (sums, counts, _) = cell_stats(sorted, &levels);
        for k in 0..s {
            if counts[k] > 0 {
                levels[k] = sums[k] / counts[k] as f64;
            }
        }
        levels.sort_by(f64::total_cmp);
        let (_, _, next) = cell_stats(sorted, &levels);
        history.push(next);
        let done = current - next <= tol * current.max(f64::MIN_POSITIVE);
        current = next;
        if done {
            break;
        }
    }
    Ok(LloydMax1D {
        boundaries: levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        levels,
        distortion: current,
        history,
    })
}

/// Mean squared quantization error of fresh mixture samples, drawn in the raw
/// (unstandardized) frame of `spec` and snapped to `tokens`.
pub fn monte_carlo_distortion(spec: &GaussianMixtureSpec, tokens: &Matrix, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if spec.means.is_empty() {
        return Err(Error::InvalidSpec("no components".into()));
    }
    if tokens.cols() != spec.dim {
        return Err(Error::DimensionMismatch {
            context: "monte_carlo_distortion",
            expected: spec.dim,
            actual: tokens.cols(),
        });
    }
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; spec.dim];
    let mut total = 0.0;
    for i in 0..n_samples {
        let mean = &spec.means[i % spec.means.len()];
        for (xj, mj) in x.iter_mut().zip(mean) {
            *xj = mj + noise.sample(&mut rng);
        }
        let k = exhaustive_nearest(&x, tokens)?;
        total += (0..spec.dim).map(|j| (x[j] - tokens[(k, j)]).powi(2)).sum::<f64>();
    }
    Ok(total / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_trivial_cases() {
        let t = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(exhaustive_nearest(&[9.0, 9.0], &t).unwrap(), 0);
        let t = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [3.0, 0.0]]);
        assert_eq!(exhaustive_nearest(&[3.0, 0.0], &t).unwrap(), 3);
        assert_eq!(exhaustive_nearest(&[1.0, 1.0], &t).unwrap(), 1);
        assert!(exhaustive_nearest(&[1.0], &t).is_err());
        assert!(exhaustive_nearest(&[], &Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn lloyd_max_two_point_support() {
        let samples: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let q = lloyd_max_1d(&samples, 2, 50, 0.0).unwrap();
        assert_eq!(q.levels, vec![0.0, 1.0]);
        assert_eq!(q.boundaries, vec![0.5]);
        assert_eq!(q.distortion, 0.0);
        assert!(lloyd_max_1d(&samples, 3, 50, 0.0).is_err());
    }

    #[test]
    fn lloyd_max_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let q = lloyd_max_1d(&samples, 2, 200, 1e-12).unwrap();
        let c = 2.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((q.levels[0] + c).abs() < 0.02 && (q.levels[1] - c).abs() < 0.02, "{:?}", q.levels);
        assert!(q.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    fn brute_force_partition(sorted: &[f64], s: usize) -> f64 {
        // every placement of s-1 cut points
        fn rec(sorted: &[f64], s: usize, from: usize) -> f64 {
            let cell = |a: usize, b: usize| {
                let m = sorted[a..b].iter().sum::<f64>() / (b - a) as f64;
                sorted[a..b].iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            };
            if s == 1 {
                return cell(from, sorted.len());
            }
            (from + 1..=sorted.len() - s + 1)
                .map(|cut| cell(from, cut) + rec(sorted, s - 1, cut))
                .fold(f64::INFINITY, f64::min)
        }
        rec(sorted, s, 0) / sorted.len() as f64
    }

    #[test]
    fn optimal_start_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 2.0).unwrap();
        for n in [5usize, 9, 14] {
            for s in 1..=4.min(n) {
                let mut x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                x.sort_by(f64::total_cmp);
                let q = lloyd_max_1d(&x, s, 0, 0.0).unwrap();
                let best = brute_force_partition(&x, s);
                assert!((q.distortion - best).abs() < 1e-12, "n={n} s={s}: {} vs {best}", q.distortion);
            }
        }
    }

    #[test]
    fn iterations_from_a_poor_start_never_increase() {
        let samples: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let q = lloyd_max_1d_from(&samples, &[0.0, 0.1, 0.2, 0.3], 100, 0.0).unwrap();
        assert!(q.history.len() > 2);
        assert!(q.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(q.distortion >= lloyd_max_1d(&samples, 4, 100, 0.0).unwrap().distortion - 1e-12);
    }

    #[test]
    fn monte_carlo_single_component() {
        let spec = GaussianMixtureSpec {
            num_components: 1,
            points_per_component: 1,
            dim: 3,
            means: vec![vec![1.0, -2.0, 0.5]],
            std: 0.7,
            seed: 0,
        };
        let t = Matrix::from_rows(&[[0.0, 0.0, 0.0]]);
        let n = 200_000;
        let got = monte_carlo_distortion(&spec, &t, n, 4).unwrap();
        let expect = 1.0 + 4.0 + 0.25 + 3.0 * 0.49;
        // per-sample error variance: 2σ⁴d + 4σ²‖t−μ‖²
        let se = ((2.0 * 0.7f64.powi(4) * 3.0 + 4.0 * 0.49 * 5.25) / n as f64).sqrt();
        assert!((got - expect).abs() < 3.0 * se, "{got} vs {expect} (se {se})");
        assert!(monte_carlo_distortion(&spec, &t, 0, 4).is_err());
        assert!(monte_carlo_distortion(&spec, &Matrix::zeros(1, 2), 10, 4).is_err());
    }

    #[test]
    fn monte_carlo_means_as_tokens_vanishes_with_std() {
        let mut spec = GaussianMixtureSpec {
            num_components: 3,
            points_per_component: 1,
            dim: 2,
            means: vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]],
            std: 1e-4,
            seed: 0,
        };
        let t = Matrix::from_rows(&spec.means);
        let d = monte_carlo_distortion(&spec, &t, 3000, 1).unwrap();
        assert!(d < 1e-7);
        spec.std = 1e-2;
        assert!(monte_carlo_distortion(&spec, &t, 3000, 1).unwrap() > d);
    }
}
