//! Codebook initialization from encoder embeddings.
//!
//! Embeddings are pooled from uniformly sampled batches, then k-means
//! (k-means++ seeding followed by Lloyd iterations) picks the initial tokens.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::nn::Mlp;
use crate::quantizer::Codebook;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Untrained,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    pub embeddings: Matrix,
    pub source: EmbeddingSource,
    /// Pool size over codebook size.
    pub ratio: f64,
}

/// Runs `encoder` over shuffled batches until `ceil(target_ratio · codebook_size)`
/// embeddings are pooled.
pub fn collect_embeddings(
    encoder: &Mlp,
    source: EmbeddingSource,
    points: &Matrix,
    target_ratio: f64,
    codebook_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EmbeddingPool> {
    if codebook_size == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("codebook_size and batch_size must be >= 1".into()));
    }
    if !(target_ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "embedding-to-token ratio must be >= 1, got {target_ratio}"
        )));
    }
    let wanted = (target_ratio * codebook_size as f64).ceil() as usize;
    if wanted > points.rows() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} points but ratio {target_ratio} x {codebook_size} tokens needs {wanted}",
            points.rows()
        )));
    }
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_EMBED_COLLECT));
    let mut data = Vec::with_capacity(wanted * encoder.output_dim());
    for batch in order[..wanted].chunks(batch_size) {
        let z = encoder.infer(&points.select_rows(batch))?;
        data.extend_from_slice(z.as_slice());
    }
    let embeddings = Matrix::from_vec(wanted, encoder.output_dim(), data)?;
    Ok(EmbeddingPool {
        ratio: wanted as f64 / codebook_size as f64,
        embeddings,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Objective at every assignment step, ending with the returned centers.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

pub fn count_distinct_rows(points: &Matrix) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter_rows()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding: first center uniform, the rest sampled proportionally to
/// squared distance from the nearest chosen center.
pub fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut StreamRng) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || n == 0 {
        return Err(Error::EmptyInput("k-means++ needs points and k >= 1"));
    }
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let dist = WeightedIndex::new(&d2).map_err(|_| Error::DuplicateCenters {
            requested: k,
            distinct: chosen.len(),
        })?;
        let next = dist.sample(rng);
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, points.row(next)));
        }
    }
    Ok(points.select_rows(&chosen))
}

fn assign_all(points: &Matrix, centers: &Matrix, assignments: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (a, p) in assignments.iter_mut().zip(points.iter_rows()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter_rows().enumerate() {
            let d = squared_distance(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *a = best;
        objective += best_d;
    }
    objective
}

/// Moves each empty center onto the point of the largest cluster that lies
/// farthest from that cluster's center.
fn fill_empty_clusters(points: &Matrix, centers: &mut Matrix, assignments: &mut [usize]) {
    let k = centers.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("k >= 1");
        if sizes[largest] < 2 {
            break;
        }
        let far = (0..points.rows())
            .filter(|&i| assignments[i] == largest)
            .map(|i| (i, squared_distance(points.row(i), centers.row(largest))))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        centers.row_mut(empty).copy_from_slice(points.row(far));
        assignments[far] = empty;
        sizes[largest] -= 1;
        sizes[empty] = 1;
    }
}

fn lloyd(points: &Matrix, mut centers: Matrix, config: &KMeansConfig) -> KMeansResult {
    let (n, d) = points.shape();
    let k = centers.rows();
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let objective = assign_all(points, &centers, &mut assignments);
        debug_assert!(history.last().is_none_or(|&p: &f64| objective <= p * (1.0 + 1e-12) + 1e-12));
        history.push(objective);
        fill_empty_clusters(points, &mut centers, &mut assignments);

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            movement = movement.max(squared_distance(&new, centers.row(c)).sqrt());
            centers.row_mut(c).copy_from_slice(&new);
        }
        if movement < config.tol {
            converged = true;
            break;
        }
    }
    let objective = assign_all(points, &centers, &mut assignments);
    history.push(objective);
    KMeansResult {
        centers,
        assignments,
        objective_history: history,
        iterations,
        converged,
    }
}

/// k-means over the rows of `points`.
pub fn kmeans(points: &Matrix, k: usize, config: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let distinct = count_distinct_rows(points);
    if distinct < k {
        return Err(Error::DuplicateCenters { requested: k, distinct });
    }
    let mut rng = rng::stream(config.seed, rng::STREAM_KMEANS);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.restarts.max(1) {
        let seeds = kmeans_plus_plus(points, k, &mut rng)?;
        let run = lloyd(points, seeds, config);
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Initial tokens from an embedding pool.
pub fn kmeans_init(pool: &EmbeddingPool, codebook_size: usize, config: &KMeansConfig) -> Result<Matrix> {
    Ok(kmeans(&pool.embeddings, codebook_size, config)?.centers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    UntrainedEncoder,
    PretrainedEncoder,
    RandomUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub codebook_size: usize,
    pub embedding_ratio: f64,
    pub batch_size: usize,
    pub kmeans: KMeansConfig,
    pub decay: f64,
    pub beta: f64,
    /// EMA cluster size each token starts with.
    pub initial_count: f64,
    /// Embeddings used for the bounding box of `RandomUniform`.
    pub random_sample_size: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            embedding_ratio: 10.0,
            batch_size: 256,
            kmeans: KMeansConfig::default(),
            decay: 0.9,
            beta: 0.25,
            initial_count: 1.0,
            random_sample_size: 256,
        }
    }
}

pub fn init_codebook(
    mode: InitMode,
    encoder: &Mlp,
    source: EmbeddingSource,
    points: &Matrix,
    config: &InitConfig,
    seed: u64,
) -> Result<Codebook> {
    let tokens = match (mode, source) {
        (InitMode::UntrainedEncoder, EmbeddingSource::Pretrained)
        | (InitMode::PretrainedEncoder, EmbeddingSource::Untrained) => {
            return Err(Error::InvalidArgument(format!(
                "init mode {mode:?} does not match a {source:?} encoder"
            )));
        }
        (InitMode::UntrainedEncoder | InitMode::PretrainedEncoder, _) => {
            let pool = collect_embeddings(
                encoder,
                source,
                points,
                config.embedding_ratio,
                config.codebook_size,
                config.batch_size,
                seed,
            )?;
            let km = KMeansConfig {
                seed,
                ..config.kmeans
            };
            kmeans_init(&pool, config.codebook_size, &km)?
        }
        (InitMode::RandomUniform, _) => {
            let ratio = (config.random_sample_size.min(points.rows()) as f64
                / config.codebook_size as f64)
                .max(1.0);
            let pool = collect_embeddings(
                encoder,
                source,
                points,
                ratio,
                config.codebook_size,
                config.batch_size,
                seed,
            )?;
            let e = &pool.embeddings;
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..e.cols())
                .map(|j| {
                    e.iter_rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[j]), hi.max(r[j]))
                    })
                })
                .unzip();
            let mut rng = rng::stream(seed, rng::STREAM_RANDOM_INIT);
            let mut t = Matrix::zeros(config.codebook_size, e.cols());
            for k in 0..config.codebook_size {
                for (j, v) in t.row_mut(k).iter_mut().enumerate() {
                    *v = if hi[j] > lo[j] { rng.gen_range(lo[j]..hi[j]) } else { lo[j] };
                }
            }
            t
        }
    };
    let mut cb = Codebook::new(tokens, config.decay, config.beta)?;
    cb.seed_ema(config.initial_count);
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::mean_pairwise_distance;

    fn random_points(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, 77);
        let data = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    fn objective(points: &Matrix, centers: &Matrix) -> f64 {
        points
            .iter_rows()
            .map(|p| {
                centers
                    .iter_rows()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    fn assert_monotone(history: &[f64]) {
        for w in history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "objective rose: {history:?}");
        }
    }

    #[test]
    fn collect_sizes_and_determinism() {
        let pts = random_points(2000, 2, 1);
        let enc = Mlp::identity(2, 4).unwrap();
        let pool = collect_embeddings(&enc, EmbeddingSource::Untrained, &pts, 10.0, 128, 256, 3).unwrap();
        assert_eq!(pool.embeddings.rows(), 1280);
        assert_eq!(pool.ratio, 10.0);
        let again = collect_embeddings(&enc, EmbeddingSource::Untrained, &pts, 10.0, 128, 256, 3).unwrap();
        assert_eq!(pool, again);

        let small = random_points(64, 2, 2);
        let pool = collect_embeddings(&enc, EmbeddingSource::Untrained, &small, 1.0, 64, 10, 0).unwrap();
        assert_eq!(pool.embeddings.rows(), 64);
        // one pass over exactly the dataset, in some order
        assert_eq!(count_distinct_rows(&pool.embeddings), 64);
        assert!(collect_embeddings(&enc, EmbeddingSource::Untrained, &small, 2.0, 64, 10, 0).is_err());
    }

    #[test]
    fn each_point_its_own_cluster() {
        let pts = random_points(7, 3, 4);
        let res = kmeans(&pts, 7, &KMeansConfig::default()).unwrap();
        assert_eq!(res.objective(), 0.0);
        let mut got: Vec<Vec<u64>> = res.centers.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = pts.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn two_separated_blobs() {
        let mut rows = Vec::new();
        let mut r = rng::stream(5, 0);
        for _ in 0..200 {
            rows.push(vec![-10.0 + r.gen_range(-1.0..1.0)]);
            rows.push(vec![10.0 + r.gen_range(-1.0..1.0)]);
        }
        let pts = Matrix::from_rows(&rows);
        let left: f64 = rows.iter().filter(|v| v[0] < 0.0).map(|v| v[0]).sum::<f64>() / 200.0;
        let right: f64 = rows.iter().filter(|v| v[0] > 0.0).map(|v| v[0]).sum::<f64>() / 200.0;
        let cfg = KMeansConfig::default();
        let res = kmeans(&pts, 2, &cfg).unwrap();
        let mut c = [res.centers[(0, 0)], res.centers[(1, 0)]];
        c.sort_by(f64::total_cmp);
        assert!((c[0] - left).abs() < cfg.tol && (c[1] - right).abs() < cfg.tol);
    }

    /// Plain Lloyd from uniformly chosen starting points, no seeding heuristics.
    fn naive_lloyd_best(points: &Matrix, k: usize, restarts: usize, seed: u64) -> f64 {
        let mut r = rng::stream(seed, 999);
        let mut best = f64::INFINITY;
        for _ in 0..restarts {
            let idx = rand::seq::index::sample(&mut r, points.rows(), k).into_vec();
            let mut centers: Vec<Vec<f64>> = idx.iter().map(|&i| points.row(i).to_vec()).collect();
            for _ in 0..100 {
                let mut sums = vec![vec![0.0; points.cols()]; k];
                let mut counts = vec![0usize; k];
                for p in points.iter_rows() {
                    let c = (0..k)
                        .min_by(|&a, &b| squared_distance(p, &centers[a]).total_cmp(&squared_distance(p, &centers[b])))
                        .unwrap();
                    counts[c] += 1;
                    for (s, v) in sums[c].iter_mut().zip(p) {
                        *s += v;
                    }
                }
                for c in 0..k {
                    if counts[c] > 0 {
                        centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                    }
                }
            }
            best = best.min(objective(points, &Matrix::from_rows(&centers)));
        }
        best
    }

    /// Global optimum by enumerating every assignment of 12 points to 3 clusters.
    fn exhaustive_3_means(points: &Matrix) -> f64 {
        let n = points.rows();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut labels = vec![0usize; n];
            for l in labels.iter_mut() {
                *l = c % 3;
                c /= 3;
            }
            let mut obj = 0.0;
            let mut ok = true;
            for k in 0..3 {
                let members: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == k).map(|i| points.row(i)).collect();
                if members.is_empty() {
                    ok = false;
                    break;
                }
                let mean: Vec<f64> = (0..points.cols())
                    .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                obj += members.iter().map(|m| squared_distance(m, &mean)).sum::<f64>();
            }
            if ok {
                best = best.min(obj);
            }
        }
        best
    }

    #[test]
    fn small_instance_quality_and_monotone() {
        for seed in 0..6 {
            let pts = random_points(12, 2, 100 + seed);
            // same restart budget as the naive oracle
            let cfg = KMeansConfig {
                seed,
                restarts: 50,
                ..KMeansConfig::default()
            };
            let res = kmeans(&pts, 3, &cfg).unwrap();
            assert_monotone(&res.objective_history);
            assert!((res.objective() - objective(&pts, &res.centers)).abs() < 1e-12);
            let oracle = naive_lloyd_best(&pts, 3, 50, seed);
            assert!(res.objective() <= oracle + cfg.tol, "seed {seed}: {} vs {oracle}", res.objective());
            assert!(res.objective() <= exhaustive_3_means(&pts) + cfg.tol);
        }
    }

    #[test]
    fn monotone_on_random_instances() {
        for seed in 0..20 {
            let pts = random_points(300, 3, seed);
            let res = kmeans(&pts, 16, &KMeansConfig { seed, max_iters: 50, ..Default::default() }).unwrap();
            assert_monotone(&res.objective_history);
        }
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        assert!(matches!(
            kmeans(&pts, 3, &KMeansConfig::default()),
            Err(Error::DuplicateCenters { requested: 3, distinct: 2 })
        ));
        let seeds = kmeans_plus_plus(&pts, 2, &mut rng::stream(0, 0)).unwrap();
        assert_ne!(seeds.row(0), seeds.row(1));
    }

    #[test]
    fn kmeans_pp_picks_distinct_points() {
        let mut rows = vec![vec![0.0, 0.0]; 50];
        rows.extend((0..5).map(|i| vec![i as f64 + 1.0, 0.0]));
        let pts = Matrix::from_rows(&rows);
        for seed in 0..20 {
            let c = kmeans_plus_plus(&pts, 6, &mut rng::stream(seed, 0)).unwrap();
            assert_eq!(count_distinct_rows(&c), 6);
        }
    }

    #[test]
    fn init_codebook_modes() {
        let pts = random_points(1500, 2, 8);
        let mut r = rng::stream(1, rng::STREAM_PARAM_INIT);
        let enc = Mlp::three_layer([2, 16, 16, 2], &mut r);
        let cfg = InitConfig::default();
        let a = init_codebook(InitMode::UntrainedEncoder, &enc, EmbeddingSource::Untrained, &pts, &cfg, 4).unwrap();
        let b = init_codebook(InitMode::UntrainedEncoder, &enc, EmbeddingSource::Untrained, &pts, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size(), 128);
        assert_eq!(a.ema_cluster_size, vec![1.0; 128]);
        assert_eq!(a.ema_embed_sum, a.tokens);
        assert_eq!(
            mean_pairwise_distance(&a.tokens).unwrap(),
            mean_pairwise_distance(&b.tokens).unwrap()
        );
        assert!(init_codebook(InitMode::PretrainedEncoder, &enc, EmbeddingSource::Untrained, &pts, &cfg, 4).is_err());

        let u = init_codebook(InitMode::RandomUniform, &enc, EmbeddingSource::Untrained, &pts, &cfg, 4).unwrap();
        let z = enc.infer(&pts).unwrap();
        for j in 0..2 {
            let lo = z.iter_rows().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = z.iter_rows().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(u.tokens.iter_rows().all(|t| t[j] >= lo && t[j] <= hi));
        }
    }
}
