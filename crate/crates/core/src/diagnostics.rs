//! Shrinkage diagnostics computed from immutable snapshots: token-to-mode masses,
//! mode entropy and its support bound, distortion, a Gaussian Fréchet distance,
//! reconstruction coverage and encoder-output histograms.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::DiagnosticsSection;
use crate::error::{Error, Result};
use crate::matrix::{nearest_row, squared_distance, Matrix};
use crate::nn::{Autoencoder, IdentityAutoencoder, MlpParams};
use crate::quantizer::{mean_pairwise_distance, perplexity, Codebook};
use crate::rng;
use crate::synth::assign_to_component;
use crate::textfmt::{fmt_g9, round_g9};

pub const SCHEMA_VERSION: u32 = 1;
const SIMPLEX_TOL: f64 = 1e-9;
const BOUND_SLACK: f64 = 1e-12;
const PEAK_PROMINENCE: f64 = 0.02;

const SCALAR_FIELDS: [&str; 10] = [
    "perplexity",
    "mean_pairwise_distance",
    "mode_entropy",
    "active_modes",
    "entropy_bound",
    "distortion",
    "frechet_distance",
    "mode_coverage",
    "pairwise_recon_distance",
    "embedding_peak_count",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMasses {
    /// Fraction of tokens per mixture component.
    pub masses: Vec<f64>,
    /// Components holding at least one token.
    pub active_modes: usize,
}

fn masses_from_weights(weights: &[f64]) -> Result<ModeMasses> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyInput("token weights"));
    }
    Ok(ModeMasses {
        masses: weights.iter().map(|w| w / total).collect(),
        active_modes: weights.iter().filter(|w| **w > 0.0).count(),
    })
}

fn decode_and_assign(tokens: &Matrix, means: &Matrix, decoder: &impl Autoencoder) -> Result<Vec<usize>> {
    let decoded = decoder.decode(tokens)?;
    assign_to_component(&decoded, means)
}

/// Decodes every token and assigns it to its nearest component mean.
/// With [`IdentityAutoencoder`] the tokens are assigned directly.
pub fn mode_masses(tokens: &Matrix, means: &Matrix, decoder: &impl Autoencoder) -> Result<ModeMasses> {
    if tokens.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let mut counts = vec![0.0; means.rows()];
    for k in decode_and_assign(tokens, means, decoder)? {
        counts[k] += 1.0;
    }
    masses_from_weights(&counts)
}

/// Like [`mode_masses`] but each token weighs by its usage count.
pub fn usage_weighted_masses(
    tokens: &Matrix,
    usage: &[u64],
    means: &Matrix,
    decoder: &impl Autoencoder,
) -> Result<ModeMasses> {
    if usage.len() != tokens.rows() {
        return Err(Error::DimensionMismatch {
            context: "usage counts",
            expected: tokens.rows(),
            actual: usage.len(),
        });
    }
    let mut weights = vec![0.0; means.rows()];
    for (k, u) in decode_and_assign(tokens, means, decoder)?.into_iter().zip(usage) {
        weights[k] += *u as f64;
    }
    masses_from_weights(&weights)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidSimplex("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidSimplex(format!("entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidSimplex(format!("sums to {sum}")));
    }
    Ok(())
}

/// Entropy in nats, `0 ln 0 = 0`.
pub fn mode_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBound {
    pub entropy: f64,
    pub support: usize,
    pub bound: f64,
    pub holds: bool,
}

pub fn entropy_bound_check(p: &[f64]) -> Result<EntropyBound> {
    let entropy = mode_entropy(p)?;
    let support = p.iter().filter(|v| **v > 0.0).count();
    let bound = (support as f64).ln();
    Ok(EntropyBound {
        entropy,
        support,
        bound,
        holds: entropy <= bound + BOUND_SLACK,
    })
}

/// Mean squared error of the full encode, quantize, decode path over `points`.
pub fn distortion(model: &impl Autoencoder, codebook: &Codebook, points: &Matrix) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("distortion dataset"));
    }
    let recon = quantized_reconstruction(model, &codebook.tokens, points)?;
    mean_squared_error(points, &recon)
}

fn mean_squared_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            context: "distortion",
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    let total: f64 = a.iter_rows().zip(b.iter_rows()).map(|(x, y)| squared_distance(x, y)).sum();
    Ok(total / a.rows() as f64)
}

fn quantized_reconstruction(model: &impl Autoencoder, tokens: &Matrix, points: &Matrix) -> Result<Matrix> {
    let z = model.encode(points)?;
    if z.cols() != tokens.cols() {
        return Err(Error::DimensionMismatch {
            context: "encoder output vs codebook",
            expected: tokens.cols(),
            actual: z.cols(),
        });
    }
    let idx: Vec<usize> = z.iter_rows().map(|r| nearest_row(r, tokens)).collect();
    model.decode(&tokens.select_rows(&idx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub distance: f64,
    /// A covariance was singular or the product had negative eigenvalues beyond rounding.
    pub degenerate: bool,
}

fn mean_and_covariance(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean = x.column_means();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.iter_rows() {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Eigenvalue floor relative to the matrix scale below which it counts as singular.
const DEGENERACY_TOL: f64 = 1e-10;

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let degenerate = eig.eigenvalues.iter().any(|v| *v < DEGENERACY_TOL * scale);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (sqrt, degenerate)
}

/// Fréchet distance between Gaussians fitted to `a` and `b` (sample covariance).
pub fn frechet_gaussian_distance(a: &Matrix, b: &Matrix) -> Result<FrechetDistance> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "frechet distance",
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    let d = a.cols();
    if d == 0 {
        return Err(Error::EmptyInput("frechet distance dimensions"));
    }
    for m in [a, b] {
        if m.rows() < d + 1 {
            return Err(Error::InvalidArgument(format!(
                "frechet distance needs at least {} points, got {}",
                d + 1,
                m.rows()
            )));
        }
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let (sqrt_a, deg_a) = psd_sqrt(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let deg_prod = eig.eigenvalues.iter().any(|v| *v < -DEGENERACY_TOL * scale);
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let deg_b = SymmetricEigen::new(cov_b.clone())
        .eigenvalues
        .iter()
        .any(|v| *v < DEGENERACY_TOL * cov_b.trace().abs().max(f64::MIN_POSITIVE));
    let mean_term = squared_distance(&mu_a, &mu_b);
    let distance = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    Ok(FrechetDistance {
        // rounding can push a true zero slightly negative
        distance: distance.max(0.0),
        degenerate: deg_a || deg_b || deg_prod,
    })
}

/// Components receiving at least `threshold` of the reconstructions.
pub fn mode_coverage(reconstructions: &Matrix, means: &Matrix, threshold: f64) -> Result<usize> {
    if reconstructions.is_empty() {
        return Err(Error::EmptyInput("reconstructions"));
    }
    let mut counts = vec![0usize; means.rows()];
    for k in assign_to_component(reconstructions, means)? {
        counts[k] += 1;
    }
    let n = reconstructions.rows() as f64;
    Ok(counts.iter().filter(|c| **c > 0 && **c as f64 / n >= threshold).count())
}

/// Mean Euclidean distance over all pairs, or over all pairs of a seeded
/// subsample of `max_exact` points when the set is larger.
pub fn pairwise_recon_distance(reconstructions: &Matrix, max_exact: usize, seed: u64) -> Result<f64> {
    let n = reconstructions.rows();
    if n == 0 {
        return Err(Error::EmptyInput("reconstructions"));
    }
    if n == 1 {
        return Ok(0.0);
    }
    if n <= max_exact.max(2) {
        return mean_pairwise_distance(reconstructions);
    }
    let mut rng = rng::stream(seed, rng::STREAM_EVAL_SUBSAMPLE);
    let mut idx = sample(&mut rng, n, max_exact.max(2)).into_vec();
    idx.sort_unstable();
    mean_pairwise_distance(&reconstructions.select_rows(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub peaks: usize,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 10 {
            return Err(Error::InvalidArgument(format!("histogram needs at least 10 bins, got {bins}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("histogram input".into()));
        }
        let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            (lo, hi) = (0.0, 1.0);
        } else if hi - lo <= 1e-12 * lo.abs().max(1.0) {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let peaks = count_peaks(&counts, PEAK_PROMINENCE);
        Ok(Self { lo, hi, counts, peaks })
    }
}

/// Local maxima (plateaus count once) whose topographic prominence is at
/// least `rel_prominence` times the tallest bin. Bins beyond either edge count as empty.
pub fn count_peaks(counts: &[u64], rel_prominence: f64) -> usize {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return 0;
    }
    let min_prom = (rel_prominence * max as f64).max(f64::MIN_POSITIVE);
    let mut c = Vec::with_capacity(counts.len() + 2);
    c.push(0.0);
    c.extend(counts.iter().map(|v| *v as f64));
    c.push(0.0);
    let n = c.len();
    let mut peaks = 0;
    let mut i = 1;
    while i < n - 1 {
        let h = c[i];
        let mut j = i;
        while j + 2 < n && c[j + 1] == h {
            j += 1;
        }
        if c[i - 1] < h && c[j + 1] < h {
            // an equal summit to the left counts as higher, so twin peaks are not both counted
            let left = c[..i].iter().rev().take_while(|v| **v < h).fold(h, |m, v| m.min(*v));
            let right = c[j + 1..].iter().take_while(|v| **v <= h).fold(h, |m, v| m.min(*v));
            if h - left.max(right) >= min_prom {
                peaks += 1;
            }
        }
        i = j + 1;
    }
    peaks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHistogram {
    pub dims: Vec<Histogram>,
    /// Largest per-dimension peak count.
    pub peak_count: usize,
}

pub fn histogram_of(embeddings: &Matrix, bins: usize) -> Result<EmbeddingHistogram> {
    let mut dims = Vec::with_capacity(embeddings.cols());
    for j in 0..embeddings.cols() {
        let col: Vec<f64> = embeddings.iter_rows().map(|r| r[j]).collect();
        dims.push(Histogram::build(&col, bins)?);
    }
    let peak_count = dims.iter().map(|h| h.peaks).max().unwrap_or(0);
    Ok(EmbeddingHistogram { dims, peak_count })
}

/// Per-latent-dimension histograms of the encoder output over `points`.
pub fn embedding_histogram(encoder: &impl Autoencoder, points: &Matrix, bins: usize) -> Result<EmbeddingHistogram> {
    histogram_of(&encoder.encode(points)?, bins)
}

/// Every diagnostic that the available inputs allow; the rest stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub codebook_size: usize,
    pub token_dim: usize,
    pub perplexity: Option<f64>,
    pub mean_pairwise_distance: Option<f64>,
    pub mode_entropy: Option<f64>,
    pub active_modes: Option<usize>,
    pub entropy_bound: Option<f64>,
    pub entropy_bound_holds: Option<bool>,
    pub mode_masses: Option<Vec<f64>>,
    pub usage_weighted_masses: Option<Vec<f64>>,
    pub distortion: Option<f64>,
    pub frechet_distance: Option<f64>,
    pub frechet_degenerate: Option<bool>,
    pub mode_coverage: Option<usize>,
    pub pairwise_recon_distance: Option<f64>,
    pub embedding_peak_count: Option<usize>,
}

/// Inputs for [`diagnose`]. Without a model the tokens are taken to live in
/// data space (identity encoder and decoder).
#[derive(Debug, Clone, Copy)]
pub struct DiagnosisInput<'a> {
    pub tokens: &'a Matrix,
    pub usage: Option<&'a [u64]>,
    pub model: Option<&'a MlpParams>,
    /// Component means in the same frame as `data`.
    pub means: Option<&'a Matrix>,
    pub data: Option<&'a Matrix>,
    /// Encoder outputs supplied directly (used when no model is given).
    pub embeddings: Option<&'a Matrix>,
    pub settings: &'a DiagnosticsSection,
    pub seed: u64,
}

pub fn diagnose(input: &DiagnosisInput<'_>) -> Result<DiagnosticsReport> {
    let tokens = input.tokens;
    if tokens.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let mut r = DiagnosticsReport {
        schema_version: SCHEMA_VERSION,
        codebook_size: tokens.rows(),
        token_dim: tokens.cols(),
        perplexity: input.usage.map(perplexity).transpose()?,
        mean_pairwise_distance: (tokens.rows() >= 2).then(|| mean_pairwise_distance(tokens)).transpose()?,
        mode_entropy: None,
        active_modes: None,
        entropy_bound: None,
        entropy_bound_holds: None,
        mode_masses: None,
        usage_weighted_masses: None,
        distortion: None,
        frechet_distance: None,
        frechet_degenerate: None,
        mode_coverage: None,
        pairwise_recon_distance: None,
        embedding_peak_count: None,
    };
    if let Some(usage) = input.usage {
        if usage.len() != tokens.rows() {
            return Err(Error::DimensionMismatch {
                context: "usage counts",
                expected: tokens.rows(),
                actual: usage.len(),
            });
        }
    }

    match input.model {
        Some(model) => fill_with(&mut r, model, input)?,
        None => fill_with(&mut r, &IdentityAutoencoder, input)?,
    }
    r.round();
    r.check_finite()?;
    Ok(r)
}

fn fill_with(r: &mut DiagnosticsReport, model: &impl Autoencoder, input: &DiagnosisInput<'_>) -> Result<()> {
    let tokens = input.tokens;
    let settings = input.settings;
    let decoded_dim = model.decode(&tokens.select_rows(&[0]))?.cols();
    if let Some(means) = input.means.filter(|m| m.cols() == decoded_dim) {
        let masses = mode_masses(tokens, means, model)?;
        let bound = entropy_bound_check(&masses.masses)?;
        r.mode_entropy = Some(bound.entropy);
        r.active_modes = Some(masses.active_modes);
        r.entropy_bound = Some(bound.bound);
        r.entropy_bound_holds = Some(bound.holds);
        r.mode_masses = Some(masses.masses);
        if let Some(usage) = input.usage.filter(|u| u.iter().any(|c| *c > 0)) {
            r.usage_weighted_masses = Some(usage_weighted_masses(tokens, usage, means, model)?.masses);
        }
    }

    // reference set and its reconstruction
    let reference = match (input.data, input.embeddings) {
        (Some(data), _) => Some(data),
        (None, Some(emb)) if input.model.is_none() => Some(emb),
        _ => None,
    };
    if let Some(data) = reference.filter(|d| !d.is_empty()) {
        let recon = quantized_reconstruction(model, tokens, data)?;
        r.distortion = Some(mean_squared_error(data, &recon)?);
        if data.rows() > data.cols() {
            let f = frechet_gaussian_distance(data, &recon)?;
            r.frechet_distance = Some(f.distance);
            r.frechet_degenerate = Some(f.degenerate);
        }
        if let Some(means) = input.means.filter(|m| m.cols() == recon.cols()) {
            r.mode_coverage = Some(mode_coverage(&recon, means, settings.coverage_threshold)?);
        }
        r.pairwise_recon_distance = Some(pairwise_recon_distance(&recon, settings.pairwise_sample, input.seed)?);
    }

    let embeddings = match (input.embeddings, input.model, input.data) {
        (Some(e), _, _) => Some(e.clone()),
        (None, Some(m), Some(d)) => Some(m.encode(d)?),
        _ => None,
    };
    if let Some(e) = embeddings.filter(|e| !e.is_empty()) {
        r.embedding_peak_count = Some(histogram_of(&e, settings.histogram_bins)?.peak_count);
    }
    Ok(())
}

impl DiagnosticsReport {
    /// Rounds every real to the 9 significant digits used in text output, so
    /// a report survives a JSON round trip unchanged.
    fn round(&mut self) {
        for v in [
            &mut self.perplexity,
            &mut self.mean_pairwise_distance,
            &mut self.mode_entropy,
            &mut self.entropy_bound,
            &mut self.distortion,
            &mut self.frechet_distance,
            &mut self.pairwise_recon_distance,
        ]
        .into_iter()
        .flatten()
        {
            *v = round_g9(*v);
        }
        for m in [&mut self.mode_masses, &mut self.usage_weighted_masses].into_iter().flatten() {
            m.iter_mut().for_each(|v| *v = round_g9(*v));
        }
    }

    fn check_finite(&self) -> Result<()> {
        let scalars = self.scalars();
        if let Some((name, _)) = scalars.iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("report field {name}")));
        }
        Ok(())
    }

    fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        let values = [
            self.perplexity,
            self.mean_pairwise_distance,
            self.mode_entropy,
            self.active_modes.map(|v| v as f64),
            self.entropy_bound,
            self.distortion,
            self.frechet_distance,
            self.mode_coverage.map(|v| v as f64),
            self.pairwise_recon_distance,
            self.embedding_peak_count.map(|v| v as f64),
        ];
        SCALAR_FIELDS.into_iter().zip(values).collect()
    }

    /// Scalar metrics by name, absent ones skipped.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        self.scalars().into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["codebook_size", "token_dim"];
        cols.extend(SCALAR_FIELDS);
        cols.push("entropy_bound_holds");
        cols.join(",")
    }

    /// One flat row matching [`csv_header`](Self::csv_header); absent values are empty.
    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.codebook_size.to_string(), self.token_dim.to_string()];
        cells.extend(self.scalars().into_iter().map(|(_, v)| v.map(fmt_g9).unwrap_or_default()));
        cells.push(self.entropy_bound_holds.map(|b| b.to_string()).unwrap_or_default());
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}
