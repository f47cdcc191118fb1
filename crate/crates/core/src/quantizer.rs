//! Vector-quantization layer: nearest-token assignment, straight-through
//! gradient routing, EMA codebook updates, losses and usage statistics.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::textfmt::fmt_g9;

/// How tokens are learned during VQ training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    /// Exponential moving averages of assigned embeddings; the codebook loss is only logged.
    #[default]
    Ema,
    /// The codebook loss is backpropagated into the tokens.
    Gradient,
}

/// Additive smoothing for the EMA cluster sizes.
pub const LAPLACE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `S × d` token vectors.
    pub tokens: Matrix,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sum: Matrix,
    /// Assignments recorded by [`Codebook::assign_and_record`].
    pub usage_counts: Vec<u64>,
    pub decay: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    pub quantized: Matrix,
    /// `β · mean‖z − sg(q)‖²`, mean over every element.
    pub commit_loss: f64,
    /// `mean‖sg(z) − q‖²`, mean over every element.
    pub codebook_loss: f64,
    /// Value equal to `quantized`; gradients pass straight to `z`.
    pub straight_through_output: Matrix,
}

impl Codebook {
    /// Codebook with zeroed EMA state.
    pub fn new(tokens: Matrix, decay: f64, beta: f64) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if tokens.cols() == 0 {
            return Err(Error::InvalidArgument("token dimension must be >= 1".into()));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("decay must lie in (0,1), got {decay}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        let (s, d) = tokens.shape();
        Ok(Self {
            tokens,
            ema_cluster_size: vec![0.0; s],
            ema_embed_sum: Matrix::zeros(s, d),
            usage_counts: vec![0; s],
            decay,
            beta,
        })
    }

    /// Seeds the EMA state as if every token had absorbed `count` copies of itself.
    pub fn seed_ema(&mut self, count: f64) {
        self.ema_cluster_size.iter_mut().for_each(|c| *c = count);
        self.ema_embed_sum = self.tokens.map(|v| v * count);
    }

    pub fn size(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if self.tokens.rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if z.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "quantizer input",
                expected: self.dim(),
                actual: z.cols(),
            });
        }
        Ok(())
    }

    /// Nearest token per row of `z`; ties go to the lowest index.
    pub fn assign(&self, z: &Matrix) -> Result<Vec<usize>> {
        self.check_input(z)?;
        // ‖z − t‖² = ‖z‖² − 2 z·t + ‖t‖² would be faster but can reorder ties;
        // the direct form keeps exact agreement with a plain scan.
        Ok(z.iter_rows()
            .map(|row| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, t) in self.tokens.iter_rows().enumerate() {
                    let d = squared_distance(row, t);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Evaluation-mode assignment: also accumulates `usage_counts`.
    pub fn assign_and_record(&mut self, z: &Matrix) -> Result<Vec<usize>> {
        let idx = self.assign(z)?;
        for &k in &idx {
            self.usage_counts[k] += 1;
        }
        Ok(idx)
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn quantize(&self, z: &Matrix) -> Result<QuantizeResult> {
        let indices = self.assign(z)?;
        let quantized = self.tokens.select_rows(&indices);
        let n = z.as_slice().len().max(1) as f64;
        let sq = z
            .as_slice()
            .iter()
            .zip(quantized.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(QuantizeResult {
            indices,
            straight_through_output: quantized.clone(),
            quantized,
            commit_loss: self.beta * sq,
            codebook_loss: sq,
        })
    }

    /// Gradient of the codebook loss w.r.t. the tokens (`S × d`).
    pub fn codebook_loss_grad(&self, z: &Matrix, result: &QuantizeResult) -> Result<Matrix> {
        self.check_input(z)?;
        let n = z.as_slice().len().max(1) as f64;
        let mut g = Matrix::zeros(self.size(), self.dim());
        for (i, &k) in result.indices.iter().enumerate() {
            for ((gv, &q), &zv) in g.row_mut(k).iter_mut().zip(result.quantized.row(i)).zip(z.row(i)) {
                *gv += 2.0 * (q - zv) / n;
            }
        }
        Ok(g)
    }

    /// EMA update of cluster sizes and embedding sums, then tokens as the
    /// smoothed mean of their assigned embeddings.
    pub fn ema_update(&mut self, z: &Matrix, indices: &[usize]) -> Result<()> {
        self.check_input(z)?;
        if indices.len() != z.rows() {
            return Err(Error::DimensionMismatch {
                context: "ema_update indices",
                expected: z.rows(),
                actual: indices.len(),
            });
        }
        let (s, d) = self.tokens.shape();
        let mut counts = vec![0.0; s];
        let mut sums = Matrix::zeros(s, d);
        for (row, &k) in z.iter_rows().zip(indices) {
            if k >= s {
                return Err(Error::InvalidArgument(format!("token index {k} out of range")));
            }
            counts[k] += 1.0;
            for (a, v) in sums.row_mut(k).iter_mut().zip(row) {
                *a += v;
            }
        }
        let g = self.decay;
        for k in 0..s {
            self.ema_cluster_size[k] = g * self.ema_cluster_size[k] + (1.0 - g) * counts[k];
            for (e, a) in self.ema_embed_sum.row_mut(k).iter_mut().zip(sums.row(k)) {
                *e = g * *e + (1.0 - g) * a;
            }
        }
        let total: f64 = self.ema_cluster_size.iter().sum();
        if total <= 0.0 {
            return Ok(());
        }
        let denom = total + s as f64 * LAPLACE_EPS;
        for k in 0..s {
            let smoothed = (self.ema_cluster_size[k] + LAPLACE_EPS) / denom * total;
            for (t, e) in self.tokens.row_mut(k).iter_mut().zip(self.ema_embed_sum.row(k)) {
                *t = e / smoothed;
            }
        }
        Ok(())
    }

    /// CSV `token_id,usage_count,c0,...,c{d-1}`.
    pub fn to_csv(&self) -> String {
        CodebookDump {
            tokens: self.tokens.clone(),
            usage_counts: Some(self.usage_counts.clone()),
        }
        .to_csv()
    }
}

/// Straight-through backward: the gradient at the quantizer output is copied to its input.
pub fn straight_through_backward(grad_output: &Matrix) -> Matrix {
    grad_output.clone()
}

/// Gradient of the commitment loss w.r.t. the encoder output.
pub fn commit_loss_grad(z: &Matrix, quantized: &Matrix, beta: f64) -> Result<Matrix> {
    z.check_same_shape(quantized, "commit_loss_grad")?;
    let n = z.as_slice().len().max(1) as f64;
    Ok(z.sub(quantized)?.map(|d| 2.0 * beta * d / n))
}

/// `exp` of the entropy of the usage distribution.
///
/// Evaluated as `Π (N/c)^(m·c/N)` over groups of `m` tokens sharing count `c`,
/// so a uniform histogram over `S` tokens yields exactly `S`.
pub fn perplexity(usage_counts: &[u64]) -> Result<f64> {
    let total: u64 = usage_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("usage counts are all zero"));
    }
    let mut nonzero: Vec<u64> = usage_counts.iter().copied().filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    let total_f = total as f64;
    let mut perplexity = 1.0;
    for group in nonzero.chunk_by(|a, b| a == b) {
        let c = group[0] as f64;
        let mass = (group.len() as u64 * group[0]) as f64 / total_f;
        perplexity *= (total_f / c).powf(mass);
    }
    Ok(perplexity)
}

/// Mean Euclidean distance over unordered token pairs.
pub fn mean_pairwise_distance(tokens: &Matrix) -> Result<f64> {
    let s = tokens.rows();
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean pairwise distance needs at least 2 tokens, got {s}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            sum += squared_distance(tokens.row(i), tokens.row(j)).sqrt();
        }
    }
    Ok(sum / (s * (s - 1) / 2) as f64)
}

/// Parsed codebook CSV. Usage counts are optional for externally produced dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookDump {
    pub tokens: Matrix,
    pub usage_counts: Option<Vec<u64>>,
}

impl CodebookDump {
    pub fn to_csv(&self) -> String {
        let d = self.tokens.cols();
        let mut out = String::from("token_id,usage_count");
        for j in 0..d {
            out.push_str(&format!(",c{j}"));
        }
        out.push('\n');
        for (k, row) in self.tokens.iter_rows().enumerate() {
            out.push_str(&k.to_string());
            out.push(',');
            if let Some(u) = &self.usage_counts {
                out.push_str(&u[k].to_string());
            }
            for v in row {
                out.push(',');
                out.push_str(&fmt_g9(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Accepts dumps with or without a `usage_count` column; empty usage cells
    /// also mark usage as absent. Rows may appear in any `token_id` order.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Csv {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let id_col = headers.iter().position(|h| h == "token_id").ok_or(Error::Csv {
            line: 1,
            message: "missing `token_id` column".into(),
        })?;
        let usage_col = headers.iter().position(|h| h == "usage_count");
        let mut coord_cols = Vec::new();
        for j in 0.. {
            match headers.iter().position(|h| h == format!("c{j}")) {
                Some(c) => coord_cols.push(c),
                None => break,
            }
        }
        if coord_cols.is_empty() {
            return Err(Error::Csv {
                line: 1,
                message: "no coordinate columns `c0..`".into(),
            });
        }
        let mut rows: Vec<(usize, Option<u64>, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Csv { line, message };
            let id: usize = rec
                .get(id_col)
                .unwrap_or("")
                .parse()
                .map_err(|_| bad("token_id is not a non-negative integer".into()))?;
            let usage = match usage_col.map(|c| rec.get(c).unwrap_or("")) {
                None | Some("") => None,
                Some(u) => Some(u.parse().map_err(|_| bad(format!("bad usage_count `{u}`")))?),
            };
            let coords = coord_cols
                .iter()
                .map(|&c| {
                    let s = rec.get(c).unwrap_or("");
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(format!("bad coordinate `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((id, usage, coords));
        }
        if rows.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        rows.sort_by_key(|r| r.0);
        for (expect, r) in rows.iter().enumerate() {
            if r.0 != expect {
                return Err(Error::Csv {
                    line: 0,
                    message: format!("token ids are not 0..{} (saw {})", rows.len(), r.0),
                });
            }
        }
        let all_usage = rows.iter().all(|r| r.1.is_some());
        let usage_counts = all_usage.then(|| rows.iter().map(|r| r.1.unwrap()).collect());
        let coords: Vec<Vec<f64>> = rows.into_iter().map(|r| r.2).collect();
        Ok(Self {
            tokens: Matrix::from_rows(&coords),
            usage_counts,
        })
    }
}
