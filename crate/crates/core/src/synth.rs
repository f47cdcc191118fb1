//! Synthetic Gaussian-mixture data: sampling, standardization and labeling.
//!
//! Every component has weight `1/K` and a shared isotropic standard deviation.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::rng;
use crate::textfmt::fmt_g9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub num_components: usize,
    pub points_per_component: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub seed: u64,
}

impl GaussianMixtureSpec {
    /// Spec with means from [`default_means`].
    pub fn with_default_means(
        num_components: usize,
        points_per_component: usize,
        dim: usize,
        separation: f64,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::with_layout(num_components, points_per_component, dim, separation, std, seed, MeanLayout::Diagonal)
    }

    pub fn with_layout(
        num_components: usize,
        points_per_component: usize,
        dim: usize,
        separation: f64,
        std: f64,
        seed: u64,
        layout: MeanLayout,
    ) -> Result<Self> {
        let spec = Self {
            num_components,
            points_per_component,
            dim,
            means: layout.means(num_components, dim, separation)?,
            std,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_components == 0 {
            return Err(Error::InvalidSpec("num_components must be >= 1".into()));
        }
        if self.points_per_component == 0 {
            return Err(Error::InvalidSpec("points_per_component must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dim must be >= 1".into()));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::InvalidSpec(format!("std must be positive, got {}", self.std)));
        }
        if self.means.len() != self.num_components {
            return Err(Error::InvalidSpec(format!(
                "expected {} means, got {}",
                self.num_components,
                self.means.len()
            )));
        }
        for (k, m) in self.means.iter().enumerate() {
            if m.len() != self.dim {
                return Err(Error::InvalidSpec(format!(
                    "mean {k} has length {}, expected {}",
                    m.len(),
                    self.dim
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("mean {k} is not finite")));
            }
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(Error::InvalidSpec(format!("means {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn means_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.means)
    }

    pub fn total_points(&self) -> usize {
        self.num_components * self.points_per_component
    }
}

/// Per-dimension affine standardization recorded from the generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population (ddof = 0) statistics, matching a standard scaler.
    pub fn fit(points: &Matrix) -> Self {
        let mean = points.column_means();
        let n = points.rows() as f64;
        let mut var = vec![0.0; points.cols()];
        for r in points.iter_rows() {
            for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                // a constant column is only centered
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, points: &Matrix) -> Matrix {
        let mut out = points.clone();
        for i in 0..out.rows() {
            self.transform_row(out.row_mut(i));
        }
        out
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn inverse_transform(&self, points: &Matrix) -> Matrix {
        let mut out = points.clone();
        for i in 0..out.rows() {
            for ((x, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Standardized points, component-major row order.
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub scaler: Scaler,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Component means mapped into the standardized frame of `points`.
    pub fn standardized_means(&self, spec: &GaussianMixtureSpec) -> Matrix {
        self.scaler.transform(&spec.means_matrix())
    }

    /// CSV with header `x0,...,x{d-1},label`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, label) in self.points.iter_rows().zip(&self.labels) {
            for v in row {
                out.push_str(&fmt_g9(*v));
                out.push(',');
            }
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }
}

/// Draws the raw (unstandardized) mixture sample in component-major order.
pub fn sample_raw(spec: &GaussianMixtureSpec) -> Result<(Matrix, Vec<usize>)> {
    spec.validate()?;
    let n = spec.total_points();
    let mut points = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in spec.means.iter().enumerate() {
        for i in 0..spec.points_per_component {
            let mut rng = rng::keyed(&[spec.seed, k as u64, i as u64]);
            let row = points.row_mut(k * spec.points_per_component + i);
            for (x, m) in row.iter_mut().zip(mean) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = m + spec.std * z;
            }
            labels.push(k);
        }
    }
    Ok((points, labels))
}

pub fn generate(spec: &GaussianMixtureSpec) -> Result<LabeledDataset> {
    let (raw, labels) = sample_raw(spec)?;
    let scaler = Scaler::fit(&raw);
    Ok(LabeledDataset {
        points: scaler.transform(&raw),
        labels,
        scaler,
    })
}

/// Placement of the component means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanLayout {
    /// Evenly spaced along the all-ones direction: every coordinate marginal shows all K modes.
    #[default]
    Diagonal,
    /// On a circle in the first two coordinates (a line in dim 1).
    Circle,
}

impl MeanLayout {
    pub fn means(self, num_components: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
        match self {
            MeanLayout::Diagonal => default_means(num_components, dim, separation),
            MeanLayout::Circle => circle_means(num_components, dim, separation),
        }
    }
}

fn check_layout_args(num_components: usize, dim: usize, separation: f64) -> Result<()> {
    if num_components == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "mean layout needs at least one component and one dimension".into(),
        ));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    Ok(())
}

fn line_offset(i: usize, num_components: usize, separation: f64) -> f64 {
    (i as f64 - (num_components as f64 - 1.0) / 2.0) * separation
}

/// Means `(i - (K-1)/2) * separation * (1, ..., 1)`: adjacent modes are
/// `separation` apart in every coordinate.
pub fn default_means(num_components: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    check_layout_args(num_components, dim, separation)?;
    Ok((0..num_components)
        .map(|i| vec![line_offset(i, num_components, separation); dim])
        .collect())
}

/// Means on a circle of radius `separation` in the first two coordinates,
/// evenly spaced on a line for dim 1.
pub fn circle_means(num_components: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    check_layout_args(num_components, dim, separation)?;
    let k = num_components as f64;
    Ok((0..num_components)
        .map(|i| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = line_offset(i, num_components, separation);
            } else {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / k;
                m[0] = separation * angle.cos();
                m[1] = separation * angle.sin();
            }
            m
        })
        .collect())
}

/// Nearest component mean per point (Euclidean, ties to the lowest index).
pub fn assign_to_component(points: &Matrix, means: &Matrix) -> Result<Vec<usize>> {
    if points.cols() != means.cols() {
        return Err(Error::DimensionMismatch {
            context: "assign_to_component",
            expected: means.cols(),
            actual: points.cols(),
        });
    }
    if means.rows() == 0 {
        return Err(Error::EmptyInput("component means"));
    }
    Ok(points
        .iter_rows()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, m) in means.iter_rows().enumerate() {
                let d = squared_distance(p, m);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect())
}
