//! Dense layers with hand-written backward passes, the 3-layer MLP used for
//! encoder and decoder, AdamW, and the flat binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::textfmt::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `out_dim × in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    cached_input: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Matrix,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                context: "LinearLayer::new bias",
                expected: weight.rows(),
                actual: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            cached_input: None,
        })
    }

    /// Weights and biases uniform in `±sqrt(1/in_dim)`.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, weight).expect("sized above"),
            bias,
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x · Wᵀ + b` without touching the cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transposed(&self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.infer(x)?;
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<LinearGrads> {
        let x = self.cached_input.take().ok_or(Error::BackwardBeforeForward)?;
        if grad_out.rows() != x.rows() || grad_out.cols() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "LinearLayer::backward",
                expected: x.rows() * self.out_dim(),
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        Ok(LinearGrads {
            input: grad_out.matmul(&self.weight)?,
            weight: grad_out.transpose_matmul(&x)?,
            bias: grad_out.column_sums(),
        })
    }

    pub fn has_cache(&self) -> bool {
        self.cached_input.is_some()
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through ReLU given its *input*; the subgradient at 0 is 0.
pub fn relu_backward(input: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    input.check_same_shape(grad_out, "relu_backward")?;
    let data = input
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(input.rows(), input.cols(), data)
}

/// Mean over all elements of the squared difference, with its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    pred.check_same_shape(target, "mse_loss")?;
    let n = pred.as_slice().len();
    if n == 0 {
        return Err(Error::EmptyInput("mse_loss"));
    }
    let diff = pred.sub(target)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n as f64;
    let scale = 2.0 / n as f64;
    Ok((loss, diff.map(|d| d * scale)))
}

/// Linear layers joined by ReLU; no activation after the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    pre_activations: Vec<Matrix>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("Mlp layers"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    context: "Mlp layer chain",
                    expected: w[0].out_dim(),
                    actual: w[1].in_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            pre_activations: Vec::new(),
        })
    }

    /// Three layers `dims[0] → dims[1] → dims[2] → dims[3]`.
    pub fn three_layer(dims: [usize; 4], rng: &mut StreamRng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init_uniform(w[0], w[1], rng))
            .collect();
        Self::from_layers(layers).expect("consistent dims")
    }

    /// Exact identity map through ReLUs via `relu(x) - relu(-x)`; needs `hidden >= 2·dim`.
    pub fn identity(dim: usize, hidden: usize) -> Result<Self> {
        if hidden < 2 * dim {
            return Err(Error::InvalidArgument(format!(
                "identity MLP needs hidden >= {}, got {hidden}",
                2 * dim
            )));
        }
        let mut w1 = Matrix::zeros(hidden, dim);
        let mut w3 = Matrix::zeros(dim, hidden);
        for j in 0..dim {
            w1[(j, j)] = 1.0;
            w1[(dim + j, j)] = -1.0;
            w3[(j, j)] = 1.0;
            w3[(j, dim + j)] = -1.0;
        }
        Self::from_layers(vec![
            LinearLayer::new(w1, vec![0.0; hidden])?,
            LinearLayer::new(Matrix::identity(hidden), vec![0.0; hidden])?,
            LinearLayer::new(w3, vec![0.0; dim])?,
        ])
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        self.pre_activations.clear();
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            h = self.layers[i].forward(&h)?;
            if i < last {
                let a = relu(&h);
                self.pre_activations.push(h);
                h = a;
            }
        }
        Ok(h)
    }

    /// Returns the input gradient and parameter gradients in [`Mlp::params_mut`] order.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<(Matrix, Vec<Vec<f64>>)> {
        if self.pre_activations.len() + 1 != self.layers.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads = vec![Vec::new(); 2 * self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let lg = self.layers[i].backward(&g)?;
            grads[2 * i] = lg.weight.into_vec();
            grads[2 * i + 1] = lg.bias;
            g = lg.input;
            if i > 0 {
                let pre = self.pre_activations.pop().expect("one per hidden layer");
                g = relu_backward(&pre, &g)?;
            }
        }
        Ok((g, grads))
    }

    /// Weight then bias for each layer, first layer first.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn to_tensors(&self, prefix: &str, out: &mut Vec<Tensor>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Tensor::new(
                format!("{prefix}.{i}.weight"),
                vec![l.out_dim(), l.in_dim()],
                l.weight.as_slice().to_vec(),
            ));
            out.push(Tensor::new(format!("{prefix}.{i}.bias"), vec![l.out_dim()], l.bias.clone()));
        }
    }

    fn from_tensors(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(w) = ckpt.get(&format!("{prefix}.{i}.weight")) else {
                break;
            };
            let b = ckpt
                .get(&format!("{prefix}.{i}.bias"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{i}.bias")))?;
            layers.push(LinearLayer::new(w.to_matrix()?, b.data.clone())?);
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("no `{prefix}` layers")));
        }
        Mlp::from_layers(layers)
    }
}

/// Encoder and decoder of the VQ-VAE (or plain autoencoder).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl MlpParams {
    pub fn new(input_dim: usize, hidden_dim: usize, latent_dim: usize, rng: &mut StreamRng) -> Self {
        let encoder = Mlp::three_layer([input_dim, hidden_dim, hidden_dim, latent_dim], rng);
        let decoder = Mlp::three_layer([latent_dim, hidden_dim, hidden_dim, input_dim], rng);
        Self { encoder, decoder }
    }

    pub fn identity(dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::identity(dim, hidden_dim)?,
            decoder: Mlp::identity(dim, hidden_dim)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut t = Vec::new();
        self.encoder.to_tensors("encoder", &mut t);
        self.decoder.to_tensors("decoder", &mut t);
        t
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let encoder = Mlp::from_tensors("encoder", ckpt)?;
        let decoder = Mlp::from_tensors("decoder", ckpt)?;
        if encoder.output_dim() != decoder.input_dim() {
            return Err(Error::Checkpoint("encoder output and decoder input differ".into()));
        }
        Ok(Self { encoder, decoder })
    }
}

/// Inference-only encode/decode pair.
pub trait Autoencoder {
    fn encode(&self, x: &Matrix) -> Result<Matrix>;
    fn decode(&self, z: &Matrix) -> Result<Matrix>;
}

impl Autoencoder for MlpParams {
    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.infer(x)
    }

    fn decode(&self, z: &Matrix) -> Result<Matrix> {
        self.decoder.infer(z)
    }
}

/// Encoder and decoder are both the identity: quantization is the only distortion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityAutoencoder;

impl Autoencoder for IdentityAutoencoder {
    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }

    fn decode(&self, z: &Matrix) -> Result<Matrix> {
        Ok(z.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over all parameter tensors. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                context: "AdamW::step tensor count",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    context: "AdamW::step tensor size",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: String, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name, shape, data }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            _ => Err(Error::Checkpoint(format!("tensor `{}` is not 2-D", self.name))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    tensors: Vec<TensorHeader>,
}

const CHECKPOINT_FORMAT: &str = "shrinklab-checkpoint";

/// One line of compact JSON naming each tensor's shape, then every tensor's
/// values as little-endian `f64` in header order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        let mut body = &bytes[nl + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for h in header.tensors {
            let n: usize = h.shape.iter().product();
            if body.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", h.name)));
            }
            let mut data = Vec::with_capacity(n);
            for chunk in body[..n * 8].chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(chunk);
                data.push(f64::from_le_bytes(b));
            }
            body = &body[n * 8..];
            tensors.push(Tensor::new(h.name, h.shape, data));
        }
        if !body.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}
