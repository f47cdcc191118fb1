//! Central finite-difference checks of every backward pass. Each check returns
//! the largest relative error over its instances.

use rand::Rng;
use shrinklab::matrix::Matrix;
use shrinklab::nn::{mse_loss, relu, relu_backward, LinearLayer, Mlp};
use shrinklab::quantizer::{commit_loss_grad, straight_through_backward, Codebook};
use shrinklab::rng::{stream, StreamRng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 120;
pub const TOLERANCE: f64 = TOL;

fn random_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Entries pushed at least `margin` away from zero so no ReLU kink lies within `H`.
fn away_from_zero(m: Matrix, margin: f64) -> Matrix {
    m.map(|v| if v.abs() >= margin { v } else if v >= 0.0 { margin } else { -margin })
}

fn weighted_sum(m: &Matrix, c: &Matrix) -> f64 {
    m.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

/// ‖a − n‖ / max(‖a‖, ‖n‖), the usual gradient-check measure.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let plus = f(&x);
            x[i] = orig - H;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

pub fn linear_layer_gradients() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 100);
        let (n, i, o) = (rng.gen_range(1..9), rng.gen_range(1..7), rng.gen_range(1..7));
        let mut layer = LinearLayer::new(random_matrix(o, i, &mut rng), (0..o).map(|_| rng.gen()).collect()).unwrap();
        let x = random_matrix(n, i, &mut rng);
        let c = random_matrix(n, o, &mut rng);
        layer.forward(&x).unwrap();
        let g = layer.backward(&c).unwrap();

        let w0 = layer.weight.clone();
        let b0 = layer.bias.clone();
        let num_x = numeric_grad(x.as_slice(), |v| {
            weighted_sum(&layer.infer(&Matrix::from_vec(n, i, v.to_vec()).unwrap()).unwrap(), &c)
        });
        let num_w = numeric_grad(w0.as_slice(), |v| {
            let l = LinearLayer::new(Matrix::from_vec(o, i, v.to_vec()).unwrap(), b0.clone()).unwrap();
            weighted_sum(&l.infer(&x).unwrap(), &c)
        });
        let num_b = numeric_grad(&b0, |v| {
            let l = LinearLayer::new(w0.clone(), v.to_vec()).unwrap();
            weighted_sum(&l.infer(&x).unwrap(), &c)
        });
        worst = worst.max(rel_err(g.input.as_slice(), &num_x));
        worst = worst.max(rel_err(g.weight.as_slice(), &num_w));
        worst = worst.max(rel_err(&g.bias, &num_b));
    }
    worst
}

pub fn relu_gradients() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 101);
        let (n, d) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let x = away_from_zero(random_matrix(n, d, &mut rng), 1e-3);
        let c = random_matrix(n, d, &mut rng);
        let analytic = relu_backward(&x, &c).unwrap();
        let num = numeric_grad(x.as_slice(), |v| weighted_sum(&relu(&Matrix::from_vec(n, d, v.to_vec()).unwrap()), &c));
        worst = worst.max(rel_err(analytic.as_slice(), &num));
    }
    worst
}

pub fn mse_gradients() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 102);
        let (n, d) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let pred = random_matrix(n, d, &mut rng);
        let target = random_matrix(n, d, &mut rng);
        let (_, analytic) = mse_loss(&pred, &target).unwrap();
        let num = numeric_grad(pred.as_slice(), |v| {
            mse_loss(&Matrix::from_vec(n, d, v.to_vec()).unwrap(), &target).unwrap().0
        });
        worst = worst.max(rel_err(analytic.as_slice(), &num));
    }
    worst
}

fn mlp_with_params(template: &Mlp, flat: &[f64]) -> Mlp {
    let mut m = template.clone();
    let mut off = 0;
    for p in m.params_mut() {
        let len = p.len();
        p.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    m
}

fn flat_params(m: &Mlp) -> Vec<f64> {
    m.clone().params_mut().into_iter().flat_map(|p| p.to_vec()).collect()
}

/// Resamples inputs until no hidden pre-activation sits within `margin` of a ReLU kink.
fn kink_free_input(mlp: &Mlp, n: usize, rng: &mut StreamRng, margin: f64) -> Matrix {
    loop {
        let x = random_matrix(n, mlp.input_dim(), rng);
        let mut h = x.clone();
        let mut ok = true;
        let last = mlp.layers().len() - 1;
        for (i, l) in mlp.layers().iter().enumerate() {
            h = l.infer(&h).unwrap();
            if i < last {
                ok &= h.as_slice().iter().all(|v| v.abs() > margin);
                h = relu(&h);
            }
        }
        if ok {
            return x;
        }
    }
}

pub fn mlp_mse_composite_gradients() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 103);
        let dims = [rng.gen_range(1..5), rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..5)];
        let mut mlp = Mlp::three_layer(dims, &mut rng);
        let n = rng.gen_range(1..6);
        let x = kink_free_input(&mlp, n, &mut rng, 1e-3);
        let target = random_matrix(n, dims[3], &mut rng);
        let out = mlp.forward(&x).unwrap();
        let (_, g) = mse_loss(&out, &target).unwrap();
        let (gx, gp) = mlp.backward(&g).unwrap();

        let template = mlp.clone();
        let p0 = flat_params(&template);
        let num_p = numeric_grad(&p0, |v| {
            mse_loss(&mlp_with_params(&template, v).infer(&x).unwrap(), &target).unwrap().0
        });
        let num_x = numeric_grad(x.as_slice(), |v| {
            let xv = Matrix::from_vec(n, dims[0], v.to_vec()).unwrap();
            mse_loss(&template.infer(&xv).unwrap(), &target).unwrap().0
        });
        let analytic_p: Vec<f64> = gp.into_iter().flatten().collect();
        worst = worst.max(rel_err(&analytic_p, &num_p));
        worst = worst.max(rel_err(gx.as_slice(), &num_x));
    }
    worst
}

/// Straight-through composite with the codebook frozen: the quantizer output is
/// `q + (z − z₀)` with the assignment fixed, which is exactly the function whose
/// gradient the estimator reports. Total loss is decoder MSE plus the commitment term.
pub fn straight_through_composite_gradients() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 104);
        let latent = rng.gen_range(1..5);
        let input = rng.gen_range(1..5);
        let mut enc = Mlp::three_layer([input, 6, 6, latent], &mut rng);
        let mut dec = Mlp::three_layer([latent, 6, 6, input], &mut rng);
        let codebook = Codebook::new(random_matrix(rng.gen_range(1..9), latent, &mut rng), 0.9, 0.25).unwrap();
        let n = rng.gen_range(1..6);
        let x = kink_free_input(&enc, n, &mut rng, 1e-3);

        let z0 = enc.forward(&x).unwrap();
        let q = codebook.quantize(&z0).unwrap();
        let recon = dec.forward(&q.straight_through_output).unwrap();
        let (_, g) = mse_loss(&recon, &x).unwrap();
        let (gq, _) = dec.backward(&g).unwrap();
        let mut gz = straight_through_backward(&gq);
        gz.add_assign(&commit_loss_grad(&z0, &q.quantized, codebook.beta).unwrap()).unwrap();
        let (_, genc) = enc.backward(&gz).unwrap();

        let quantized = q.quantized.clone();
        let beta = codebook.beta;
        let surrogate = |z: &Matrix| {
            let moved = {
                let mut m = quantized.clone();
                m.add_assign(&z.sub(&z0).unwrap()).unwrap();
                m
            };
            let (mse, _) = mse_loss(&dec.infer(&moved).unwrap(), &x).unwrap();
            let commit = beta * z.sub(&quantized).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>()
                / z.as_slice().len() as f64;
            mse + commit
        };

        let num_z = numeric_grad(z0.as_slice(), |v| surrogate(&Matrix::from_vec(n, latent, v.to_vec()).unwrap()));
        worst = worst.max(rel_err(gz.as_slice(), &num_z));

        let template = enc.clone();
        let num_enc = numeric_grad(&flat_params(&template), |v| {
            surrogate(&mlp_with_params(&template, v).infer(&x).unwrap())
        });
        let analytic: Vec<f64> = genc.into_iter().flatten().collect();
        worst = worst.max(rel_err(&analytic, &num_enc));

        // with the codebook frozen the reported output gradient equals the latent gradient
        let num_q = numeric_grad(q.straight_through_output.as_slice(), |v| {
            mse_loss(&dec.infer(&Matrix::from_vec(n, latent, v.to_vec()).unwrap()).unwrap(), &x).unwrap().0
        });
        worst = worst.max(rel_err(straight_through_backward(&gq).as_slice(), &num_q));
    }
    worst
}

pub fn codebook_loss_gradient() -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stream(inst, 105);
        let d = rng.gen_range(1..5);
        let cb = Codebook::new(random_matrix(rng.gen_range(1..6), d, &mut rng), 0.9, 0.25).unwrap();
        let z = random_matrix(rng.gen_range(1..8), d, &mut rng);
        let q = cb.quantize(&z).unwrap();
        let analytic = cb.codebook_loss_grad(&z, &q).unwrap();
        let (s, idx) = (cb.size(), q.indices.clone());
        let num = numeric_grad(cb.tokens.as_slice(), |v| {
            let t = Matrix::from_vec(s, d, v.to_vec()).unwrap();
            let mut total = 0.0;
            for (r, &k) in idx.iter().enumerate() {
                total += z.row(r).iter().zip(t.row(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            total / z.as_slice().len() as f64
        });
        worst = worst.max(rel_err(analytic.as_slice(), &num));
    }
    worst
}
