// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference implementations shared by integration tests. Nothing here
//! calls into the library's numerics.

#![allow(dead_code)]

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `0.5 |w|^2 + c * sum log(1 + exp(-y (w.x + b)))`, written out directly.
pub fn logistic_objective(x: &Array2<f64>, z: &[bool], c: f64, w: &[f64], b: f64) -> f64 {
    let mut total = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    for (row, &label) in x.outer_iter().zip(z) {
        let m: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        let y = if label { 1.0 } else { -1.0 };
        let t = -y * m;
        total += c * if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    }
    total
}

fn objective_grad(x: &Array2<f64>, z: &[bool], c: f64, w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let mut gw = w.to_vec();
    let mut gb = 0.0;
    for (row, &label) in x.outer_iter().zip(z) {
        let m: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        let y = if label { 1.0 } else { -1.0 };
        let s = 1.0 / (1.0 + (y * m).exp());
        let coef = -c * y * s;
        for (g, v) in gw.iter_mut().zip(row.iter()) {
            *g += coef * v;
        }
        gb += coef;
    }
    (gw, gb)
}

/// Largest eigenvalue of `[X 1]^T [X 1]` by power iteration.
fn gram_top_eigen(x: &Array2<f64>) -> f64 {
    let d = x.ncols() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut out = vec![0.0; d];
        for row in x.outer_iter() {
            let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += s * a;
            }
            out[d - 1] += s;
        }
        lambda = out.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = out.iter().map(|a| a / lambda).collect();
    }
    lambda
}

/// Full-batch gradient descent with Nesterov momentum and the safe step
/// `1/L`, `L = 1 + c * lambda_max / 4`.
pub fn gd_logistic(x: &Array2<f64>, z: &[bool], c: f64, steps: usize) -> (Vec<f64>, f64) {
    let d = x.ncols();
    let lip = 1.0 + c * gram_top_eigen(x) / 4.0;
    let eta = 1.0 / lip;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (mut w_prev, mut b_prev) = (w.clone(), b);
    for k in 0..steps {
        let mom = k as f64 / (k as f64 + 3.0);
        let yw: Vec<f64> = w.iter().zip(&w_prev).map(|(a, p)| a + mom * (a - p)).collect();
        let yb = b + mom * (b - b_prev);
        let (gw, gb) = objective_grad(x, z, c, &yw, yb);
        w_prev = w;
        b_prev = b;
        w = yw.iter().zip(&gw).map(|(a, g)| a - eta * g).collect();
        b = yb - eta * gb;
    }
    (w, b)
}

pub fn accuracy(x: &Array2<f64>, z: &[bool], w: &[f64], b: f64) -> f64 {
    let ok = x
        .outer_iter()
        .zip(z)
        .filter(|(row, &label)| {
            let m: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            (m >= 0.0) == label
        })
        .count();
    ok as f64 / z.len() as f64
}

/// Gaussian features with labels from a noisy random linear rule.
pub fn random_dataset(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    let beta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = x
        .outer_iter()
        .map(|row| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + 2.0 * noise > 0.0
        })
        .collect();
    (x, z)
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for k in 0..j {
            let p: f64 = (0..d).map(|i| v[i] * q[[i, k]]).sum();
            for i in 0..d {
                v[i] -= p * q[[i, k]];
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for i in 0..d {
            q[[i, j]] = v[i] / n;
        }
    }
    q
}

/// Two-sided McNemar p-value by enumerating every sign pattern of the
/// `b + c` discordant pairs under a fair coin.
pub fn mcnemar_enumerated(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let observed = b.min(c);
    let extreme = (0u64..(1 << n))
        .filter(|mask| {
            let k = mask.count_ones() as usize;
            k.min(n - k) <= observed
        })
        .count();
    extreme as f64 / (1u64 << n) as f64
}
