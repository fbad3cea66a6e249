//! Independent reference implementations shared by the integration targets.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub mod oracle;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(r)
}

/// `y = Xβ + σ ε` with standard Gaussian design.
pub fn linear_data(r: &mut ChaCha20Rng, n: usize, beta: &[f64], sigma: f64) -> (Array2<f64>, Array1<f64>) {
    let d = beta.len();
    let x = Array2::from_shape_fn((n, d), |_| normal(r));
    let y = Array1::from_shape_fn(n, |i| (0..d).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + sigma * normal(r));
    (x, y)
}

/// Random `s`-sparse vector with entries of magnitude in `[0.5, 1.5]`.
pub fn sparse_vector(r: &mut ChaCha20Rng, d: usize, s: usize) -> Vec<f64> {
    let mut beta = vec![0.0; d];
    let mut placed = 0;
    while placed < s {
        let j = r.random_range(0..d);
        if beta[j] == 0.0 {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            beta[j] = sign * r.random_range(0.5..1.5);
            placed += 1;
        }
    }
    beta
}

pub fn to_na(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

/// Ordinary least squares by SVD.
pub fn least_squares(x: &Array2<f64>, y: &Array1<f64>) -> Vec<f64> {
    let a = to_na(x);
    let b = DVector::from_iterator(y.len(), y.iter().copied());
    let sol = a.svd(true, true).solve(&b, 1e-12).expect("svd solve");
    sol.iter().copied().collect()
}

/// Keeps the `s` largest magnitudes; ties go to the lower index.
pub fn top_s(v: &DVector<f64>, s: usize) -> DVector<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
    let mut out = DVector::zeros(v.len());
    for &j in idx.iter().take(s) {
        out[j] = v[j];
    }
    out
}

/// Full-batch iterative hard thresholding.
pub fn iht(x: &Array2<f64>, y: &Array1<f64>, s: usize, step: f64, iters: usize) -> Vec<f64> {
    let a = to_na(x);
    let b = DVector::from_iterator(y.len(), y.iter().copied());
    let n = y.len() as f64;
    let mut beta = DVector::zeros(a.ncols());
    for _ in 0..iters {
        let grad = a.transpose() * (&a * &beta - &b) / n;
        beta = top_s(&(&beta - step * grad), s);
    }
    beta.iter().copied().collect()
}

/// Noise-free scale estimate: `2^{j+2}` for the modal dyadic bin `(2^j, 2^{j+1}]`
/// of the absolute pair differences, lowest bin on ties.
pub fn modal_scale(w: &[f64]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for p in w.chunks_exact(2) {
        let v = (p[1] - p[0]).abs();
        if v > 0.0 {
            let mut j = v.log2().floor() as i64;
            if 2f64.powi(j as i32) >= v {
                j -= 1;
            }
            *counts.entry(j).or_insert(0usize) += 1;
        }
    }
    let mut best = (i64::MIN, 0usize);
    for (j, c) in counts {
        if c > best.1 {
            best = (j, c);
        }
    }
    2f64.powi((best.0 + 2) as i32)
}

/// Noise-free reference of the single-site private gradient descent:
/// consecutive batches, ℓ2 clip `R` on covariates, residual clip
/// `sqrt(log(n/η))·modal_scale`.
pub fn clipped_gd(x: &Array2<f64>, y: &Array1<f64>, rounds: usize, rho: f64, eta: f64) -> Vec<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let b = n / rounds;
    let log_n = (n as f64 / eta).ln();
    let clip = (d as f64 * log_n).sqrt();
    let mut beta = vec![0.0; d];
    for t in 0..rounds {
        let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
        let pred = |i: usize, beta: &[f64]| (0..d).map(|j| x[[i, j]] * beta[j]).sum::<f64>();
        let even = b / 2 * 2;
        let res: Vec<f64> = rows[..even].iter().map(|&i| y[i] - pred(i, &beta)).collect();
        let rt = log_n.sqrt() * modal_scale(&res);
        let mut g = vec![0.0; d];
        for &i in &rows {
            let r = (pred(i, &beta) - y[i]).clamp(-rt, rt);
            let norm = (0..d).map(|j| x[[i, j]] * x[[i, j]]).sum::<f64>().sqrt();
            let f = if norm > clip { clip / norm } else { 1.0 };
            for j in 0..d {
                g[j] += f * r * x[[i, j]];
            }
        }
        for j in 0..d {
            beta[j] -= rho * g[j] / b as f64;
        }
    }
    beta
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Rows `[from, to)` of every `(x, y)` stacked in order.
pub fn stack(parts: &[(Array2<f64>, Array1<f64>)], from: impl Fn(usize) -> usize) -> (Array2<f64>, Array1<f64>) {
    let d = parts[0].0.ncols();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (x, y) in parts {
        for i in from(x.nrows())..x.nrows() {
            xs.extend(x.row(i).iter().copied());
            ys.push(y[i]);
        }
    }
    let n = ys.len();
    (Array2::from_shape_vec((n, d), xs).unwrap(), Array1::from(ys))
}
