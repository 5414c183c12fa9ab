//! Exact (quadratic) t-SNE with per-point perplexity calibration by binary
//! search, early exaggeration and momentum gradient descent. Runs
//! single-threaded so a seed fully determines the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

/// Pairwise squared Euclidean distances, row-major `n x n`.
fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    d
}

/// Conditional affinities `P(j|i)` with each row's Gaussian bandwidth tuned
/// by binary search so that `exp(H(P_i))` hits the target perplexity.
pub fn conditional_affinities(distances: &[f64], n: usize, perplexity: f64) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::Config("t-SNE needs at least 3 records".to_string()));
    }
    if perplexity >= (n - 1) as f64 {
        return Err(Error::Config(format!(
            "perplexity {} too large for {} records",
            perplexity, n
        )));
    }
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let row = &distances[i * n..(i + 1) * n];

        for _ in 0..200 {
            // entropy of the normalized row at this beta
            let mut sum_p = 0.0;
            let mut sum_dp = 0.0;
            for (j, &d) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let e = (-beta * d).exp();
                sum_p += e;
                sum_dp += d * e;
            }
            if sum_p <= 0.0 {
                return Err(Error::DegenerateInput("t-SNE affinities (all-identical inputs?)"));
            }
            // H = ln(sum_p) + beta * <d>
            let entropy = sum_p.ln() + beta * sum_dp / sum_p;
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta =
                    if beta_min.is_finite() { (beta + beta_min) / 2.0 } else { beta / 2.0 };
            }
        }
        let mut sum_p = 0.0;
        for (j, &d) in row.iter().enumerate() {
            if j != i {
                let e = (-beta * d).exp();
                p[i * n + j] = e;
                sum_p += e;
            }
        }
        if sum_p <= 0.0 || !sum_p.is_finite() {
            return Err(Error::DegenerateInput("t-SNE affinities (all-identical inputs?)"));
        }
        for j in 0..n {
            p[i * n + j] /= sum_p;
        }
    }
    Ok(p)
}

/// Exact t-SNE projection of the rows of `data` to 2-D.
pub fn tsne_project(data: &[Vec<f64>], params: &TsneParams, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = data.len();
    let distances = squared_distances(data);
    // degenerate check: all pairwise distances zero
    if n >= 2 && distances.iter().all(|&d| d == 0.0) {
        return Err(Error::DegenerateInput("t-SNE on identical inputs"));
    }
    let conditional = conditional_affinities(&distances, n, params.perplexity)?;

    // symmetrize, clamp, exaggerate
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64))
                .max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];

    let mut q = vec![0.0; n * n];
    for iter in 0..params.iterations {
        let exaggeration =
            if iter < params.exaggeration_iters { params.early_exaggeration } else { 1.0 };
        let momentum = if iter < params.exaggeration_iters { 0.5 } else { 0.8 };

        // low-dimensional affinities (Student t, one degree of freedom)
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                z += 2.0 * w;
            }
        }

        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let same_sign = grad[k].signum() == velocity[i][k].signum();
                gains[i][k] = if same_sign { (gains[i][k] * 0.8).max(0.01) } else { gains[i][k] + 0.2 };
                velocity[i][k] =
                    momentum * velocity[i][k] - params.learning_rate * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        // re-center
        let mean = y.iter().fold([0.0; 2], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for pt in y.iter_mut() {
            pt[0] -= mean[0];
            pt[1] -= mean[1];
        }
    }
    Ok(y)
}
