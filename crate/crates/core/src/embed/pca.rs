//! Top-2 principal component projection via a Jacobi eigensolver on the
//! covariance matrix (embedding dimensions are small, <= a few dozen).

use crate::error::{Error, Result};

/// Project rows of `data` onto their top-2 principal components after mean
/// centering. Component signs are fixed so the largest-magnitude loading is
/// positive.
pub fn pca_project(data: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if data.len() < 2 {
        return Err(Error::Config("pca needs at least 2 records".to_string()));
    }
    let dim = data[0].len();
    if dim < 2 || data.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "pca_project",
            detail: "records must share a dimension >= 2".to_string(),
        });
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for row in data {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mean[j]) / n;
            }
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&mut cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).expect("finite eigenvalues"));

    let mut components = [[0.0; 2]; 0].to_vec();
    components.resize(2, [0.0; 2]);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for &col in order.iter().take(2) {
        let mut axis: Vec<f64> = (0..dim).map(|r| eigenvectors[r * dim + col]).collect();
        let dominant = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty axis");
        if axis[dominant] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
        axes.push(axis);
    }

    Ok(data
        .iter()
        .map(|row| {
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = row.iter().zip(axis).zip(&mean).map(|((v, a), m)| (v - m) * a).sum();
            }
            p
        })
        .collect())
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues and a
/// column-major eigenvector matrix.
fn jacobi_eigen(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}
