//! Straight-line oracles shared by the integration tests. Nothing here calls
//! the library's kernels or eigensolver.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_data(features: usize, samples: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(features, samples, |_, _| StandardNormal.sample(&mut rng))
}

pub fn center_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        let mean: f64 = (0..out.ncols()).map(|c| out[(i, c)]).sum::<f64>() / out.ncols() as f64;
        for c in 0..out.ncols() {
            out[(i, c)] -= mean;
        }
    }
    out
}

/// Gram matrix over all features by explicit loops. `sigma = None` is linear.
pub fn direct_gram(x: &DMatrix<f64>, sigma: Option<f64>) -> DMatrix<f64> {
    let (m, t) = x.shape();
    let mut k = DMatrix::zeros(t, t);
    for p in 0..t {
        for q in 0..t {
            let mut acc = 0.0;
            for i in 0..m {
                acc += match sigma {
                    None => x[(i, p)] * x[(i, q)],
                    Some(_) => (x[(i, p)] - x[(i, q)]).powi(2),
                };
            }
            k[(p, q)] = match sigma {
                None => acc,
                Some(s) => (-acc / (2.0 * s * s)).exp(),
            };
        }
    }
    k
}

/// Cyclic Jacobi eigendecomposition; eigenvalues descending, eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m: Vec<f64> = (0..n * n).map(|k| 0.5 * (a[(k / n, k % n)] + a[(k % n, k / n)])).collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
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
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    (values, vectors)
}

pub fn top_vectors(a: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    jacobi_eigen(a).1.columns(0, d).into_owned()
}

/// `½‖VVᵀ − WWᵀ‖²_F`, the squared sin-Θ distance by way of projectors.
pub fn projector_distance(v: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let diff = v * v.transpose() - w * w.transpose();
    0.5 * diff.iter().map(|x| x * x).sum::<f64>()
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

/// Splits rows into `j` contiguous blocks whose sizes differ by at most one,
/// larger blocks first.
pub fn even_row_split(x: &DMatrix<f64>, j: usize) -> Vec<DMatrix<f64>> {
    let m = x.nrows();
    let mut start = 0;
    (0..j)
        .map(|b| {
            let len = m / j + usize::from(b < m % j);
            let block = x.rows(start, len).into_owned();
            start += len;
            block
        })
        .collect()
}
