//! Dense symmetric numerics: truncated eigendecomposition and principal
//! angles between subspaces.
//!
//! Eigenvector signs are never normalized. Anything that compares two
//! eigenbases goes through [`sin_theta`] or [`subspace_error`], both of which
//! are invariant under sign flips and rotations within an eigenspace.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Relative asymmetry allowed when wrapping a matrix as a [`GramMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative negative-eigenvalue slack tolerated for a PSD Gram matrix.
pub const PSD_TOL: f64 = 1e-8;

/// Columns further than this from orthonormal are rejected by [`sin_theta`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

const EIG_EPS: f64 = f64::EPSILON;
const EIG_MAX_ITER: usize = 100_000;

/// A `T × T` symmetric kernel matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    /// Wraps `entries` after checking it is square, finite and symmetric.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = entries.shape();
        if rows == 0 || rows != cols {
            return Err(Error::input(format!("gram matrix must be square and non-empty, got {rows}x{cols}")));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!("gram matrix has non-finite entry {bad}")));
        }
        for p in 0..rows {
            for q in (p + 1)..rows {
                let (a, b) = (entries[(p, q)], entries[(q, p)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(Error::input(format!("gram matrix not symmetric at ({p}, {q}): {a} vs {b}")));
                }
            }
        }
        Ok(GramMatrix { entries })
    }

    /// Averages `m` with its transpose and wraps the result.
    pub fn symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let sym = (&m + m.transpose()) * 0.5;
        GramMatrix::new(sym)
    }

    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// All eigenvalues, descending.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        Ok(full_eigen(self)?.eigenvalues)
    }

    /// Smallest eigenvalue minus the allowed PSD slack; non-negative means
    /// the matrix is PSD within tolerance.
    pub fn psd_margin(&self) -> Result<f64> {
        let spectrum = self.spectrum()?;
        let largest = spectrum[0];
        let smallest = spectrum[spectrum.len() - 1];
        Ok(smallest + PSD_TOL * largest.max(1.0))
    }
}

/// Leading eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTruncation {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// `T × D`, one eigenvector per column.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralTruncation {
    pub fn order(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Keeps the first `d` pairs.
    pub fn truncate(&self, d: usize) -> Result<SpectralTruncation> {
        if d == 0 || d > self.rank() {
            return Err(Error::input(format!("cannot truncate rank {} to {d}", self.rank())));
        }
        Ok(SpectralTruncation {
            eigenvalues: self.eigenvalues[..d].to_vec(),
            eigenvectors: self.eigenvectors.columns(0, d).into_owned(),
        })
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        low_rank_product(&self.eigenvectors, &self.eigenvalues)
    }
}

/// `V diag(λ) Vᵀ`, with the upper triangle mirrored so the result is exactly
/// symmetric.
pub fn low_rank_product(vectors: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (mut col, &lambda) in scaled.column_iter_mut().zip(values) {
        col *= lambda;
    }
    let mut out = &scaled * vectors.transpose();
    let t = out.nrows();
    for p in 0..t {
        for q in (p + 1)..t {
            out[(q, p)] = out[(p, q)];
        }
    }
    out
}

fn full_eigen(a: &GramMatrix) -> Result<SpectralTruncation> {
    let m = a.as_matrix();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("matrix has non-finite entries"));
    }
    let eig = SymmetricEigen::try_new(m.clone(), EIG_EPS, EIG_MAX_ITER).ok_or_else(|| Error::Numerical {
        message: format!("symmetric eigensolver did not converge on a {}x{} matrix", m.nrows(), m.ncols()),
        iterations: EIG_MAX_ITER,
    })?;

    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SpectralTruncation { eigenvalues, eigenvectors })
}

/// The full spectrum, descending, with eigenvectors.
pub fn sym_eig_full(a: &GramMatrix) -> Result<SpectralTruncation> {
    full_eigen(a)
}

/// The `d` algebraically largest eigenpairs of `a`.
///
/// Always runs a dense decomposition and truncates; there is no iterative
/// path.
pub fn sym_eig_topd(a: &GramMatrix, d: usize) -> Result<SpectralTruncation> {
    let t = a.order();
    if d == 0 || d > t {
        return Err(Error::input(format!("requested {d} eigenpairs of a {t}x{t} matrix")));
    }
    full_eigen(a)?.truncate(d)
}

/// Principal angles between two `D`-dimensional subspaces of `R^T`.
///
/// Cosines come from the singular values of `VᵀW`; sines from those of
/// `(I − VVᵀ)W`, which keeps small angles accurate where `√(1 − cos²)` would
/// bottom out near `1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceAngles {
    /// Clamped to `[0, 1]`, non-increasing.
    pub cosines: Vec<f64>,
    /// Clamped to `[0, 1]`, non-decreasing (paired with `cosines`).
    pub sines: Vec<f64>,
}

impl SubspaceAngles {
    pub fn rank(&self) -> usize {
        self.cosines.len()
    }

    /// Angles in radians, non-decreasing.
    pub fn angles(&self) -> Vec<f64> {
        self.sines.iter().zip(&self.cosines).map(|(s, c)| s.atan2(*c)).collect()
    }

    /// `‖sin Θ‖_F`.
    pub fn frobenius_sin(&self) -> f64 {
        self.sines.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn check_orthonormal(name: &str, v: &DMatrix<f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::input(format!("{name} has non-finite entries")));
    }
    let gram = v.transpose() * v;
    let d = gram.nrows();
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (gram[(i, j)] - target).abs();
            if dev > ORTHONORMAL_TOL {
                return Err(Error::input(format!("{name} columns are not orthonormal (deviation {dev:.3e} at ({i}, {j}))")));
            }
        }
    }
    Ok(())
}

fn check_pair(v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<()> {
    if v.shape() != w.shape() {
        return Err(Error::input(format!("subspace bases differ in shape: {:?} vs {:?}", v.shape(), w.shape())));
    }
    let (t, d) = v.shape();
    if d == 0 || d > t {
        return Err(Error::input(format!("subspace basis must be T x D with 1 <= D <= T, got {t}x{d}")));
    }
    check_orthonormal("first basis", v)?;
    check_orthonormal("second basis", w)
}

/// sin-Θ distance between the column spans of `v` and `w`.
pub fn sin_theta(v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SubspaceAngles> {
    check_pair(v, w)?;
    let cross = v.transpose() * w;
    let mut cosines: Vec<f64> = cross.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    let residual = w - v * &cross;
    let d = v.ncols();
    let mut sines: Vec<f64> = residual.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sines.sort_by(|a, b| a.total_cmp(b));
    sines.truncate(d);
    Ok(SubspaceAngles { cosines, sines })
}

/// `D − ‖VᵀW‖_F²`, which equals `‖sin Θ(V, W)‖_F²`.
pub fn subspace_error(v_gt: &DMatrix<f64>, v_hat: &DMatrix<f64>) -> Result<f64> {
    check_pair(v_gt, v_hat)?;
    let cross = v_gt.transpose() * v_hat;
    let d = v_gt.ncols() as f64;
    Ok((d - cross.norm_squared()).max(0.0))
}
