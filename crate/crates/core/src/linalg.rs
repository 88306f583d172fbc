//! Small dense helpers on `&[f64]` vectors plus the SVD-backed pieces.

use nalgebra::{DMatrix, DVector};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let nb = norm(b);
    let diff = sq_dist(a, b).sqrt();
    if nb > 0.0 {
        diff / nb
    } else {
        diff
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized weights `exp(v) / Σ exp(v)`.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// Spectral pieces of a symmetric positive semi-definite matrix.
#[derive(Debug, Clone)]
pub struct PsdSpectrum {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    /// Sum of logs of the retained eigenvalues.
    pub log_pseudodet: f64,
    /// Orthonormal basis of the range, one column per retained eigenvalue.
    pub range_basis: DMatrix<f64>,
}

impl PsdSpectrum {
    pub fn projector(&self) -> DMatrix<f64> {
        &self.range_basis * self.range_basis.transpose()
    }
}

/// Relative rank tolerance applied to the largest singular value.
pub const RANK_RTOL: f64 = 1e-8;

/// Moore-Penrose pseudoinverse of a general matrix via SVD, singular values
/// below `RANK_RTOL · s_max` treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = RANK_RTOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Eigen-decomposition based spectrum of a symmetric PSD matrix.
pub fn psd_spectrum(g: &DMatrix<f64>) -> PsdSpectrum {
    let n = g.nrows();
    let eig = g.clone().symmetric_eigen();
    let smax = eig.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let tol = RANK_RTOL * smax;
    let keep: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > tol && eig.eigenvalues[k] > 0.0)
        .collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    let mut pinv = DMatrix::zeros(n, n);
    let mut lpd = 0.0;
    for (j, &k) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        basis.set_column(j, &v);
        let lam = eig.eigenvalues[k];
        pinv += (v * v.transpose()) / lam;
        lpd += lam.ln();
    }
    PsdSpectrum {
        pinv,
        rank: keep.len(),
        log_pseudodet: lpd,
        range_basis: basis,
    }
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse(g: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let ch = g.clone().cholesky()?;
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Some((ch.inverse(), logdet))
}
