//! Numerical checks of how scores transform under smooth surjective maps
//! `T: ℝⁿ → ℝᵐ`, and of the row-divergence identity used in the proof.
//!
//! The data density is always the Gaussian-smoothed empirical distribution
//! `p(x;σ) = (1/N) Σ 𝒩(x; xᵢ, σ²I)`. Each check computes the left side (the
//! score of the pushforward density) by finite differences of an exact or
//! quadrature-based log-density, and the right side from the transformation
//! rule, so the two routes share nothing but the dataset.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::EmpiricalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle;
use crate::par;

/// Step for first-order central differences.
pub const FD_STEP: f64 = 1e-5;
/// Step for differences of an already differentiated quantity.
pub const FD_STEP_NESTED: f64 = 1e-4;
/// Smallest singular value accepted as full row rank.
pub const MIN_SINGULAR: f64 = 1e-6;
pub const MIN_MC_SAMPLES: usize = 1000;
pub const MIN_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    LinearSurjection,
    ElementwiseDiffeo,
    ProjectionOfDiffeo,
}

/// A smooth map with an analytic Jacobian.
///
/// Diffeomorphisms are elementwise `φ(x) = x + a·tanh(x)` with `|a| < 1`; the
/// projection kind keeps the first `m` coordinates of `φ(x)`.
#[derive(Debug, Clone)]
pub struct SmoothMap {
    kind: MapKind,
    n: usize,
    m: usize,
    matrix: Option<DMatrix<f64>>,
    strength: f64,
    /// When false, [`SmoothMap::jacobian`] falls back to central differences.
    pub analytic_jacobian: bool,
}

impl SmoothMap {
    pub fn linear(t: DMatrix<f64>) -> Self {
        Self {
            kind: MapKind::LinearSurjection,
            n: t.ncols(),
            m: t.nrows(),
            matrix: Some(t),
            strength: 0.0,
            analytic_jacobian: true,
        }
    }

    pub fn elementwise(n: usize, a: f64) -> Result<Self> {
        check_strength(a)?;
        Ok(Self { kind: MapKind::ElementwiseDiffeo, n, m: n, matrix: None, strength: a, analytic_jacobian: true })
    }

    pub fn projection_of_diffeo(n: usize, m: usize, a: f64) -> Result<Self> {
        check_strength(a)?;
        if m > n || m == 0 {
            return Err(Error::Dimension(format!("projection to {m} of {n} coordinates")));
        }
        Ok(Self { kind: MapKind::ProjectionOfDiffeo, n, m, matrix: None, strength: a, analytic_jacobian: true })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    fn phi(&self, v: f64) -> f64 {
        v + self.strength * v.tanh()
    }

    fn dphi(&self, v: f64) -> f64 {
        let t = v.tanh();
        1.0 + self.strength * (1.0 - t * t)
    }

    fn d2phi(&self, v: f64) -> f64 {
        let t = v.tanh();
        -2.0 * self.strength * t * (1.0 - t * t)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            MapKind::LinearSurjection => linalg::mat_vec(self.matrix.as_ref().expect("linear map"), x),
            MapKind::ElementwiseDiffeo | MapKind::ProjectionOfDiffeo => {
                x[..self.m].iter().map(|&v| self.phi(v)).collect()
            }
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        if !self.analytic_jacobian {
            return self.jacobian_fd(x, FD_STEP);
        }
        match self.kind {
            MapKind::LinearSurjection => self.matrix.clone().expect("linear map"),
            MapKind::ElementwiseDiffeo | MapKind::ProjectionOfDiffeo => {
                let mut j = DMatrix::zeros(self.m, self.n);
                for k in 0..self.m {
                    j[(k, k)] = self.dphi(x[k]);
                }
                j
            }
        }
    }

    pub fn jacobian_fd(&self, x: &[f64], h: f64) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.m, self.n);
        for k in 0..self.n {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (self.eval(&a), self.eval(&b));
            for r in 0..self.m {
                j[(r, k)] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        j
    }

    /// `½∇ₓ log det(J Jᵀ)`, analytic.
    pub fn half_grad_log_gram_det(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        if self.kind != MapKind::LinearSurjection {
            for k in 0..self.m {
                g[k] = self.d2phi(x[k]) / self.dphi(x[k]);
            }
        }
        g
    }

    /// Per-coordinate inverse of `φ` by bisection on `[y − |a|, y + |a|]`.
    pub fn invert_coord(&self, y: f64) -> Result<f64> {
        let a = self.strength.abs();
        let (mut lo, mut hi) = (y - a - 1e-12, y + a + 1e-12);
        if !(self.phi(lo) <= y && self.phi(hi) >= y) {
            return Err(Error::Inversion(format!("no bracket for y = {y}")));
        }
        if self.strength == 0.0 {
            return Ok(y);
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.phi(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        if !x.is_finite() {
            return Err(Error::Inversion(format!("non-finite inverse for y = {y}")));
        }
        Ok(x)
    }

    fn check_full_rank_at(&self, x: &[f64]) -> Result<()> {
        let smin = min_singular(&self.jacobian(x));
        if smin > MIN_SINGULAR {
            Ok(())
        } else {
            Err(Error::RankDeficient(format!("smallest singular value {smin:.3e} of the {}×{} Jacobian", self.m, self.n)))
        }
    }
}

fn check_strength(a: f64) -> Result<()> {
    if a.abs() < 1.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("diffeomorphism strength {a} not in (-1, 1)")))
    }
}

fn min_singular(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    if m.nrows() > m.ncols() {
        // more rows than columns can never have full row rank
        return 0.0;
    }
    sv.min()
}

/// Both sides of a transformation identity and their discrepancy.
#[derive(Debug, Clone)]
pub struct Report {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub abs_err: f64,
    pub rel_err: f64,
}

impl Report {
    fn new(lhs: Vec<f64>, rhs: Vec<f64>) -> Self {
        let abs_err = linalg::sq_dist(&lhs, &rhs).sqrt();
        let nl = linalg::norm(&lhs);
        let rel_err = if nl > 0.0 { abs_err / nl } else { abs_err };
        Self { lhs, rhs, abs_err, rel_err }
    }
}

fn central_gradient(f: impl Fn(&[f64]) -> Result<f64>, y: &[f64], h: f64) -> Result<Vec<f64>> {
    (0..y.len())
        .map(|k| {
            let mut a = y.to_vec();
            let mut b = y.to_vec();
            a[k] += h;
            b[k] -= h;
            Ok((f(&a)? - f(&b)?) / (2.0 * h))
        })
        .collect()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("noise level must be positive, got {sigma}")))
    }
}

/// Linear surjection `y = 𝐓x`: compares the finite-difference score of the
/// pushforward mixture `(1/N) Σ 𝒩(y; 𝐓xᵢ, σ²𝐓𝐓ᵀ)` against
/// `(𝐓𝐓ᵀ)⁻¹𝐓·E[∇ₓ log p(x;σ) | 𝐓x = y]`, the expectation estimated by exact
/// sampling from the per-component Gaussian conditionals.
pub fn verify_linear_surjection(
    t: &DMatrix<f64>,
    ds: &EmpiricalDataset,
    sigma: f64,
    y: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Report> {
    check_sigma(sigma)?;
    let (m, n) = t.shape();
    if n != ds.dim() || y.len() != m {
        return Err(Error::Dimension(format!("T is {m}×{n}, data has dimension {}, y has length {}", ds.dim(), y.len())));
    }
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::InvalidParam(format!("n_mc = {n_mc} below the minimum of {MIN_MC_SAMPLES}")));
    }
    let smin = min_singular(t);
    if smin <= MIN_SINGULAR {
        return Err(Error::RankDeficient(format!("T has smallest singular value {smin:.3e}")));
    }
    let gram = t * t.transpose();
    let (gram_inv, logdet) = linalg::spd_inverse(&gram).ok_or_else(|| Error::RankDeficient("T Tᵀ is not positive definite".into()))?;
    let images: Vec<Vec<f64>> = ds.points().iter().map(|p| linalg::mat_vec(t, p)).collect();
    let s2 = sigma * sigma;
    let quad = |v: &[f64]| -> Vec<f64> {
        images
            .iter()
            .map(|yi| {
                let diff = linalg::sub(v, yi);
                -0.5 * linalg::dot(&diff, &linalg::mat_vec(&gram_inv, &diff)) / s2
            })
            .collect()
    };
    let log_p = |v: &[f64]| -> Result<f64> {
        let c = -(images.len() as f64).ln() - 0.5 * m as f64 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * logdet;
        Ok(linalg::log_sum_exp(&quad(v)) + c)
    };
    let lhs = central_gradient(log_p, y, FD_STEP)?;

    // p(x|y) = Σᵢ πᵢ 𝒩(mᵢ, σ²(I − 𝐓ᵀ(𝐓𝐓ᵀ)⁻¹𝐓))
    let pinv_right = t.transpose() * &gram_inv;
    let null_proj = DMatrix::<f64>::identity(n, n) - &pinv_right * t;
    let weights = linalg::softmax(&quad(y));
    let means: Vec<Vec<f64>> = ds
        .points()
        .iter()
        .zip(&images)
        .map(|(xi, yi)| {
            let corr = linalg::mat_vec(&pinv_right, &linalg::sub(y, yi));
            xi.iter().zip(corr).map(|(a, b)| a + b).collect()
        })
        .collect();
    // stratified over components: every component gets an equal share of the
    // draws and its sample mean enters with its posterior weight
    let n_comp = means.len();
    const CHUNK: usize = 4096;
    let partials = par::map_chunks(n_mc, CHUNK, |range| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (range.start as u64 / CHUNK as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut acc = vec![vec![0.0; n]; n_comp];
        let mut counts = vec![0usize; n_comp];
        for s in range {
            let i = s % n_comp;
            counts[i] += 1;
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let off = linalg::mat_vec(&null_proj, &eps);
            let x: Vec<f64> = means[i].iter().zip(off).map(|(a, b)| a + sigma * b).collect();
            for (a, v) in acc[i].iter_mut().zip(oracle::score_original(&x, sigma, ds)) {
                *a += v;
            }
        }
        (acc, counts)
    });
    let mut sums = vec![vec![0.0; n]; n_comp];
    let mut counts = vec![0usize; n_comp];
    for (acc, c) in partials {
        for i in 0..n_comp {
            counts[i] += c[i];
            for (a, v) in sums[i].iter_mut().zip(&acc[i]) {
                *a += v;
            }
        }
    }
    let mut mean_score = vec![0.0; n];
    for i in 0..n_comp {
        for (a, v) in mean_score.iter_mut().zip(&sums[i]) {
            *a += weights[i] * v / counts[i] as f64;
        }
    }
    let rhs = linalg::mat_vec(&(&gram_inv * t), &mean_score);
    Ok(Report::new(lhs, rhs))
}

fn invert_all(map: &SmoothMap, y: &[f64]) -> Result<Vec<f64>> {
    y.iter().map(|&v| map.invert_coord(v)).collect()
}

/// Square elementwise diffeomorphism: finite differences of
/// `log p_X(T⁻¹y) − log|det J(T⁻¹y)|` against
/// `J⁻ᵀ(∇ₓ log p(x;σ) − ∇ₓ log|det J|)`.
pub fn verify_diffeomorphism(map: &SmoothMap, ds: &EmpiricalDataset, sigma: f64, y: &[f64]) -> Result<Report> {
    check_sigma(sigma)?;
    if map.kind() != MapKind::ElementwiseDiffeo {
        return Err(Error::InvalidParam("diffeomorphism check needs an elementwise diffeomorphism".into()));
    }
    if map.input_dim() != ds.dim() || y.len() != map.output_dim() {
        return Err(Error::Dimension("map, data and point dimensions disagree".into()));
    }
    let log_py = |v: &[f64]| -> Result<f64> {
        let x = invert_all(map, v)?;
        let logdet: f64 = x.iter().map(|&xi| map.dphi(xi).abs().ln()).sum();
        Ok(oracle::log_density(&x, sigma, ds) - logdet)
    };
    let lhs = central_gradient(log_py, y, FD_STEP)?;

    let x = invert_all(map, y)?;
    map.check_full_rank_at(&x)?;
    let j = map.jacobian(&x);
    let jinv_t = j.clone().try_inverse().ok_or_else(|| Error::RankDeficient("Jacobian not invertible".into()))?.transpose();
    let score = oracle::score_original(&x, sigma, ds);
    let ld = map.half_grad_log_gram_det(&x);
    let inner: Vec<f64> = score.iter().zip(ld).map(|(a, b)| a - b).collect();
    let rhs = linalg::mat_vec(&jinv_t, &inner);
    Ok(Report::new(lhs, rhs))
}

/// General surjection `T = (first m coordinates) ∘ φ`: the fiber over `y` is
/// parameterized by the trailing `n − m` input coordinates and every
/// expectation and marginal is computed by midpoint quadrature on that fiber.
pub fn verify_general(map: &SmoothMap, ds: &EmpiricalDataset, sigma: f64, y: &[f64], grid: usize) -> Result<Report> {
    check_sigma(sigma)?;
    if map.kind() != MapKind::ProjectionOfDiffeo {
        return Err(Error::InvalidParam("general check needs a projection of a diffeomorphism".into()));
    }
    let (n, m) = (map.input_dim(), map.output_dim());
    if m >= n {
        return Err(Error::Dimension(format!("general check needs m < n, got m = {m}, n = {n}")));
    }
    if n > 3 {
        return Err(Error::Dimension(format!("fiber quadrature supports n ≤ 3, got {n}")));
    }
    if grid < MIN_GRID {
        return Err(Error::InvalidParam(format!("grid resolution {grid} below {MIN_GRID}")));
    }
    if ds.dim() != n || y.len() != m {
        return Err(Error::Dimension("map, data and point dimensions disagree".into()));
    }
    let k = n - m;
    let axes: Vec<Vec<f64>> = (m..n)
        .map(|c| {
            let lo = ds.points().iter().map(|p| p[c]).fold(f64::INFINITY, f64::min) - 10.0 * sigma;
            let hi = ds.points().iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max) + 10.0 * sigma;
            let h = (hi - lo) / grid as f64;
            (0..grid).map(|i| lo + (i as f64 + 0.5) * h).collect()
        })
        .collect();
    let cell: f64 = axes.iter().map(|a| a[1] - a[0]).product();
    let total = grid.pow(k as u32);
    let fiber_point = |head: &[f64], idx: usize| -> Vec<f64> {
        let mut x = head.to_vec();
        let mut r = idx;
        for axis in &axes {
            x.push(axis[r % grid]);
            r /= grid;
        }
        x
    };

    let log_py = |v: &[f64]| -> Result<f64> {
        let head = invert_all(map, v)?;
        let jac: f64 = head.iter().map(|&h| map.dphi(h).ln()).sum();
        let logs: Vec<f64> = (0..total).map(|i| oracle::log_density(&fiber_point(&head, i), sigma, ds)).collect();
        Ok(linalg::log_sum_exp(&logs) + cell.ln() - jac)
    };
    let lhs = central_gradient(log_py, y, FD_STEP)?;

    let head = invert_all(map, y)?;
    let logs: Vec<f64> = (0..total).map(|i| oracle::log_density(&fiber_point(&head, i), sigma, ds)).collect();
    let w = linalg::softmax(&logs);
    let mut rhs = vec![0.0; m];
    for (i, wi) in w.iter().enumerate() {
        if *wi < 1e-300 {
            continue;
        }
        let x = fiber_point(&head, i);
        let j = map.jacobian(&x);
        let jj = &j * j.transpose();
        let dagger = jj.try_inverse().ok_or_else(|| Error::RankDeficient("J Jᵀ singular on fiber".into()))? * &j;
        let score = oracle::score_original(&x, sigma, ds);
        let ld = map.half_grad_log_gram_det(&x);
        let inner: Vec<f64> = score.iter().zip(ld).map(|(a, b)| a - b).collect();
        for (r, v) in rhs.iter_mut().zip(linalg::mat_vec(&dagger, &inner)) {
            *r += wi * v;
        }
    }
    Ok(Report::new(lhs, rhs))
}

/// Both sides of the row-divergence identity at one point.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub lhs_vector: Vec<f64>,
    pub rhs_vector: Vec<f64>,
    pub max_abs_err: f64,
}

/// `Div_rows((J J ᵀ)⁻¹J) = −(J Jᵀ)⁻¹J · ½∇ₓ log det(J Jᵀ)`, with every
/// derivative of the Jacobian field taken by central differences.
pub fn divergence_identity_check(map: &SmoothMap, x: &[f64]) -> Result<DivergenceReport> {
    let (n, m) = (map.input_dim(), map.output_dim());
    if x.len() != n {
        return Err(Error::Dimension(format!("point of length {} for a map on ℝ^{n}", x.len())));
    }
    map.check_full_rank_at(x)?;
    let dagger_t = |p: &[f64]| -> Result<DMatrix<f64>> {
        let j = map.jacobian(p);
        let jj = &j * j.transpose();
        Ok(jj.try_inverse().ok_or_else(|| Error::RankDeficient("J Jᵀ singular".into()))? * j)
    };
    let log_gram_det = |p: &[f64]| -> Result<f64> {
        let j = map.jacobian(p);
        let (_, ld) = linalg::spd_inverse(&(&j * j.transpose())).ok_or_else(|| Error::RankDeficient("J Jᵀ not positive definite".into()))?;
        Ok(ld)
    };
    let h = FD_STEP_NESTED;
    let mut lhs = vec![0.0; m];
    for k in 0..n {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        let (ma, mb) = (dagger_t(&a)?, dagger_t(&b)?);
        for (i, l) in lhs.iter_mut().enumerate() {
            *l += (ma[(i, k)] - mb[(i, k)]) / (2.0 * h);
        }
    }
    let half_grad: Vec<f64> = central_gradient(log_gram_det, x, h)?.into_iter().map(|g| 0.5 * g).collect();
    let rhs: Vec<f64> = linalg::mat_vec(&dagger_t(x)?, &half_grad).into_iter().map(|v| -v).collect();
    let max_abs_err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DivergenceReport { lhs_vector: lhs, rhs_vector: rhs, max_abs_err })
}
