//! Closed-form optimal denoisers, scores and log-densities for the empirical
//! (Dirac-mixture) data distribution, both in the original space and in the
//! space produced by a linear augmentation `𝐓`.
//!
//! All mixture sums are evaluated in log space. In the augmented space every
//! component shares the covariance `σ²𝐓𝐓ᵀ`, so the pseudo-determinant cancels
//! from the denoiser weights and is only needed by [`AugmentedOracle::log_density`].

use nalgebra::DMatrix;

use crate::dataset::EmpiricalDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, PsdSpectrum};
use crate::transforms::LinearOperator;

/// Relative tolerance for affine-support membership.
pub const SUPPORT_RTOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Anything that maps a noisy point to a clean estimate.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// `D(x; σ, ω)`; implementations without conditioning ignore `cond`.
    fn denoise(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Vec<f64>;
}

impl<F> Denoiser for (usize, F)
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn denoise(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Vec<f64> {
        (self.1)(x, sigma, cond)
    }
}

/// Posterior weights `wᵢ ∝ exp(−‖x−xᵢ‖²/(2σ²))`.
pub fn posterior_weights(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> Vec<f64> {
    let inv = 0.5 / (sigma * sigma);
    let logits: Vec<f64> = ds.points().iter().map(|p| -linalg::sq_dist(x, p) * inv).collect();
    linalg::softmax(&logits)
}

fn weighted_sum(weights: &[f64], points: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, p) in weights.iter().zip(points) {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    out
}

/// Posterior mean `E[x₀ | x]` under the empirical distribution.
pub fn optimal_denoiser(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> Vec<f64> {
    let w = posterior_weights(x, sigma, ds);
    weighted_sum(&w, ds.points(), ds.dim())
}

/// `(D(x;σ) − x)/σ²`.
pub fn score_original(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> Vec<f64> {
    let d = optimal_denoiser(x, sigma, ds);
    let s2 = sigma * sigma;
    d.iter().zip(x).map(|(a, b)| (a - b) / s2).collect()
}

/// `log (1/N) Σ 𝒩(x; xᵢ, σ²I)`.
pub fn log_density(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> f64 {
    let inv = 0.5 / (sigma * sigma);
    let logits: Vec<f64> = ds.points().iter().map(|p| -linalg::sq_dist(x, p) * inv).collect();
    let d = ds.dim() as f64;
    linalg::log_sum_exp(&logits) - (ds.len() as f64).ln() - 0.5 * d * (LN_2PI + 2.0 * sigma.ln())
}

/// Trace of the posterior covariance of `x₀` given `x`; its expectation is the
/// irreducible denoising loss.
pub fn posterior_variance(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> f64 {
    let w = posterior_weights(x, sigma, ds);
    let mean = weighted_sum(&w, ds.points(), ds.dim());
    w.iter().zip(ds.points()).map(|(wi, p)| wi * linalg::sq_dist(p, &mean)).sum()
}

/// Optimal denoiser of the empirical distribution, usable wherever a
/// [`Denoiser`] is expected.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub data: EmpiricalDataset,
}

impl OracleDenoiser {
    pub fn new(data: EmpiricalDataset) -> Self {
        Self { data }
    }
}

impl Denoiser for OracleDenoiser {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64, _cond: &[f64]) -> Vec<f64> {
        optimal_denoiser(x, sigma, &self.data)
    }
}

/// Exact denoiser for Gaussian data `𝒩(μ, τ²I)`; its score is affine.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Denoiser for GaussianDenoiser {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise(&self, x: &[f64], sigma: f64, _cond: &[f64]) -> Vec<f64> {
        let t2 = self.std * self.std;
        let k = t2 / (t2 + sigma * sigma);
        x.iter().zip(&self.mean).map(|(xi, m)| m + k * (xi - m)).collect()
    }
}

/// Degenerate Gaussian `𝒩(·, σ²𝐓𝐓ᵀ)` restricted to its support `Im(𝐓)`.
#[derive(Debug, Clone)]
pub struct DegenerateGaussianEval {
    pub gram: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    pub log_pseudodet: f64,
    pub support_projector: DMatrix<f64>,
}

/// Oracle quantities for the transformed dataset `{𝐓xᵢ}`.
#[derive(Debug, Clone)]
pub struct AugmentedOracle {
    op: LinearOperator,
    images: Vec<Vec<f64>>,
    spectrum: PsdSpectrum,
    projector: DMatrix<f64>,
}

impl AugmentedOracle {
    pub fn new(op: LinearOperator, ds: &EmpiricalDataset) -> Result<Self> {
        let (m, n) = op.dims();
        if n != ds.dim() {
            return Err(Error::Dimension(format!("operator takes {n} inputs, data has dimension {}", ds.dim())));
        }
        let images: Vec<Vec<f64>> = ds.points().iter().map(|p| op.apply(p)).collect();
        let spectrum = linalg::psd_spectrum(&op.gram());
        let projector = spectrum.projector();
        debug_assert_eq!(projector.nrows(), m);
        Ok(Self { op, images, spectrum, projector })
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.op
    }

    /// The transformed points `yᵢ = 𝐓xᵢ`.
    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    pub fn rank(&self) -> usize {
        self.spectrum.rank
    }

    /// Orthonormal basis of `Im(𝐓)`, one column per direction.
    pub fn support_basis(&self) -> &DMatrix<f64> {
        &self.spectrum.range_basis
    }

    pub fn support_projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn gram_pinv(&self) -> &DMatrix<f64> {
        &self.spectrum.pinv
    }

    pub fn degenerate_gaussian(&self, sigma: f64) -> DegenerateGaussianEval {
        let s2 = sigma * sigma;
        DegenerateGaussianEval {
            gram: self.op.gram() * s2,
            pinv: &self.spectrum.pinv / s2,
            rank: self.spectrum.rank,
            log_pseudodet: self.spectrum.log_pseudodet + self.spectrum.rank as f64 * s2.ln(),
            support_projector: self.projector.clone(),
        }
    }

    /// Residual of `y − y₁` off the support subspace.
    pub fn support_residual(&self, y: &[f64]) -> f64 {
        let diff = linalg::sub(y, &self.images[0]);
        let proj = linalg::mat_vec(&self.projector, &diff);
        linalg::sq_dist(&diff, &proj).sqrt()
    }

    pub fn check_support(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.op.dims().0 {
            return Err(Error::Dimension(format!("point of length {} for operator with {} outputs", y.len(), self.op.dims().0)));
        }
        let residual = self.support_residual(y);
        let tolerance = SUPPORT_RTOL * linalg::norm(y).max(1.0);
        if residual > tolerance {
            return Err(Error::OutOfSupport { residual, tolerance });
        }
        Ok(())
    }

    /// `qᵢ = (y−yᵢ)ᵀ(𝐓𝐓ᵀ)†(y−yᵢ)`, not yet divided by `σ²`.
    fn quad_forms(&self, y: &[f64]) -> Vec<f64> {
        self.images
            .iter()
            .map(|yi| {
                let diff = linalg::sub(y, yi);
                linalg::dot(&diff, &linalg::mat_vec(&self.spectrum.pinv, &diff))
            })
            .collect()
    }

    pub fn weights(&self, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_support(y)?;
        let inv = 0.5 / (sigma * sigma);
        let logits: Vec<f64> = self.quad_forms(y).iter().map(|q| -q * inv).collect();
        Ok(linalg::softmax(&logits))
    }

    pub fn denoise(&self, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let w = self.weights(y, sigma)?;
        Ok(weighted_sum(&w, &self.images, y.len()))
    }

    /// `(𝐓𝐓ᵀ)†(D(y;σ,ω) − y)/σ²`.
    pub fn score(&self, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let d = self.denoise(y, sigma)?;
        let r: Vec<f64> = d.iter().zip(y).map(|(a, b)| (a - b) / (sigma * sigma)).collect();
        Ok(linalg::mat_vec(&self.spectrum.pinv, &r))
    }

    /// Log-density with respect to Lebesgue measure on the support subspace.
    pub fn log_density(&self, y: &[f64], sigma: f64) -> Result<f64> {
        self.check_support(y)?;
        let r = self.spectrum.rank;
        if r == 0 {
            return Err(Error::RankDeficient("operator has rank zero; density undefined".into()));
        }
        let s2 = sigma * sigma;
        let logits: Vec<f64> = self.quad_forms(y).iter().map(|q| -0.5 * q / s2).collect();
        let lpd = self.spectrum.log_pseudodet + r as f64 * s2.ln();
        Ok(linalg::log_sum_exp(&logits) - (self.images.len() as f64).ln() - 0.5 * r as f64 * LN_2PI - 0.5 * lpd)
    }
}

pub fn optimal_denoiser_aug(y: &[f64], sigma: f64, op: &LinearOperator, ds: &EmpiricalDataset) -> Result<Vec<f64>> {
    AugmentedOracle::new(op.clone(), ds)?.denoise(y, sigma)
}

pub fn score_aug(y: &[f64], sigma: f64, op: &LinearOperator, ds: &EmpiricalDataset) -> Result<Vec<f64>> {
    AugmentedOracle::new(op.clone(), ds)?.score(y, sigma)
}

pub fn log_density_aug(y: &[f64], sigma: f64, op: &LinearOperator, ds: &EmpiricalDataset) -> Result<f64> {
    AugmentedOracle::new(op.clone(), ds)?.log_density(y, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{build_operator, AugmentationParams, ImageShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn random_ds(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmpiricalDataset {
        EmpiricalDataset::new((0..n).map(|_| randn(rng, d)).collect()).unwrap()
    }

    #[test]
    fn single_point_and_symmetry() {
        let one = EmpiricalDataset::new(vec![vec![0.3, -1.0]]).unwrap();
        assert_eq!(optimal_denoiser(&[5.0, 2.0], 0.1, &one), vec![0.3, -1.0]);
        let two = EmpiricalDataset::new(vec![vec![1.5, -0.5], vec![-1.5, 0.5]]).unwrap();
        let d = optimal_denoiser(&[0.0, 0.0], 0.7, &two);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        // no overflow at tiny σ
        let d = optimal_denoiser(&[1.4, -0.4], 1e-4, &two);
        assert_eq!(d, vec![1.5, -0.5]);
    }

    #[test]
    fn large_sigma_gives_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_ds(&mut rng, 12, 3).map(|p| p.iter().map(|v| v + 2.0).collect()).unwrap();
        let mean = ds.mean();
        let x = randn(&mut rng, 3);
        let d = optimal_denoiser(&x, 1e3, &ds);
        assert!(linalg::rel_err(&d, &mean) < 1e-3);
        let s = score_original(&x, 1e3, &ds);
        let approx: Vec<f64> = mean.iter().zip(&x).map(|(m, xi)| (m - xi) / 1e6).collect();
        assert!(linalg::rel_err(&s, &approx) < 1e-3);
    }

    #[test]
    fn score_of_single_gaussian() {
        let ds = EmpiricalDataset::new(vec![vec![0.0; 3]]).unwrap();
        let x = [0.5, -1.0, 2.0];
        let s = score_original(&x, 0.8, &ds);
        for i in 0..3 {
            assert!((s[i] + x[i] / 0.64).abs() < 1e-14);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = random_ds(&mut rng, 6, 4);
        for &sigma in &[0.3, 0.8, 2.0] {
            let x = randn(&mut rng, 4);
            let s = score_original(&x, sigma, &ds);
            let h = 1e-5;
            let fd: Vec<f64> = (0..4)
                .map(|k| {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[k] += h;
                    b[k] -= h;
                    (log_density(&a, sigma, &ds) - log_density(&b, sigma, &ds)) / (2.0 * h)
                })
                .collect();
            assert!(linalg::rel_err(&fd, &s) < 1e-4, "σ={sigma}");
        }
    }

    #[test]
    fn identity_operator_reduces_to_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_ds(&mut rng, 5, 4);
        let orc = AugmentedOracle::new(LinearOperator::identity(4), &ds).unwrap();
        let x = randn(&mut rng, 4);
        let a = orc.denoise(&x, 0.6).unwrap();
        assert!(linalg::rel_err(&a, &optimal_denoiser(&x, 0.6, &ds)) < 1e-13);
        let s = orc.score(&x, 0.6).unwrap();
        assert!(linalg::rel_err(&s, &score_original(&x, 0.6, &ds)) < 1e-12);
        assert!((orc.log_density(&x, 0.6).unwrap() - log_density(&x, 0.6, &ds)).abs() < 1e-12);
    }

    #[test]
    fn textbook_gaussian_log_density() {
        let ds = EmpiricalDataset::new(vec![vec![0.5, -0.5]]).unwrap();
        let orc = AugmentedOracle::new(LinearOperator::identity(2), &ds).unwrap();
        let (x, s) = ([1.0, 0.25], 0.7);
        let q = (0.5f64.powi(2) + 0.75f64.powi(2)) / (s * s);
        let expect = -0.5 * q - (2.0 * std::f64::consts::PI).ln() - 2.0 * f64::ln(s);
        assert!((orc.log_density(&x, s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn brightness_scaling_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = ImageShape::new(2, 2, 1);
        let ds = random_ds(&mut rng, 7, 4);
        for _ in 0..20 {
            let b = 0.5 + 1.5 * rand::Rng::random::<f64>(&mut rng);
            let op = build_operator(&AugmentationParams::Brightness { factor: b }, shape).unwrap();
            let x = randn(&mut rng, 4);
            let sigma = 0.2 + rand::Rng::random::<f64>(&mut rng);
            let y: Vec<f64> = x.iter().map(|v| v * b).collect();
            let lhs = optimal_denoiser_aug(&y, sigma, &op, &ds).unwrap();
            let rhs: Vec<f64> = optimal_denoiser(&x, sigma, &ds).iter().map(|v| v * b).collect();
            assert!(linalg::rel_err(&lhs, &rhs) < 1e-10);
            let sa = score_aug(&y, sigma, &op, &ds).unwrap();
            let so: Vec<f64> = score_original(&x, sigma, &ds).iter().map(|v| v / b).collect();
            assert!(linalg::rel_err(&sa, &so) < 1e-10);
        }
    }

    #[test]
    fn cutout_zeroes_and_kernel_free_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = ImageShape::new(4, 4, 1);
        let ds = random_ds(&mut rng, 5, 16);
        let op = build_operator(&AugmentationParams::Cutout { cx: 0.5, cy: 0.25, h: 2, w: 2 }, shape).unwrap();
        let orc = AugmentedOracle::new(op.clone(), &ds).unwrap();
        let x = randn(&mut rng, 16);
        let y = op.apply(&x);
        let masked: Vec<usize> = (0..16).filter(|&i| op.apply(&vec![1.0; 16])[i] == 0.0).collect();
        assert_eq!(masked.len(), 4);
        let d = orc.denoise(&y, 0.5).unwrap();
        let s = orc.score(&y, 0.5).unwrap();
        for &i in &masked {
            assert_eq!(d[i], 0.0);
            assert_eq!(s[i], 0.0);
        }
        let p = orc.support_projector();
        let off: Vec<f64> = s.iter().zip(linalg::mat_vec(p, &s)).map(|(a, b)| a - b).collect();
        assert!(linalg::norm(&off) <= 1e-10);
        // denoiser output stays on the affine support
        assert!(orc.support_residual(&d) <= SUPPORT_RTOL * linalg::norm(&d).max(1.0));

        let mut bad = y.clone();
        bad[masked[0]] = 0.3;
        assert!(matches!(orc.denoise(&bad, 0.5), Err(Error::OutOfSupport { .. })));
    }

    #[test]
    fn weights_form_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = ImageShape::new(3, 3, 1);
        let ds = random_ds(&mut rng, 9, 9);
        let op = build_operator(&AugmentationParams::Translation { di: 1, dj: -1 }, shape).unwrap();
        let orc = AugmentedOracle::new(op.clone(), &ds).unwrap();
        for _ in 0..50 {
            let y = op.apply(&randn(&mut rng, 9));
            let w = orc.weights(&y, 0.4).unwrap();
            assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_gaussian_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_ds(&mut rng, 3, 9);
        let op = build_operator(&AugmentationParams::Translation { di: 2, dj: 0 }, ImageShape::new(3, 3, 1)).unwrap();
        let orc = AugmentedOracle::new(op, &ds).unwrap();
        let g = orc.degenerate_gaussian(0.5);
        assert_eq!(g.rank, 3);
        let p = &g.support_projector;
        assert!((p * p - p).abs().max() < 1e-10);
        assert!((p.transpose() - p).abs().max() < 1e-10);
        assert!((&g.gram * &g.pinv * &g.gram - &g.gram).abs().max() < 1e-10);
        assert!((g.log_pseudodet - 3.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_normalizes_by_quadrature() {
        let ds = EmpiricalDataset::new(vec![vec![0.5, -1.0], vec![-1.5, 0.3], vec![1.0, 1.0]]).unwrap();
        let sigma = 0.8;
        let orc = AugmentedOracle::new(LinearOperator::identity(2), &ds).unwrap();
        let n = 400;
        let h = 20.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = [-10.0 + (i as f64 + 0.5) * h, -10.0 + (j as f64 + 0.5) * h];
                total += orc.log_density(&y, sigma).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}
