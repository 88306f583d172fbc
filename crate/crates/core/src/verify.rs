//! The verification suite: score-transformation checks and oracle invariants,
//! each reported as one row with its error and a pass/fail verdict.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::EmpiricalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::{self, AugmentedOracle};
use crate::par;
use crate::schedule::sample_sigma;
use crate::theorem::{self, SmoothMap};
use crate::transforms::{build_operator, AugmentationParams, ImageShape};

pub const CSV_HEADER: &str = "case,m,n,sigma,budget,abs_err,rel_err,status";

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub n_mc: usize,
    pub grid: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Additional linear maps to run through the linear-surjection check.
    pub extra_linear_maps: Vec<DMatrix<f64>>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { n_mc: 100_000, grid: 512, sigma: 0.6, seed: 0, extra_linear_maps: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub id: String,
    pub m: usize,
    pub n: usize,
    /// Noise level, or `None` when the case draws σ from the prior.
    pub sigma: Option<f64>,
    /// Monte Carlo sample count, grid resolution or number of trials.
    pub budget: usize,
    pub abs_err: f64,
    pub rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Set when the check could not run.
    pub error: Option<String>,
}

impl CaseResult {
    #[allow(clippy::too_many_arguments)]
    fn measured(id: &str, m: usize, n: usize, sigma: Option<f64>, budget: usize, abs_err: f64, err: f64, rel_err: f64, threshold: f64) -> Self {
        Self { id: id.into(), m, n, sigma, budget, abs_err, rel_err, threshold, passed: err < threshold, error: None }
    }

    fn failed(id: &str, m: usize, n: usize, sigma: Option<f64>, budget: usize, e: Error) -> Self {
        Self { id: id.into(), m, n, sigma, budget, abs_err: f64::NAN, rel_err: f64::NAN, threshold: f64::NAN, passed: false, error: Some(e.to_string()) }
    }

    pub fn csv_row(&self) -> String {
        let sigma = self.sigma.map_or("prior".to_string(), |s| s.to_string());
        let status = if self.passed { "pass" } else { "fail" };
        format!("{},{},{},{},{},{:e},{:e},{}", self.id, self.m, self.n, sigma, self.budget, self.abs_err, self.rel_err, status)
    }
}

pub fn to_csv(results: &[CaseResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn three_points() -> EmpiricalDataset {
    EmpiricalDataset::new(vec![vec![0.5, -0.3], vec![-1.0, 0.8], vec![1.4, 1.1]]).expect("valid points")
}

fn report_case(id: &str, m: usize, n: usize, sigma: f64, budget: usize, threshold: f64, r: Result<theorem::Report>) -> CaseResult {
    match r {
        Ok(r) => CaseResult::measured(id, m, n, Some(sigma), budget, r.abs_err, r.rel_err, r.rel_err, threshold),
        Err(e) => CaseResult::failed(id, m, n, Some(sigma), budget, e),
    }
}

fn divergence_case(id: &str, map: Result<SmoothMap>, x: &[f64]) -> CaseResult {
    let (m, n) = map.as_ref().map_or((0, x.len()), |m| (m.output_dim(), m.input_dim()));
    match map.and_then(|map| theorem::divergence_identity_check(&map, x)) {
        Ok(r) => {
            let scale = linalg::norm(&r.lhs_vector);
            let rel = if scale > 0.0 { r.max_abs_err / scale } else { r.max_abs_err };
            CaseResult::measured(id, m, n, None, 0, r.max_abs_err, r.max_abs_err, rel, 1e-3)
        }
        Err(e) => CaseResult::failed(id, m, n, None, 0, e),
    }
}

/// All checks of the score-transformation rule.
pub fn theorem_cases(cfg: &VerifyConfig) -> Vec<CaseResult> {
    let ds = three_points();
    let s = cfg.sigma;
    let mc_bound = 3.0 / (cfg.n_mc as f64).sqrt();
    let mut out = Vec::new();

    let id2 = DMatrix::<f64>::identity(2, 2);
    out.push(report_case("theorem.linear.identity", 2, 2, s, cfg.n_mc, 1e-8, theorem::verify_linear_surjection(&id2, &ds, s, &[0.2, 0.4], cfg.n_mc, cfg.seed)));
    let proj = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    out.push(report_case("theorem.linear.projection", 1, 2, s, cfg.n_mc, mc_bound, theorem::verify_linear_surjection(&proj, &ds, s, &[0.0], cfg.n_mc, cfg.seed)));
    let th: f64 = 0.7;
    let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
    out.push(report_case("theorem.linear.orthogonal", 2, 2, s, cfg.n_mc, 1e-6, theorem::verify_linear_surjection(&rot, &ds, s, &[0.3, -0.5], cfg.n_mc, cfg.seed)));
    for (k, t) in cfg.extra_linear_maps.iter().enumerate() {
        let (m, n) = t.shape();
        let id = format!("theorem.linear.extra{k}");
        let data = (n == 2).then(three_points).unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ k as u64);
            EmpiricalDataset::new((0..3).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()).expect("valid points")
        });
        let y = vec![0.0; m];
        out.push(report_case(&id, m, n, s, cfg.n_mc, mc_bound, theorem::verify_linear_surjection(t, &data, s, &y, cfg.n_mc, cfg.seed)));
    }

    let run_diffeo = |a: f64, ds: &EmpiricalDataset, y: &[f64]| SmoothMap::elementwise(ds.dim(), a).and_then(|m| theorem::verify_diffeomorphism(&m, ds, s, y));
    out.push(report_case("theorem.diffeo.identity", 2, 2, s, 0, 1e-8, run_diffeo(0.0, &ds, &[0.1, 0.2])));
    let one = EmpiricalDataset::new(vec![vec![0.4]]).expect("valid point");
    out.push(report_case("theorem.diffeo.scalar", 1, 1, s, 0, 1e-3, run_diffeo(0.5, &one, &[1.3])));
    let four = EmpiricalDataset::new(vec![vec![0.5, -0.3], vec![-1.0, 0.8], vec![1.4, 1.1], vec![0.0, -1.5]]).expect("valid points");
    out.push(report_case("theorem.diffeo.plane", 2, 2, s, 0, 1e-3, run_diffeo(0.3, &four, &[0.7, -0.2])));

    let two = EmpiricalDataset::new(vec![vec![0.5, -0.4], vec![-0.7, 0.9]]).expect("valid points");
    let run_general = |a: f64| SmoothMap::projection_of_diffeo(2, 1, a).and_then(|m| theorem::verify_general(&m, &two, s, &[0.2], cfg.grid));
    out.push(report_case("theorem.general.identity", 1, 2, s, cfg.grid, 1e-6, run_general(0.0)));
    out.push(report_case("theorem.general.plane", 1, 2, s, cfg.grid, 1e-2, run_general(0.3)));
    let cube = EmpiricalDataset::new(vec![vec![0.5, -0.4, 0.2], vec![-0.7, 0.9, -0.3], vec![0.1, 0.3, 1.0]]).expect("valid points");
    let coarse = (cfg.grid / 4).max(theorem::MIN_GRID);
    let r = SmoothMap::projection_of_diffeo(3, 1, 0.3).and_then(|m| theorem::verify_general(&m, &cube, s, &[0.2], coarse));
    out.push(report_case("theorem.general.volume", 1, 3, s, coarse, 1e-2, r));

    let lin = SmoothMap::linear(DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.2, 0.0, 1.0, 2.0]));
    out.push(divergence_case("theorem.divergence.linear", Ok(lin), &[0.3, 0.1, -0.4]));
    out.push(divergence_case("theorem.divergence.diffeo", SmoothMap::elementwise(2, 0.5), &[0.4, -0.9]));
    out.push(divergence_case("theorem.divergence.projection", SmoothMap::projection_of_diffeo(3, 2, 0.5), &[0.4, -0.9, 1.3]));
    out
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmpiricalDataset {
    EmpiricalDataset::new((0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()).expect("finite draws")
}

/// Largest relative error of `D_aug(𝐓x) = 𝐓·D(x)` over `trials` draws of
/// `(x, σ)`, with `x` a noisy data point and σ from the training prior.
pub fn equivariance_error(params: &AugmentationParams, shape: ImageShape, ds: &EmpiricalDataset, trials: usize, seed: u64) -> Result<f64> {
    let op = build_operator(params, shape)?;
    let orc = AugmentedOracle::new(op.clone(), ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<f64>, f64)> = (0..trials)
        .map(|_| {
            let sigma = sample_sigma(&mut rng);
            let base = &ds.points()[rng.random_range(0..ds.len())];
            (base.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect(), sigma)
        })
        .collect();
    let errs = par::map_indices(trials, |i| -> Result<f64> {
        let (x, sigma) = &draws[i];
        let lhs = orc.denoise(&op.apply(x), *sigma)?;
        let rhs = op.apply(&oracle::optimal_denoiser(x, *sigma, ds));
        Ok(linalg::rel_err(&lhs, &rhs))
    });
    errs.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

/// Largest relative error between the augmented score and central
/// differences of the augmented log-density along an orthonormal basis of
/// `Im(𝐓)`, over `trials` points `𝐓x`.
pub fn score_consistency_error(params: &AugmentationParams, shape: ImageShape, ds: &EmpiricalDataset, sigma: f64, trials: usize, seed: u64) -> Result<f64> {
    let op = build_operator(params, shape)?;
    let orc = AugmentedOracle::new(op.clone(), ds)?;
    let basis = orc.support_basis().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..trials)
        .map(|_| {
            let base = &ds.points()[rng.random_range(0..ds.len())];
            op.apply(&base.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
        })
        .collect();
    let h = 1e-5 * sigma.max(1e-3);
    let errs = par::map_indices(trials, |t| -> Result<f64> {
        let y = &points[t];
        let score = orc.score(y, sigma)?;
        let mut fd = Vec::with_capacity(basis.ncols());
        let mut proj = Vec::with_capacity(basis.ncols());
        for k in 0..basis.ncols() {
            let u: Vec<f64> = basis.column(k).iter().copied().collect();
            let plus: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            fd.push((orc.log_density(&plus, sigma)? - orc.log_density(&minus, sigma)?) / (2.0 * h));
            proj.push(linalg::dot(&u, &score));
        }
        // the score has no component outside Im(𝐓)
        let outside = linalg::sub(&score, &linalg::mat_vec(orc.support_projector(), &score));
        Ok(linalg::rel_err(&proj, &fd).max(linalg::norm(&outside) / linalg::norm(&score).max(1e-300)))
    });
    errs.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

/// Oracle invariants on 8×8 single-channel data.
pub fn oracle_cases(cfg: &VerifyConfig) -> Vec<CaseResult> {
    let shape = ImageShape::new(8, 8, 1);
    let d = shape.dim();
    let ds = random_dataset(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed), 10, d);
    let mut out = Vec::new();
    let trials = 100;
    for (name, params) in [("brightness", AugmentationParams::Brightness { factor: 1.7 }), ("rotation", AugmentationParams::Rotation { quarter_turns: 1 })] {
        let id = format!("oracle.equivariance.{name}");
        out.push(match equivariance_error(&params, shape, &ds, trials, cfg.seed) {
            Ok(e) => CaseResult::measured(&id, d, d, None, trials, f64::NAN, e, e, 1e-8),
            Err(e) => CaseResult::failed(&id, d, d, None, trials, e),
        });
    }
    let cases = [
        ("brightness", AugmentationParams::Brightness { factor: 0.6 }),
        ("translation", AugmentationParams::Translation { di: 1, dj: -2 }),
        ("cutout", AugmentationParams::Cutout { cx: 0.4, cy: 0.55, h: 4, w: 3 }),
        ("rotation", AugmentationParams::Rotation { quarter_turns: 3 }),
    ];
    let sigma = cfg.sigma;
    for (name, params) in cases {
        let id = format!("oracle.score_consistency.{name}");
        let trials = 5;
        out.push(match score_consistency_error(&params, shape, &ds, sigma, trials, cfg.seed) {
            Ok(e) => CaseResult::measured(&id, d, d, Some(sigma), trials, f64::NAN, e, e, 1e-4),
            Err(e) => CaseResult::failed(&id, d, d, Some(sigma), trials, e),
        });
    }
    out
}

/// The full suite, optionally restricted to cases whose id contains `filter`.
pub fn run_suite(cfg: &VerifyConfig, filter: Option<&str>) -> Vec<CaseResult> {
    let mut all = theorem_cases(cfg);
    all.extend(oracle_cases(cfg));
    match filter {
        Some(f) => all.into_iter().filter(|c| c.id.contains(f)).collect(),
        None => all,
    }
}
