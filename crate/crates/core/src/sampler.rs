//! Deterministic probability-flow ODE sampling with Heun's method.
//!
//! Integration runs in σ-space. For VE schedules `dx/dσ = (x − D(x; σ))/σ`;
//! for VP schedules the state carries the scale `s(t)` and the drift picks up
//! the extra `ṡ/(s·σ̇)·x` term with the denoiser evaluated at `x/s`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::write_rows;
use crate::error::{Error, Result};
use crate::oracle::Denoiser;
use crate::par;
use crate::schedule::{DiffusionSchedule, Formulation};
use crate::transforms::{condition_vector, AugKind, AugmentationConfig, AugmentationParams, ImageShape};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    /// `None` samples with the all-zero condition vector.
    pub condition: Option<AugmentationParams>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 18, sigma_max: 80.0, sigma_min: 0.002, rho: 7.0, condition: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParam("n_steps must be at least 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidParam(format!("need sigma_max > sigma_min > 0, got {} and {}", self.sigma_max, self.sigma_min)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParam(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// The condition vector held fixed along every trajectory.
    pub fn condition_vector(&self, aug: &AugmentationConfig, cond_dim: usize) -> Result<Vec<f64>> {
        match &self.condition {
            None => Ok(vec![0.0; cond_dim]),
            Some(p) => {
                if cond_dim == 0 {
                    return Err(Error::InvalidParam(format!("condition `{p}` given to a denoiser trained without conditioning")));
                }
                if p.kind() != AugKind::Identity && !aug.effective_kinds().contains(&p.kind()) {
                    return Err(Error::InvalidParam(format!("condition `{p}` uses a kind the denoiser was not trained with")));
                }
                aug.validate(p)?;
                let v = condition_vector(p, aug);
                if v.len() != cond_dim {
                    return Err(Error::Dimension(format!("condition vector of length {} for a denoiser expecting {cond_dim}", v.len())));
                }
                Ok(v)
            }
        }
    }
}

/// Descending noise levels `σ₀ = σ_max, …, σ_{n−1} = σ_min, σ_n = 0`.
pub fn sigma_steps(cfg: &SamplerConfig) -> Vec<f64> {
    let n = cfg.n_steps;
    if n == 1 {
        return vec![cfg.sigma_max, 0.0];
    }
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut out: Vec<f64> = (0..n).map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho)).collect();
    out.push(0.0);
    out
}

fn drift(den: &dyn Denoiser, schedule: &DiffusionSchedule, x: &[f64], sigma: f64, cond: &[f64]) -> Vec<f64> {
    match schedule.formulation {
        Formulation::Ve => {
            let d = den.denoise(x, sigma, cond);
            x.iter().zip(d).map(|(xi, di)| (xi - di) / sigma).collect()
        }
        Formulation::Vp => {
            let t = schedule.sigma_inv(sigma);
            let s = schedule.scale(t);
            let ratio = schedule.scale_deriv(t) / (s * schedule.sigma_deriv(t));
            let xs: Vec<f64> = x.iter().map(|v| v / s).collect();
            let d = den.denoise(&xs, sigma, cond);
            x.iter().zip(d).map(|(xi, di)| (ratio + 1.0 / sigma) * xi - s / sigma * di).collect()
        }
    }
}

/// Integrates one trajectory along an arbitrary descending grid. Heun
/// correction is applied on every step whose end point is above zero.
pub fn heun_integrate(den: &dyn Denoiser, schedule: &DiffusionSchedule, x0: &[f64], sigmas: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    for (step, w) in sigmas.windows(2).enumerate() {
        let (cur, next) = (w[0], w[1]);
        let h = next - cur;
        let d = drift(den, schedule, &x, cur, cond);
        let euler: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + h * di).collect();
        x = if next > 0.0 {
            let d2 = drift(den, schedule, &euler, next, cond);
            x.iter().zip(d.iter().zip(&d2)).map(|(xi, (a, b))| xi + 0.5 * h * (a + b)).collect()
        } else {
            euler
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
    }
    if schedule.formulation == Formulation::Vp {
        let last = *sigmas.last().unwrap_or(&0.0);
        if last > 0.0 {
            let s = schedule.scale(schedule.sigma_inv(last));
            x.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(x)
}

/// Draws `count` initial points and integrates each to σ = 0. Trajectory `i`
/// takes its initial noise from its own stream so results do not depend on
/// how trajectories are scheduled.
pub fn heun_sample<R: Rng + ?Sized>(
    den: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    cond: &[f64],
    rng: &mut R,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let sigmas = sigma_steps(cfg);
    let init_scale = match schedule.formulation {
        Formulation::Ve => cfg.sigma_max,
        Formulation::Vp => schedule.scale(schedule.sigma_inv(cfg.sigma_max)) * cfg.sigma_max,
    };
    let base: u64 = rng.random();
    let d = den.dim();
    par::map_indices(count, |i| {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(i as u64);
        let x0: Vec<f64> = (0..d).map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            init_scale * z
        }).collect();
        heun_integrate(den, schedule, &x0, &sigmas, cond)
    })
    .into_iter()
    .collect()
}

/// Writes samples in the dataset text format and, for image-shaped data, one
/// 8-bit PGM per sample.
pub fn write_samples(dir: &Path, stem: &str, samples: &[Vec<f64>], shape: ImageShape) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let dim = shape.dim();
    let file = dir.join(format!("{stem}.txt"));
    fs::write(&file, write_rows(samples, dim))?;
    if shape.height > 1 && shape.width > 1 {
        let img_dir = dir.join(stem);
        fs::create_dir_all(&img_dir)?;
        for (i, s) in samples.iter().enumerate() {
            fs::write(img_dir.join(format!("{i:04}.pgm")), to_pgm(s, shape))?;
        }
    }
    Ok(file)
}

/// Binary PGM with channels stacked vertically; values in `[−1, 1]` map
/// linearly onto `0..=255` and are clamped.
pub fn to_pgm(x: &[f64], shape: ImageShape) -> Vec<u8> {
    let rows = shape.height * shape.channels;
    let mut out = format!("P5\n{} {}\n255\n", shape.width, rows).into_bytes();
    out.extend(x.iter().map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
    out
}

/// Samples grouped by the rotation condition they were generated under.
#[derive(Debug, Clone)]
pub struct ConditionGroup {
    pub params: AugmentationParams,
    pub samples: Vec<Vec<f64>>,
}

/// Samples once per rotation condition, with identical initial noise across
/// groups. When `out_dir` is given each group goes to `rotation_<k>.txt`.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_generation_sweep(
    den: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    aug: &AugmentationConfig,
    cond_dim: usize,
    rotations: &[u8],
    count: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<ConditionGroup>> {
    let mut groups = Vec::with_capacity(rotations.len());
    for &k in rotations {
        let params = AugmentationParams::Rotation { quarter_turns: k };
        let run = SamplerConfig { condition: Some(params), ..cfg.clone() };
        let cond = run.condition_vector(aug, cond_dim)?;
        let samples = heun_sample(den, &run, schedule, &cond, &mut ChaCha8Rng::seed_from_u64(seed), count)?;
        if let Some(dir) = out_dir {
            write_samples(dir, &format!("rotation_{k}"), &samples, aug.shape)?;
        }
        groups.push(ConditionGroup { params, samples });
    }
    Ok(groups)
}
