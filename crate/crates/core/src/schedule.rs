//! Noise schedules, the noise-level prior, loss weighting and the denoiser
//! preconditioning coefficients.
//!
//! The drift `f(t)` and diffusion `g(t)` of the forward SDE are never
//! represented directly; everything is expressed through the scale `s(t)` and
//! the noise level `σ(t)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Mean of `ln σ` under the training noise prior.
pub const LOG_SIGMA_MEAN: f64 = -1.2;
/// Standard deviation of `ln σ` under the training noise prior.
pub const LOG_SIGMA_STD: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Variance exploding: `s(t) = 1`, `σ(t) = √t`.
    Ve,
    /// Variance preserving: `s(t)² (1 + σ(t)²) = 1`.
    Vp,
}

impl Formulation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ve" => Ok(Formulation::Ve),
            "vp" => Ok(Formulation::Vp),
            other => Err(Error::InvalidParam(format!("unknown formulation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Ve => "ve",
            Formulation::Vp => "vp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub formulation: Formulation,
    pub sigma_data: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub vp_beta_d: f64,
    pub vp_beta_min: f64,
}

impl DiffusionSchedule {
    pub fn ve(sigma_data: f64) -> Self {
        Self {
            formulation: Formulation::Ve,
            sigma_data,
            t_min: 1e-5,
            t_max: 1.0,
            vp_beta_d: 19.9,
            vp_beta_min: 0.1,
        }
    }

    pub fn vp(sigma_data: f64) -> Self {
        Self { formulation: Formulation::Vp, ..Self::ve(sigma_data) }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.formulation {
            Formulation::Ve => t.sqrt(),
            Formulation::Vp => (self.vp_exponent(t).exp_m1()).sqrt(),
        }
    }

    pub fn scale(&self, t: f64) -> f64 {
        match self.formulation {
            Formulation::Ve => 1.0,
            Formulation::Vp => (-0.5 * self.vp_exponent(t)).exp(),
        }
    }

    pub fn sigma_deriv(&self, t: f64) -> f64 {
        match self.formulation {
            Formulation::Ve => 0.5 / t.sqrt(),
            Formulation::Vp => {
                let sig = self.sigma(t);
                0.5 * (self.vp_beta_d * t + self.vp_beta_min) * (sig * sig + 1.0) / sig
            }
        }
    }

    pub fn scale_deriv(&self, t: f64) -> f64 {
        match self.formulation {
            Formulation::Ve => 0.0,
            Formulation::Vp => {
                let s = self.scale(t);
                -s * s * s * self.sigma(t) * self.sigma_deriv(t)
            }
        }
    }

    /// The time at which the schedule reaches noise level `sigma`.
    pub fn sigma_inv(&self, sigma: f64) -> f64 {
        match self.formulation {
            Formulation::Ve => sigma * sigma,
            Formulation::Vp => {
                let (bd, bm) = (self.vp_beta_d, self.vp_beta_min);
                ((bm * bm + 2.0 * bd * sigma.powi(2).ln_1p()).sqrt() - bm) / bd
            }
        }
    }

    fn vp_exponent(&self, t: f64) -> f64 {
        0.5 * self.vp_beta_d * t * t + self.vp_beta_min * t
    }
}

/// `s·x0 + s·σ·noise`.
pub fn perturb(x0: &[f64], sigma: f64, s: f64, noise: &[f64]) -> Vec<f64> {
    x0.iter().zip(noise).map(|(x, n)| s * x + s * sigma * n).collect()
}

/// Draw from the log-normal noise prior.
pub fn sample_sigma<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let z: f64 = Normal::new(LOG_SIGMA_MEAN, LOG_SIGMA_STD).expect("valid normal").sample(rng);
    z.exp()
}

/// `λ(σ) = (σ² + σ_data²) / (σ·σ_data)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    check_positive(sigma, sigma_data)?;
    Ok((sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn preconditioning(sigma: f64, sigma_data: f64) -> Result<Preconditioning> {
    check_positive(sigma, sigma_data)?;
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let root = (s2 + d2).sqrt();
    Ok(Preconditioning {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / root,
        c_in: 1.0 / root,
        c_noise: sigma.ln() / 4.0,
    })
}

fn check_positive(sigma: f64, sigma_data: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!("noise level must be positive, got {sigma}")));
    }
    if !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(Error::InvalidParam(format!("sigma_data must be positive, got {sigma_data}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn log_grid(n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| 10f64.powf(-4.0 + 7.0 * i as f64 / (n - 1) as f64))
    }

    #[test]
    fn ve_is_sqrt_t() {
        let s = DiffusionSchedule::ve(0.5);
        for i in 1..=100 {
            let t = i as f64 / 100.0;
            assert_eq!(s.scale(t), 1.0);
            assert_eq!(s.sigma(t), t.sqrt());
            assert!((s.sigma_inv(s.sigma(t)) - t).abs() < 1e-15);
        }
    }

    #[test]
    fn vp_constraint_and_monotone() {
        let s = DiffusionSchedule::vp(0.5);
        let mut prev = 0.0;
        for i in 0..1000 {
            let t = s.t_min + (s.t_max - s.t_min) * i as f64 / 999.0;
            let (sc, sg) = (s.scale(t), s.sigma(t));
            assert!((sc * sc + sc * sc * sg * sg - 1.0).abs() < 1e-10);
            assert!(sg > prev);
            prev = sg;
            assert!((s.sigma_inv(sg) - t).abs() < 1e-9 * t.max(1e-3));
        }
    }

    #[test]
    fn vp_derivatives_match_differences() {
        let s = DiffusionSchedule::vp(0.5);
        for t in [0.01, 0.2, 0.5, 0.9] {
            let h = 1e-6;
            let ds = (s.sigma(t + h) - s.sigma(t - h)) / (2.0 * h);
            let dsc = (s.scale(t + h) - s.scale(t - h)) / (2.0 * h);
            assert!((ds - s.sigma_deriv(t)).abs() < 1e-6 * ds.abs());
            assert!((dsc - s.scale_deriv(t)).abs() < 1e-6 * dsc.abs().max(1e-3));
        }
    }

    #[test]
    fn perturb_cases() {
        let x0 = [1.0, -2.0, 0.5];
        let n = [0.3, 0.1, -1.0];
        assert_eq!(perturb(&x0, 0.0, 0.8, &n), vec![0.8, -1.6, 0.4]);
        assert_eq!(perturb(&[0.0; 3], 2.0, 1.0, &n), vec![0.6, 0.2, -2.0]);
        let neg: Vec<f64> = n.iter().map(|v| -v).collect();
        let a = perturb(&x0, 0.7, 0.9, &n);
        let b = perturb(&x0, 0.7, 0.9, &neg);
        for i in 0..3 {
            assert!(((a[i] + b[i]) / 2.0 - 0.9 * x0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn perturb_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (sigma, s) = (0.7, 0.8);
        let x0 = [1.0, -0.5];
        let n = 100_000;
        let mut acc = [[0.0; 2]; 2];
        let mut mean = [0.0; 2];
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                perturb(&x0, sigma, s, &e)
            })
            .collect();
        for x in &draws {
            for i in 0..2 {
                mean[i] += x[i] / n as f64;
            }
        }
        for x in &draws {
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        let target = s * s * sigma * sigma;
        for i in 0..2 {
            assert!((acc[i][i] / target - 1.0).abs() < 0.02);
            assert!((mean[i] - s * x0[i]).abs() < 0.01);
        }
        assert!(acc[0][1].abs() < 0.02 * target);
    }

    #[test]
    fn sigma_prior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let logs: Vec<f64> = (0..n).map(|_| sample_sigma(&mut rng)).inspect(|s| assert!(*s > 0.0)).map(f64::ln).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let std = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean + 1.2).abs() < 0.02, "mean {mean}");
        assert!((std - 1.2).abs() < 0.02, "std {std}");
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(loss_weight(0.5, 0.5).unwrap(), 8.0);
        let far = loss_weight(1e3, 0.5).unwrap();
        assert!((far / 4.0 - 1.0).abs() < 1e-3);
        assert!(loss_weight(0.0, 0.5).is_err());
        assert!(loss_weight(0.1, 0.0).is_err());
        for sigma in log_grid(200) {
            let p = preconditioning(sigma, 0.5).unwrap();
            let lam = loss_weight(sigma, 0.5).unwrap();
            assert!((lam * p.c_out * p.c_out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preconditioning_values() {
        let p = preconditioning(0.5, 0.5).unwrap();
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((p.c_in - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.c_noise, 0.5f64.ln() / 4.0);

        let tiny = preconditioning(1e-6, 0.5).unwrap();
        assert!((tiny.c_skip - 1.0).abs() < 1e-10);
        assert!(tiny.c_out < 1e-5);

        for sigma in log_grid(100) {
            let p = preconditioning(sigma, 0.5).unwrap();
            assert!((p.c_skip * (sigma * sigma + 0.25) - 0.25).abs() < 1e-12 * (1.0 + sigma * sigma));
        }
        assert!(preconditioning(0.0, 0.5).is_err());
    }
}
