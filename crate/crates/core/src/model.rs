//! Fully-connected denoiser `D_θ(x; σ, ω) = c_skip·x + c_out·F_θ(c_in·x; c_noise, ω)`
//! with hand-written reverse-mode gradients.
//!
//! The raw network `F_θ` reads the concatenation of `c_in·x` and an embedding
//! `e = sinusoid(c_noise) + W_c·ω`, passes it through SiLU hidden layers and a
//! final affine output layer. The condition map `W_c` has no bias, so an
//! all-zero condition vector leaves the network identical to one built without
//! conditioning.
//!
//! Parameter layout in the flat vector `θ`: for each affine layer in order
//! (hidden layers, then output) the weight matrix row-major `fan_out × fan_in`
//! followed by its bias; then `W_c` row-major `noise_embed_dim × cond_dim`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::oracle::Denoiser;
use crate::par;
use crate::schedule::{preconditioning, Preconditioning};

/// Highest frequency of the sinusoidal noise embedding.
pub const MAX_FREQUENCY: f64 = 32.0;
/// Second moment of `silu(z)` for `z ~ 𝒩(0, 1)`, used to keep hidden
/// pre-activations at unit variance.
const SILU_SECOND_MOMENT: f64 = 0.3557;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub noise_embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl NetConfig {
    pub fn new(data_dim: usize, cond_dim: usize) -> Self {
        Self { data_dim, cond_dim, noise_embed_dim: 32, hidden: vec![256; 3] }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::InvalidParam("data dimension must be positive".into()));
        }
        if self.noise_embed_dim == 0 || !self.noise_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("noise_embed_dim must be even and positive, got {}", self.noise_embed_dim)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParam("need at least one hidden layer of positive width".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer including the output layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.data_dim + self.noise_embed_dim;
        for &w in &self.hidden {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.data_dim));
        dims
    }

    pub fn affine_param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.affine_param_count() + self.noise_embed_dim * self.cond_dim
    }

    fn cond_offset(&self) -> usize {
        self.affine_param_count()
    }

    fn frequencies(&self) -> Vec<f64> {
        let n = self.noise_embed_dim / 2;
        if n == 1 {
            return vec![1.0];
        }
        (0..n).map(|j| MAX_FREQUENCY.powf(j as f64 / (n - 1) as f64)).collect()
    }
}

/// Variance-scaled initialization with a zero output layer and zero biases.
pub fn init_params<R: Rng + ?Sized>(rng: &mut R, cfg: &NetConfig) -> Vec<f64> {
    let mut theta = vec![0.0; cfg.param_count()];
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        if l < last {
            for o in 0..fan_out {
                for i in 0..fan_in {
                    let var = if l == 0 {
                        // the embedding half of the input has second moment ½
                        if i < cfg.data_dim { 1.0 / fan_in as f64 } else { 2.0 / fan_in as f64 }
                    } else {
                        1.0 / (SILU_SECOND_MOMENT * fan_in as f64)
                    };
                    theta[off + o * fan_in + i] = Normal::new(0.0, var.sqrt()).expect("finite").sample(rng);
                }
            }
        }
        off += (fan_in + 1) * fan_out;
    }
    let e = cfg.noise_embed_dim;
    if cfg.cond_dim > 0 {
        let std = (1.0 / cfg.cond_dim as f64).sqrt();
        for v in theta[off..off + e * cfg.cond_dim].iter_mut() {
            *v = Normal::new(0.0, std).expect("finite").sample(rng);
        }
    }
    theta
}

/// One training example for [`DenoiserNet::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_in: Vec<f64>,
    pub target: Vec<f64>,
    pub sigma: f64,
    pub cond: Vec<f64>,
    pub weight: f64,
}

/// Inverted dropout on hidden activations, with masks drawn from
/// `seed` and the sample index.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    config: NetConfig,
    sigma_data: f64,
    pub theta: Vec<f64>,
}

struct Trace {
    pre: Preconditioning,
    /// inputs to every affine layer; `acts[0]` is the network input
    acts: Vec<Vec<f64>>,
    /// hidden pre-activations
    zs: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl DenoiserNet {
    /// A network with all parameters zero.
    pub fn zeros(config: NetConfig, sigma_data: f64) -> Result<Self> {
        config.validate()?;
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_data must be positive, got {sigma_data}")));
        }
        let theta = vec![0.0; config.param_count()];
        Ok(Self { config, sigma_data, theta })
    }

    pub fn init(config: NetConfig, sigma_data: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config, sigma_data)?;
        net.theta = init_params(&mut ChaCha8Rng::seed_from_u64(seed), &net.config);
        Ok(net)
    }

    pub fn with_theta(config: NetConfig, sigma_data: f64, theta: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(config, sigma_data)?;
        if theta.len() != net.theta.len() {
            return Err(Error::Dimension(format!("θ has {} entries, network needs {}", theta.len(), net.theta.len())));
        }
        net.theta = theta;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn check_inputs(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<()> {
        if x.len() != self.config.data_dim {
            return Err(Error::Dimension(format!("input of length {} for data dimension {}", x.len(), self.config.data_dim)));
        }
        if cond.len() != self.config.cond_dim {
            return Err(Error::Dimension(format!("condition of length {} for condition dimension {}", cond.len(), self.config.cond_dim)));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("noise level must be positive, got {sigma}")));
        }
        Ok(())
    }

    fn trace(&self, theta: &[f64], x: &[f64], sigma: f64, cond: &[f64], dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Trace> {
        let cfg = &self.config;
        let pre = preconditioning(sigma, self.sigma_data)?;
        let e = cfg.noise_embed_dim;
        let mut input = Vec::with_capacity(cfg.data_dim + e);
        input.extend(x.iter().map(|v| pre.c_in * v));
        for f in cfg.frequencies() {
            input.push((f * pre.c_noise).sin());
        }
        for f in cfg.frequencies() {
            input.push((f * pre.c_noise).cos());
        }
        if cfg.cond_dim > 0 {
            let wc = &theta[cfg.cond_offset()..];
            for r in 0..e {
                let row = &wc[r * cfg.cond_dim..(r + 1) * cfg.cond_dim];
                input[cfg.data_dim + r] += row.iter().zip(cond).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        let dims = cfg.layer_dims();
        let last = dims.len() - 1;
        let mut acts = vec![input];
        let mut zs = Vec::with_capacity(last);
        let mut masks = Vec::new();
        let mut dropout = dropout;
        let mut off = 0;
        let mut raw = Vec::new();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &theta[off..off + fan_in * fan_out];
            let b = &theta[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
            off += (fan_in + 1) * fan_out;
            let h = acts.last().expect("input");
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l == last {
                raw = z;
                break;
            }
            let mut act: Vec<f64> = z.iter().map(|&v| v * sigmoid(v)).collect();
            if let Some((rate, rng)) = dropout.as_mut() {
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..fan_out).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                for (a, m) in act.iter_mut().zip(&mask) {
                    *a *= m;
                }
                masks.push(mask);
            }
            zs.push(z);
            acts.push(act);
        }
        Ok(Trace { pre, acts, zs, masks, raw })
    }

    /// The raw network output `F_θ(c_in·x; c_noise, ω)`.
    pub fn raw_forward(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, sigma, cond)?;
        Ok(self.trace(&self.theta, x, sigma, cond, None)?.raw)
    }

    pub fn forward(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, sigma, cond)?;
        let t = self.trace(&self.theta, x, sigma, cond, None)?;
        Ok(x.iter().zip(&t.raw).map(|(xi, f)| t.pre.c_skip * xi + t.pre.c_out * f).collect())
    }

    /// Hidden pre-activations for every hidden layer, used by init diagnostics.
    pub fn hidden_preactivations(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(x, sigma, cond)?;
        Ok(self.trace(&self.theta, x, sigma, cond, None)?.zs)
    }

    fn sample_loss_grad(&self, s: &TrainSample, index: usize, dropout: Option<Dropout>, grad: &mut [f64]) -> Result<f64> {
        self.check_inputs(&s.x_in, s.sigma, &s.cond)?;
        if s.target.len() != self.config.data_dim {
            return Err(Error::Dimension(format!("target of length {}", s.target.len())));
        }
        let cfg = &self.config;
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
        let dr = match (dropout, rng.as_mut()) {
            (Some(d), Some(r)) if d.rate > 0.0 => Some((d.rate, r)),
            _ => None,
        };
        let t = self.trace(&self.theta, &s.x_in, s.sigma, &s.cond, dr)?;
        let resid: Vec<f64> = s
            .x_in
            .iter()
            .zip(&t.raw)
            .zip(&s.target)
            .map(|((xi, f), ti)| t.pre.c_skip * xi + t.pre.c_out * f - ti)
            .collect();
        let loss = s.weight * resid.iter().map(|r| r * r).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        if s.weight == 0.0 {
            return Ok(0.0);
        }

        // backward; `delta` is ∂loss/∂(layer output)
        let dims = cfg.layer_dims();
        let last = dims.len() - 1;
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += (i + 1) * o;
        }
        let mut delta: Vec<f64> = resid.iter().map(|r| 2.0 * s.weight * t.pre.c_out * r).collect();
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let h = &t.acts[l];
            {
                let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, hv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(h) {
                        *g += d * hv;
                    }
                }
            }
            let w = &self.theta[off..off + fan_in * fan_out];
            let mut dh = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (a, wv) in dh.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *a += d * wv;
                }
            }
            if l == 0 {
                if cfg.cond_dim > 0 {
                    let co = cfg.cond_offset();
                    for r in 0..cfg.noise_embed_dim {
                        let d = dh[cfg.data_dim + r];
                        for (g, c) in grad[co + r * cfg.cond_dim..co + (r + 1) * cfg.cond_dim].iter_mut().zip(&s.cond) {
                            *g += d * c;
                        }
                    }
                }
                break;
            }
            let z = &t.zs[l - 1];
            delta = dh
                .iter()
                .zip(z)
                .enumerate()
                .map(|(j, (a, &zv))| {
                    let sg = sigmoid(zv);
                    let m = t.masks.get(l - 1).map_or(1.0, |m| m[j]);
                    a * m * sg * (1.0 + zv * (1.0 - sg))
                })
                .collect();
        }
        Ok(loss)
    }

    /// Mean of `λ·‖D_θ(x_in) − target‖²` over the batch and its gradient with
    /// respect to `θ`.
    pub fn loss_and_grad(&self, batch: &[TrainSample], dropout: Option<Dropout>) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        const CHUNK: usize = 16;
        let p = self.param_count();
        let parts = par::map_chunks(batch.len(), CHUNK, |range| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; p];
            let mut loss = 0.0;
            for i in range {
                loss += self.sample_loss_grad(&batch[i], i, dropout, &mut g)?;
            }
            Ok((loss, g))
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; p];
        for part in parts {
            let (l, g) = part?;
            total += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let n = batch.len() as f64;
        for a in grad.iter_mut() {
            *a /= n;
        }
        Ok((total / n, grad))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, batch: &[TrainSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        let parts = par::map_chunks(batch.len(), 64, |range| -> Result<f64> {
            let mut acc = 0.0;
            for i in range {
                let s = &batch[i];
                let d = self.forward(&s.x_in, s.sigma, &s.cond)?;
                let l = s.weight * d.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { index: i });
                }
                acc += l;
            }
            Ok(acc)
        });
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total / batch.len() as f64)
    }
}

impl Denoiser for DenoiserNet {
    fn dim(&self) -> usize {
        self.config.data_dim
    }

    fn denoise(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Vec<f64> {
        self.forward(x, sigma, cond).expect("denoiser inputs are validated by the caller")
    }
}
