//! Training objectives, the training loop and overfitting diagnostics.
//!
//! Every objective is expressed as a [`TrainSample`] (network input, target,
//! noise level, condition vector, weight), so the loss evaluated by an
//! arbitrary [`Denoiser`] and the loss differentiated during training are
//! built by the same code.
//!
//! Random streams: parameter init, data/noise/σ draws, augmentation draws,
//! evaluation draws and evaluation sampling each use their own ChaCha stream
//! derived from the run seed. Because augmentation draws never touch the data
//! stream, a ScoreAug run restricted to the identity consumes exactly the same
//! data, noise and σ values as the plain EDM run with the same seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::dataset::EmpiricalDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, add};
use crate::model::{DenoiserNet, Dropout, NetConfig, TrainSample};
use crate::oracle::{self, AugmentedOracle, Denoiser};
use crate::par;
use crate::sampler::{heun_sample, SamplerConfig};
use crate::schedule::{loss_weight, sample_sigma, DiffusionSchedule};
use crate::transforms::{apply_transform, build_operator, condition_vector, sample_params, AugmentationConfig, AugmentationParams, LinearOperator};

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_EVAL_SAMPLES: u64 = 5;
const STREAM_DROPOUT: u64 = 6;

pub const METRICS_HEADER: &str = "step,train_loss,heldout_loss,gap,oracle_loss_floor,sample_nn_median,sample_nn_max";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    Edm,
    ScoreAug,
    ScoreAugNonlinear,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::Edm, LossVariant::ScoreAug, LossVariant::ScoreAugNonlinear];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Edm => "edm",
            LossVariant::ScoreAug => "scoreaug",
            LossVariant::ScoreAugNonlinear => "scoreaug_nonlinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::InvalidParam(format!("unknown loss variant `{s}` (expected edm, scoreaug or scoreaug_nonlinear)")))
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a per-sample objective needs besides the data and noise.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub sigma_data: f64,
    pub aug: AugmentationConfig,
    /// Feed the augmentation condition to the denoiser.
    pub conditioning: bool,
    /// Length of the condition vector the denoiser expects.
    pub cond_dim: usize,
}

impl LossContext {
    pub fn new(sigma_data: f64, aug: AugmentationConfig, conditioning: bool) -> Self {
        let cond_dim = if conditioning { aug.condition_len() } else { 0 };
        Self { sigma_data, aug, conditioning, cond_dim }
    }

    fn cond_for(&self, params: &AugmentationParams) -> Vec<f64> {
        if self.conditioning {
            condition_vector(params, &self.aug)
        } else {
            vec![0.0; self.cond_dim]
        }
    }

    fn zero_cond(&self) -> Vec<f64> {
        vec![0.0; self.cond_dim]
    }
}

/// `(d + n, d)` with the zero condition. `n` is the already scaled noise.
pub fn edm_example(ctx: &LossContext, d: &[f64], n: &[f64], sigma: f64) -> Result<TrainSample> {
    Ok(TrainSample { x_in: add(d, n), target: d.to_vec(), sigma, cond: ctx.zero_cond(), weight: loss_weight(sigma, ctx.sigma_data)? })
}

/// `(𝐓(d + n), 𝐓d)` for a linear augmentation. The input is evaluated as
/// `𝐓d + 𝐓n`, which is the same vector by linearity and keeps this objective
/// bit-identical to [`nonlinear_example`] on linear kinds.
pub fn scoreaug_example(ctx: &LossContext, op: &LinearOperator, params: &AugmentationParams, d: &[f64], n: &[f64], sigma: f64) -> Result<TrainSample> {
    if !params.is_linear() {
        return Err(Error::InvalidParam(format!("`{params}` is not linear; use the nonlinear objective")));
    }
    let td = op.apply(d);
    Ok(TrainSample { x_in: add(&td, &op.apply(n)), target: td, sigma, cond: ctx.cond_for(params), weight: loss_weight(sigma, ctx.sigma_data)? })
}

/// `(T(d) + T(n), T(d))` for any augmentation kind.
pub fn nonlinear_example(ctx: &LossContext, params: &AugmentationParams, d: &[f64], n: &[f64], sigma: f64) -> Result<TrainSample> {
    let td = apply_transform(params, ctx.aug.shape, d)?;
    let tn = apply_transform(params, ctx.aug.shape, n)?;
    Ok(TrainSample { x_in: add(&td, &tn), target: td, sigma, cond: ctx.cond_for(params), weight: loss_weight(sigma, ctx.sigma_data)? })
}

/// `λ(σ)·‖D(x_in; σ, cond) − target‖²`.
pub fn example_loss(den: &dyn Denoiser, s: &TrainSample) -> f64 {
    let out = den.denoise(&s.x_in, s.sigma, &s.cond);
    s.weight * linalg::sq_dist(&out, &s.target)
}

pub fn edm_loss_sample(den: &dyn Denoiser, ctx: &LossContext, d: &[f64], n: &[f64], sigma: f64) -> Result<f64> {
    Ok(example_loss(den, &edm_example(ctx, d, n, sigma)?))
}

pub fn scoreaug_loss_sample(den: &dyn Denoiser, ctx: &LossContext, d: &[f64], n: &[f64], sigma: f64, params: &AugmentationParams) -> Result<f64> {
    let op = build_operator(params, ctx.aug.shape)?;
    Ok(example_loss(den, &scoreaug_example(ctx, &op, params, d, n, sigma)?))
}

pub fn scoreaug_nonlinear_loss_sample(den: &dyn Denoiser, ctx: &LossContext, d: &[f64], n: &[f64], sigma: f64, params: &AugmentationParams) -> Result<f64> {
    Ok(example_loss(den, &nonlinear_example(ctx, params, d, n, sigma)?))
}

/// `λ(σ)·E‖x₀ − E[x₀ | x]‖²` given `x`: the smallest achievable EDM loss at `x`.
pub fn edm_floor_term(x: &[f64], sigma: f64, ds: &EmpiricalDataset) -> Result<f64> {
    Ok(loss_weight(sigma, ds.sigma_data())? * oracle::posterior_variance(x, sigma, ds))
}

/// Same as [`edm_floor_term`] for the transformed dataset `{𝐓xᵢ}`.
pub fn augmented_floor_term(orc: &AugmentedOracle, y: &[f64], sigma: f64, sigma_data: f64) -> Result<f64> {
    let w = orc.weights(y, sigma)?;
    let images = orc.images();
    let mut mean = vec![0.0; y.len()];
    for (wi, im) in w.iter().zip(images) {
        for (m, v) in mean.iter_mut().zip(im) {
            *m += wi * v;
        }
    }
    let var: f64 = w.iter().zip(images).map(|(wi, im)| wi * linalg::sq_dist(im, &mean)).sum();
    Ok(loss_weight(sigma, sigma_data)? * var)
}

/// Fixed `(data index, σ, noise)` triples for reproducible evaluation.
#[derive(Debug, Clone)]
pub struct EvalDraws {
    pub index: Vec<usize>,
    pub sigma: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
}

impl EvalDraws {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_data: usize, dim: usize, count: usize) -> Self {
        let mut index = Vec::with_capacity(count);
        let mut sigma = Vec::with_capacity(count);
        let mut noise = Vec::with_capacity(count);
        for _ in 0..count {
            index.push(rng.random_range(0..n_data));
            let s = sample_sigma(rng);
            sigma.push(s);
            noise.push((0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        Self { index, sigma, noise }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Draws for the training and held-out sets from identically seeded streams,
/// so both sets see the same noise and noise levels.
fn common_draws(seed: u64, train: &EmpiricalDataset, heldout: Option<&EmpiricalDataset>, n_eval: usize) -> (EvalDraws, Option<EvalDraws>) {
    let rng = || {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(STREAM_EVAL);
        r
    };
    let dt = EvalDraws::new(&mut rng(), train.len(), train.dim(), n_eval);
    let dh = heldout.map(|h| EvalDraws::new(&mut rng(), h.len(), h.dim(), n_eval));
    (dt, dh)
}

/// Mean EDM loss of `den` over fixed draws from `ds`.
pub fn edm_eval_loss(den: &dyn Denoiser, ctx: &LossContext, ds: &EmpiricalDataset, draws: &EvalDraws) -> Result<f64> {
    let parts = par::map_chunks(draws.len(), 64, |r| -> Result<f64> {
        let mut acc = 0.0;
        for i in r {
            acc += edm_loss_sample(den, ctx, &ds.points()[draws.index[i]], &draws.noise[i], draws.sigma[i])?;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / draws.len().max(1) as f64)
}

/// Mean oracle floor over the same draws that [`edm_eval_loss`] uses.
pub fn edm_eval_floor(ds: &EmpiricalDataset, draws: &EvalDraws) -> Result<f64> {
    let parts = par::map_chunks(draws.len(), 64, |r| -> Result<f64> {
        let mut acc = 0.0;
        for i in r {
            let x = add(&ds.points()[draws.index[i]], &draws.noise[i]);
            acc += edm_floor_term(&x, draws.sigma[i], ds)?;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / draws.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub gap: f64,
}

/// Mean EDM loss on `n_eval` draws from each dataset and their difference.
pub fn heldout_gap(den: &dyn Denoiser, ctx: &LossContext, train: &EmpiricalDataset, heldout: &EmpiricalDataset, n_eval: usize, seed: u64) -> Result<GapReport> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidParam("heldout_gap needs two nonempty datasets".into()));
    }
    let (dt, dh) = common_draws(seed, train, Some(heldout), n_eval);
    let dh = dh.expect("held-out draws");
    let train_loss = edm_eval_loss(den, ctx, train, &dt)?;
    let heldout_loss = edm_eval_loss(den, ctx, heldout, &dh)?;
    Ok(GapReport { train_loss, heldout_loss, gap: heldout_loss - train_loss })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationReport {
    pub distances: Vec<f64>,
    pub min: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Exact nearest-neighbour distance from every sample to `ds`.
pub fn memorization_distance(samples: &[Vec<f64>], ds: &EmpiricalDataset) -> Result<MemorizationReport> {
    if samples.is_empty() {
        return Err(Error::InvalidParam("no samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != ds.dim()) {
        return Err(Error::Dimension(format!("sample of length {} against data of dimension {}", s.len(), ds.dim())));
    }
    let distances: Vec<f64> = par::map_indices(samples.len(), |i| {
        ds.points().iter().map(|p| linalg::sq_dist(&samples[i], p)).fold(f64::INFINITY, f64::min).sqrt()
    });
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(MemorizationReport {
        min: sorted[0],
        q10: quantile(&sorted, 0.1),
        median: quantile(&sorted, 0.5),
        q90: quantile(&sorted, 0.9),
        max: sorted[sorted.len() - 1],
        distances,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            theta[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * theta[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub augmentation: AugmentationConfig,
    pub conditioning: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ema_halflife: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub hidden: Vec<usize>,
    pub noise_embed_dim: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Number of fixed draws behind every loss column of the metrics.
    pub n_eval: usize,
    /// Samples generated at each evaluation for the distance columns.
    pub n_eval_samples: usize,
    pub sampler: SamplerConfig,
    pub schedule: DiffusionSchedule,
}

impl TrainConfig {
    pub fn new(augmentation: AugmentationConfig) -> Self {
        Self {
            variant: LossVariant::Edm,
            augmentation,
            conditioning: true,
            batch_size: 128,
            steps: 20_000,
            learning_rate: 1e-3,
            ema_halflife: 500.0,
            heldout_fraction: 0.0,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 5000,
            hidden: vec![256; 3],
            noise_embed_dim: 32,
            weight_decay: 0.0,
            dropout: 0.0,
            n_eval: 1024,
            n_eval_samples: 64,
            sampler: SamplerConfig::default(),
            schedule: DiffusionSchedule::ve(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.heldout_fraction) {
            return bad(format!("heldout_fraction {} not in [0, 0.5]", self.heldout_fraction));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.ema_halflife.is_nan() || self.ema_halflife <= 0.0 {
            return bad(format!("ema_halflife {} must be positive", self.ema_halflife));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.n_eval == 0 || self.n_eval_samples == 0 {
            return bad("n_eval and n_eval_samples must be at least 1".into());
        }
        if self.variant == LossVariant::ScoreAug && self.augmentation.effective_kinds().iter().any(|k| !k.is_linear()) {
            return bad("the scoreaug objective needs linear augmentations; use scoreaug_nonlinear".into());
        }
        self.sampler.validate()?;
        NetConfig { data_dim: 1, cond_dim: 0, noise_embed_dim: self.noise_embed_dim, hidden: self.hidden.clone() }.validate()
    }

    pub fn cond_dim(&self) -> usize {
        if self.conditioning {
            self.augmentation.condition_len()
        } else {
            0
        }
    }

    pub fn net_config(&self, data_dim: usize) -> NetConfig {
        NetConfig { data_dim, cond_dim: self.cond_dim(), noise_embed_dim: self.noise_embed_dim, hidden: self.hidden.clone() }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub gap: f64,
    pub oracle_loss_floor: f64,
    pub sample_nn_median: f64,
    pub sample_nn_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.train_loss, r.heldout_loss, r.gap, r.oracle_loss_floor, r.sample_nn_median, r.sample_nn_max
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: format!("expected header `{METRICS_HEADER}`") }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 7 fields, found {}", f.len()) });
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("field {}: {e}", k + 1) });
            rows.push(MetricsRow {
                step: f[0].trim().parse().map_err(|e| Error::Parse { line: i + 1, msg: format!("step: {e}") })?,
                train_loss: num(1)?,
                heldout_loss: num(2)?,
                gap: num(3)?,
                oracle_loss_floor: num(4)?,
                sample_nn_median: num(5)?,
                sample_nn_max: num(6)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    pub train_set: EmpiricalDataset,
    pub heldout_set: Option<EmpiricalDataset>,
}

impl TrainOutcome {
    pub fn ema_net(&self) -> Result<DenoiserNet> {
        self.checkpoint.ema_net()
    }
}

struct Evaluator {
    ctx: LossContext,
    train: EmpiricalDataset,
    heldout: Option<EmpiricalDataset>,
    train_draws: EvalDraws,
    heldout_draws: Option<EvalDraws>,
    floor: f64,
    sample_seed: u64,
}

impl Evaluator {
    fn row(&self, cfg: &TrainConfig, net: &DenoiserNet, step: usize) -> Result<MetricsRow> {
        let train_loss = edm_eval_loss(net, &self.ctx, &self.train, &self.train_draws)?;
        let heldout_loss = match (&self.heldout, &self.heldout_draws) {
            (Some(h), Some(d)) => edm_eval_loss(net, &self.ctx, h, d)?,
            _ => train_loss,
        };
        let sampler = SamplerConfig { condition: None, ..cfg.sampler.clone() };
        let schedule = DiffusionSchedule { sigma_data: net.sigma_data(), ..cfg.schedule.clone() };
        let samples = heun_sample(net, &sampler, &schedule, &self.ctx.zero_cond(), &mut ChaCha8Rng::seed_from_u64(self.sample_seed), cfg.n_eval_samples)?;
        let nn = memorization_distance(&samples, &self.train)?;
        Ok(MetricsRow {
            step,
            train_loss,
            heldout_loss,
            gap: heldout_loss - train_loss,
            oracle_loss_floor: self.floor,
            sample_nn_median: nn.median,
            sample_nn_max: nn.max,
        })
    }
}

/// On-disk layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.ini";
    pub const METRICS: &'static str = "metrics.csv";
    pub const REPORT: &'static str = "report.txt";
    pub const CHECKPOINTS: &'static str = "checkpoints";
    pub const FINAL: &'static str = "final.ckpt";

    /// Creates the directory; an existing non-empty directory is an error
    /// unless `force` is set.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let non_empty = fs::read_dir(root)?.next().is_some();
            if non_empty && !force {
                return Err(Error::InvalidParam(format!("output directory {} is not empty (use --force to overwrite)", root.display())));
            }
        }
        fs::create_dir_all(root.join(Self::CHECKPOINTS))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join(Self::FINAL)
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join(format!("step_{step:08}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(Self::METRICS)
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        fs::write(self.root.join(Self::CONFIG), text)?;
        Ok(())
    }

    /// The final checkpoint if present, else the latest step checkpoint.
    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        let fin = self.final_checkpoint();
        if fin.exists() {
            return Ok(fin);
        }
        let dir = self.root.join(Self::CHECKPOINTS);
        let mut steps: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|_| Error::Checkpoint(format!("no checkpoints under {}", self.root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
        steps.sort();
        steps.pop().ok_or_else(|| Error::Checkpoint(format!("no checkpoints under {}", self.root.display())))
    }
}

fn write_report(dir: &RunDir, cfg: &TrainConfig, outcome_rows: &RunMetrics, n_train: usize, params: usize, status: &str) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("status = {status}\n"));
    s.push_str(&format!("variant = {}\n", cfg.variant));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    s.push_str(&format!("train_size = {n_train}\n"));
    s.push_str(&format!("width = {}\n", cfg.hidden.iter().copied().max().unwrap_or(0)));
    s.push_str(&format!("parameters = {params}\n"));
    if let Some(r) = outcome_rows.last() {
        s.push_str(&format!("final_step = {}\n", r.step));
        s.push_str(&format!("train_loss = {}\n", r.train_loss));
        s.push_str(&format!("heldout_loss = {}\n", r.heldout_loss));
        s.push_str(&format!("gap = {}\n", r.gap));
        s.push_str(&format!("oracle_loss_floor = {}\n", r.oracle_loss_floor));
        s.push_str(&format!("sample_nn_median = {}\n", r.sample_nn_median));
    }
    fs::write(dir.root.join(RunDir::REPORT), s)?;
    Ok(())
}

/// Builds the batch for one optimizer step from the data and augmentation streams.
fn build_batch(cfg: &TrainConfig, ctx: &LossContext, ds: &EmpiricalDataset, data_rng: &mut ChaCha8Rng, aug_rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
    let d = ds.dim();
    let mut raw = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = data_rng.random_range(0..ds.len());
        let sigma = sample_sigma(data_rng);
        let noise: Vec<f64> = (0..d).map(|_| sigma * data_rng.sample::<f64, _>(StandardNormal)).collect();
        raw.push((idx, sigma, noise));
    }
    let points = ds.points();
    match cfg.variant {
        LossVariant::Edm => raw.iter().map(|(i, s, n)| edm_example(ctx, &points[*i], n, *s)).collect(),
        LossVariant::ScoreAug => {
            let params = sample_params(aug_rng, &cfg.augmentation)?;
            let op = build_operator(&params, cfg.augmentation.shape)?;
            raw.iter().map(|(i, s, n)| scoreaug_example(ctx, &op, &params, &points[*i], n, *s)).collect()
        }
        LossVariant::ScoreAugNonlinear => {
            let params = sample_params(aug_rng, &cfg.augmentation)?;
            raw.iter().map(|(i, s, n)| nonlinear_example(ctx, &params, &points[*i], n, *s)).collect()
        }
    }
}

/// Trains a denoiser on `ds`. When `heldout` is `None` and the config asks
/// for a held-out fraction, the tail of `ds` is held out. With a run
/// directory, metrics are rewritten after every evaluation, checkpoints are
/// written periodically and at the end, and a divergence leaves the last good
/// checkpoint in place.
pub fn train_run(cfg: &TrainConfig, ds: &EmpiricalDataset, heldout: Option<&EmpiricalDataset>, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, heldout) = match heldout {
        Some(h) => (ds.clone(), Some(h.clone())),
        None => ds.split(cfg.heldout_fraction)?,
    };
    if train.dim() != cfg.augmentation.shape.dim() && cfg.variant != LossVariant::Edm {
        return Err(Error::Dimension(format!("augmentation shape has {} entries, data has {}", cfg.augmentation.shape.dim(), train.dim())));
    }
    let sigma_data = train.sigma_data();
    let ctx = LossContext::new(sigma_data, cfg.augmentation.clone(), cfg.conditioning);
    let net_cfg = cfg.net_config(train.dim());
    let mut net = DenoiserNet::zeros(net_cfg.clone(), sigma_data)?;
    net.theta = crate::model::init_params(&mut cfg.rng(STREAM_INIT), &net_cfg);
    let mut ema = net.clone();
    let mut adam = Adam::new(net.param_count(), cfg.learning_rate, cfg.weight_decay);
    let beta = 0.5f64.powf(1.0 / cfg.ema_halflife);

    let (train_draws, heldout_draws) = common_draws(cfg.seed, &train, heldout.as_ref(), cfg.n_eval);
    let floor = edm_eval_floor(&train, &train_draws)?;
    let evaluator = Evaluator {
        ctx: ctx.clone(),
        train: train.clone(),
        heldout: heldout.clone(),
        train_draws,
        heldout_draws,
        floor,
        sample_seed: cfg.rng(STREAM_EVAL_SAMPLES).random(),
    };

    let mut data_rng = cfg.rng(STREAM_DATA);
    let mut aug_rng = cfg.rng(STREAM_AUG);
    let dropout_base: u64 = cfg.rng(STREAM_DROPOUT).random();
    let mut metrics = RunMetrics::default();
    let snapshot = |net: &DenoiserNet, ema: &DenoiserNet, adam: &Adam| Checkpoint {
        config: net_cfg.clone(),
        sigma_data,
        theta: net.theta.clone(),
        ema_theta: ema.theta.clone(),
        adam_step: adam.step,
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
    };
    let record = |metrics: &mut RunMetrics, ema: &DenoiserNet, step: usize| -> Result<()> {
        metrics.rows.push(evaluator.row(cfg, ema, step)?);
        if let Some(dir) = run_dir {
            fs::write(dir.metrics(), metrics.to_csv())?;
        }
        Ok(())
    };

    record(&mut metrics, &ema, 0)?;
    for step in 1..=cfg.steps {
        let batch = build_batch(cfg, &ctx, &train, &mut data_rng, &mut aug_rng)?;
        let dropout = (cfg.dropout > 0.0).then_some(Dropout { rate: cfg.dropout, seed: dropout_base ^ step as u64 });
        let grad = match net.loss_and_grad(&batch, dropout) {
            Ok((_, g)) if g.iter().all(|v| v.is_finite()) => g,
            Ok(_) | Err(Error::NonFiniteLoss { .. }) => {
                if let Some(dir) = run_dir {
                    write_report(dir, cfg, &metrics, train.len(), net.param_count(), &format!("diverged at step {step}"))?;
                }
                return Err(Error::Diverged { step });
            }
            Err(e) => return Err(e),
        };
        adam.update(&mut net.theta, &grad);
        for (e, t) in ema.theta.iter_mut().zip(&net.theta) {
            *e = beta * *e + (1.0 - beta) * t;
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(&mut metrics, &ema, step)?;
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                snapshot(&net, &ema, &adam).save(&dir.step_checkpoint(step))?;
            }
        }
    }
    let checkpoint = snapshot(&net, &ema, &adam);
    if let Some(dir) = run_dir {
        checkpoint.save(&dir.final_checkpoint())?;
        write_report(dir, cfg, &metrics, train.len(), net.param_count(), "completed")?;
    }
    Ok(TrainOutcome { checkpoint, metrics, train_set: train, heldout_set: heldout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Generator;
    use crate::oracle::OracleDenoiser;
    use crate::transforms::{AugKind, ImageShape};

    fn flat_ctx(ds: &EmpiricalDataset) -> LossContext {
        LossContext::new(ds.sigma_data(), AugmentationConfig::identity_only(ImageShape::flat(ds.dim())), false)
    }

    fn image_ctx(sigma_data: f64, conditioning: bool) -> LossContext {
        let shape = ImageShape::new(4, 4, 1);
        let kinds = vec![AugKind::Brightness, AugKind::Translation, AugKind::Cutout, AugKind::Rotation, AugKind::SmoothNonlinear];
        LossContext::new(sigma_data, AugmentationConfig::new(shape, kinds), conditioning)
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn single_point_oracle_has_zero_loss() {
        let ds = EmpiricalDataset::new(vec![vec![0.4, -1.0]]).unwrap().with_sigma_data(0.5).unwrap();
        let ctx = flat_ctx(&ds);
        let den = OracleDenoiser::new(ds.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_sigma(&mut rng);
            assert_eq!(edm_loss_sample(&den, &ctx, &ds.points()[0], &randn(&mut rng, 2, s), s).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_denoiser_loss() {
        let ctx = LossContext::new(0.5, AugmentationConfig::identity_only(ImageShape::flat(2)), false);
        let zero = (2usize, |_: &[f64], _: f64, _: &[f64]| vec![0.0, 0.0]);
        let l = edm_loss_sample(&zero, &ctx, &[1.0, 2.0], &[0.3, 0.1], 0.5).unwrap();
        assert_eq!(l, 8.0 * 5.0);
    }

    #[test]
    fn oracle_loss_matches_posterior_variance_floor() {
        let ds = Generator::Gmm2d.generate(8, 3).unwrap();
        let ctx = flat_ctx(&ds);
        let den = OracleDenoiser::new(ds.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // at small σ rare ambiguous posteriors dominate and the standard error
        // of a 10⁴-draw mean exceeds 2%; at σ = 5 it is below 1%
        let sigma = 5.0;
        let (mut loss, mut floor) = (0.0, 0.0);
        for _ in 0..10_000 {
            let d = &ds.points()[rng.random_range(0..ds.len())];
            let n = randn(&mut rng, 2, sigma);
            loss += edm_loss_sample(&den, &ctx, d, &n, sigma).unwrap();
            floor += edm_floor_term(&add(d, &n), sigma, &ds).unwrap();
        }
        assert!((loss / floor - 1.0).abs() < 0.02, "{loss} vs {floor}");
    }

    #[test]
    fn augmented_oracle_matches_augmented_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = EmpiricalDataset::new((0..6).map(|_| randn(&mut rng, 16, 1.0)).collect()).unwrap();
        let ctx = image_ctx(ds.sigma_data(), false);
        let sigma = 5.0;
        for params in [AugmentationParams::Rotation { quarter_turns: 1 }, AugmentationParams::Cutout { cx: 0.4, cy: 0.6, h: 2, w: 2 }] {
            let op = build_operator(&params, ctx.aug.shape).unwrap();
            let orc = AugmentedOracle::new(op.clone(), &ds).unwrap();
            let den = (16usize, |y: &[f64], s: f64, _: &[f64]| orc.denoise(y, s).unwrap());
            let (mut loss, mut floor) = (0.0, 0.0);
            for _ in 0..10_000 {
                let d = &ds.points()[rng.random_range(0..ds.len())];
                let n = randn(&mut rng, 16, sigma);
                let ex = scoreaug_example(&ctx, &op, &params, d, &n, sigma).unwrap();
                loss += example_loss(&den, &ex);
                floor += augmented_floor_term(&orc, &ex.x_in, sigma, ctx.sigma_data).unwrap();
            }
            assert!((loss / floor - 1.0).abs() < 0.02, "{params}: {loss} vs {floor}");
        }
    }

    #[test]
    fn objectives_coincide_on_linear_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx = image_ctx(0.6, true);
        let den = (16usize, |x: &[f64], s: f64, c: &[f64]| x.iter().enumerate().map(|(i, v)| v.tanh() * s + c[i % c.len()]).collect::<Vec<_>>());
        for _ in 0..200 {
            let params = sample_params(&mut rng, &ctx.aug).unwrap();
            let d = randn(&mut rng, 16, 1.0);
            let sigma = sample_sigma(&mut rng);
            let n = randn(&mut rng, 16, sigma);
            if params.is_linear() {
                let a = scoreaug_loss_sample(&den, &ctx, &d, &n, sigma, &params).unwrap();
                let b = scoreaug_nonlinear_loss_sample(&den, &ctx, &d, &n, sigma, &params).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "{params}");
            } else {
                assert!(scoreaug_loss_sample(&den, &ctx, &d, &n, sigma, &params).is_err());
            }
        }
        let d = randn(&mut rng, 16, 1.0);
        let n = randn(&mut rng, 16, 0.3);
        let id = AugmentationParams::Identity;
        let e = edm_loss_sample(&den, &ctx, &d, &n, 0.3).unwrap();
        assert_eq!(e.to_bits(), scoreaug_loss_sample(&den, &ctx, &d, &n, 0.3, &id).unwrap().to_bits());
        assert_eq!(e.to_bits(), scoreaug_nonlinear_loss_sample(&den, &ctx, &d, &n, 0.3, &id).unwrap().to_bits());
    }

    #[test]
    fn nonlinear_objective_differs_from_augmenting_the_noisy_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ctx = image_ctx(0.6, false);
        let den = (16usize, |x: &[f64], _: f64, _: &[f64]| x.iter().map(|v| 0.5 * v).collect::<Vec<_>>());
        let params = AugmentationParams::SmoothNonlinear { strength: 0.3 };
        let d = randn(&mut rng, 16, 1.0);
        let n = randn(&mut rng, 16, 0.8);
        let separate = scoreaug_nonlinear_loss_sample(&den, &ctx, &d, &n, 0.8, &params).unwrap();
        // transform the noisy input as a whole instead: T(d + n)
        let x_in = apply_transform(&params, ctx.aug.shape, &add(&d, &n)).unwrap();
        let target = apply_transform(&params, ctx.aug.shape, &d).unwrap();
        let joint = loss_weight(0.8, 0.6).unwrap() * linalg::sq_dist(&den.denoise(&x_in, 0.8, &[]), &target);
        assert!((separate - joint).abs() > 1e-6 * separate.abs());
    }

    #[test]
    fn rotation_symmetrized_oracle_has_lower_unconditional_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = ImageShape::new(3, 3, 1);
        let ds = EmpiricalDataset::new((0..4).map(|_| randn(&mut rng, 9, 1.0)).collect()).unwrap();
        let mut sym = Vec::new();
        for k in 0..4 {
            let op = build_operator(&AugmentationParams::Rotation { quarter_turns: k }, shape).unwrap();
            sym.extend(ds.points().iter().map(|p| op.apply(p)));
        }
        let sym = EmpiricalDataset::new(sym).unwrap();
        let aug = AugmentationConfig::new(shape, vec![AugKind::Rotation]);
        let ctx = LossContext::new(ds.sigma_data(), aug, false);
        let (orig, union) = (OracleDenoiser::new(ds.clone()), OracleDenoiser::new(sym));
        let (mut lo, mut lu) = (0.0, 0.0);
        for _ in 0..10_000 {
            let params = sample_params(&mut rng, &ctx.aug).unwrap();
            let d = &ds.points()[rng.random_range(0..ds.len())];
            let sigma = sample_sigma(&mut rng);
            let n = randn(&mut rng, 9, sigma);
            lo += scoreaug_loss_sample(&orig, &ctx, d, &n, sigma, &params).unwrap();
            lu += scoreaug_loss_sample(&union, &ctx, d, &n, sigma, &params).unwrap();
        }
        assert!(lu <= lo, "{lu} vs {lo}");
    }

    #[test]
    fn gap_cases() {
        let a = EmpiricalDataset::new(vec![vec![0.0, 0.0], vec![0.5, 0.2], vec![-0.3, 0.4]]).unwrap();
        let far = EmpiricalDataset::new(vec![vec![6.0, 6.0], vec![6.5, 5.5]]).unwrap();
        let ctx = flat_ctx(&a);
        let den = OracleDenoiser::new(a.clone());
        let same = heldout_gap(&den, &ctx, &a, &a, 500, 1).unwrap();
        assert_eq!(same.gap, 0.0);
        let g = heldout_gap(&den, &ctx, &a, &far, 500, 1).unwrap();
        assert!(g.gap > 0.0);
        assert_eq!(g, heldout_gap(&den, &ctx, &a, &far, 500, 1).unwrap());
    }

    #[test]
    fn memorization_cases() {
        let ds = Generator::Gmm2d.generate(10, 1).unwrap();
        let r = memorization_distance(ds.points(), &ds).unwrap();
        assert!(r.distances.iter().all(|d| *d == 0.0));
        let eps = 1e-3;
        let shifted: Vec<Vec<f64>> = ds.points().iter().map(|p| vec![p[0] + eps, p[1]]).collect();
        let r = memorization_distance(&shifted, &ds).unwrap();
        assert!(r.distances.iter().all(|d| (d - eps).abs() < 1e-12));
        assert!(memorization_distance(&[], &ds).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    fn tiny_cfg(shape: ImageShape) -> TrainConfig {
        let mut cfg = TrainConfig::new(AugmentationConfig::identity_only(shape));
        cfg.hidden = vec![16, 16];
        cfg.noise_embed_dim = 8;
        cfg.batch_size = 16;
        cfg.steps = 30;
        cfg.eval_every = 10;
        cfg.n_eval = 64;
        cfg.n_eval_samples = 4;
        cfg.sampler.n_steps = 6;
        cfg
    }

    #[test]
    fn zero_steps_gives_one_row() {
        let ds = Generator::Gmm2d.generate(8, 0).unwrap();
        let mut cfg = tiny_cfg(ImageShape::flat(2));
        cfg.steps = 0;
        let out = train_run(&cfg, &ds, None, None).unwrap();
        assert_eq!(out.metrics.rows.len(), 1);
        assert_eq!(out.metrics.rows[0].step, 0);
    }

    #[test]
    fn identity_scoreaug_reproduces_edm_run() {
        let ds = Generator::Gmm2d.generate(8, 0).unwrap();
        let edm = tiny_cfg(ImageShape::flat(2));
        let mut aug = edm.clone();
        aug.variant = LossVariant::ScoreAug;
        let a = train_run(&edm, &ds, None, None).unwrap();
        let b = train_run(&aug, &ds, None, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn training_is_deterministic_and_csv_round_trips() {
        let ds = Generator::Gmm2d.generate(8, 0).unwrap();
        let mut cfg = tiny_cfg(ImageShape::flat(2));
        cfg.dropout = 0.1;
        cfg.weight_decay = 1e-4;
        let a = train_run(&cfg, &ds, None, None).unwrap();
        let b = train_run(&cfg, &ds, None, None).unwrap();
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(a.metrics.rows.len(), 4);
        assert!(a.metrics.rows.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(RunMetrics::parse_csv(&a.metrics.to_csv()).unwrap(), a.metrics);
        for r in &a.metrics.rows {
            assert!([r.train_loss, r.heldout_loss, r.gap, r.oracle_loss_floor, r.sample_nn_median, r.sample_nn_max].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut theta = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * theta[0], 8.0 * theta[1]];
            opt.update(&mut theta, &g);
        }
        assert!(linalg::norm(&theta) < 1e-3);
    }

    #[test]
    fn config_checks() {
        let mut cfg = tiny_cfg(ImageShape::flat(2));
        cfg.heldout_fraction = 0.6;
        assert!(cfg.validate().is_err());
        cfg.heldout_fraction = 0.5;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut nl = tiny_cfg(ImageShape::new(4, 4, 1));
        nl.augmentation = AugmentationConfig::new(ImageShape::new(4, 4, 1), vec![AugKind::SmoothNonlinear]);
        nl.variant = LossVariant::ScoreAug;
        assert!(nl.validate().is_err());
        nl.variant = LossVariant::ScoreAugNonlinear;
        assert!(nl.validate().is_ok());
    }
}
