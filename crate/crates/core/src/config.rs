//! INI-style run configuration.
//!
//! ```ini
//! [dataset]
//! generator = gmm2d        # gmm2d | glyphs | gaussian, or `path = file.txt`
//! n = 8
//! n_heldout = 64
//!
//! [augmentation]
//! preset = rotation
//! brightness = true        # per-kind switches on top of the preset
//!
//! [train]
//! variant = scoreaug
//! steps = 20000
//! ```
//!
//! Unknown sections and keys are errors, as are references to files that do
//! not exist. [`RunConfig::to_ini`] writes a canonical form that parses back
//! to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::dataset::{EmpiricalDataset, Generator};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::{DiffusionSchedule, Formulation};
use crate::train::{LossVariant, TrainConfig};
use crate::transforms::{AugKind, AugmentationConfig, AugmentationParams, ImageShape};
use crate::verify::VerifyConfig;

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "SCOREAUG_SEED";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generator { generator: Generator, n: usize, seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Extra points drawn from the same generator as a held-out set.
    pub n_heldout: usize,
    pub heldout_path: Option<PathBuf>,
    pub shape: ImageShape,
    pub sigma_data: Option<f64>,
}

impl DatasetSpec {
    /// Loads the training set and, if configured, a separate held-out set.
    pub fn load(&self) -> Result<(EmpiricalDataset, Option<EmpiricalDataset>)> {
        let (train, mut heldout) = match &self.source {
            DataSource::Generator { generator, n, seed } => {
                let all = generator.generate(n + self.n_heldout, *seed)?;
                if self.n_heldout == 0 {
                    (all, None)
                } else {
                    let pts = all.points();
                    let train = EmpiricalDataset::new(pts[..*n].to_vec())?.with_shape(self.shape)?;
                    let held = EmpiricalDataset::new(pts[*n..].to_vec())?.with_shape(self.shape)?;
                    (train, Some(held))
                }
            }
            DataSource::File(p) => (EmpiricalDataset::load(p)?, None),
        };
        if let Some(p) = &self.heldout_path {
            heldout = Some(EmpiricalDataset::load(p)?);
        }
        let mut train = train.with_shape(self.shape)?;
        if let Some(s) = self.sigma_data {
            train = train.with_sigma_data(s)?;
        }
        let heldout = match heldout {
            Some(h) => Some(h.with_shape(self.shape)?.with_sigma_data(train.sigma_data())?),
            None => None,
        };
        Ok((train, heldout))
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Sampling settings for the `sample` command.
    pub sampler: SamplerConfig,
    pub sample_count: usize,
    pub sample_seed: u64,
    pub verify: VerifyConfig,
    pub output_dir: PathBuf,
}

fn generator_name(g: &Generator) -> &'static str {
    match g {
        Generator::Gmm2d => "gmm2d",
        Generator::Glyphs { .. } => "glyphs",
        Generator::Gaussian { .. } => "gaussian",
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, found `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num::<usize>(s.trim())).collect()
}

/// `rows separated by ';', entries by whitespace or ','`.
fn parse_matrix(v: &str) -> std::result::Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = v
        .split(';')
        .map(|r| r.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(parse_num::<f64>).collect())
        .collect::<std::result::Result<_, _>>()?;
    let m = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err("matrix rows must be nonempty and of equal length".into());
    }
    Ok(DMatrix::from_row_iterator(m, n, rows.into_iter().flatten()))
}

fn format_matrix(t: &DMatrix<f64>) -> String {
    (0..t.nrows())
        .map(|r| (0..t.ncols()).map(|c| t[(r, c)].to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

type Sections = BTreeMap<String, Vec<(usize, String, String)>>;

fn split_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Parse { line: line_no, msg: format!("malformed section header `{line}`") })?.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Parse { line: line_no, msg: format!("unknown section [{name}]") });
            }
            out.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected `key = value`, found `{line}`") })?;
        let section = current.clone().ok_or_else(|| Error::Parse { line: line_no, msg: "key outside of any section".into() })?;
        let key = k.trim().to_string();
        let entries = out.entry(section.clone()).or_default();
        if entries.iter().any(|(_, existing, _)| *existing == key) {
            return Err(Error::Parse { line: line_no, msg: format!("duplicate key `{key}` in [{section}]") });
        }
        entries.push((line_no, key, v.trim().to_string()));
    }
    Ok(out)
}

const SECTIONS: [&str; 8] = ["dataset", "schedule", "augmentation", "model", "train", "sampler", "verify", "output"];

impl RunConfig {
    /// The configuration used when no file is given.
    pub fn default_for(dataset: DatasetSpec) -> Self {
        let mut train = TrainConfig::new(AugmentationConfig::identity_only(dataset.shape));
        train.heldout_fraction = 0.0;
        Self {
            dataset,
            train,
            sampler: SamplerConfig::default(),
            sample_count: 64,
            sample_seed: 0,
            verify: VerifyConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse { line: 0, msg: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses `text`, resolving relative data paths against `base`. The output
    /// directory stays relative to the working directory.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let sections = split_sections(text)?;
        let empty = Vec::new();
        let get = |s: &str| sections.get(s).unwrap_or(&empty);
        let err = |line: usize, msg: String| Error::Parse { line, msg };

        // [dataset]; the shape must be known before the augmentation ranges
        let mut generator = "gmm2d".to_string();
        let (mut n, mut seed, mut size, mut dim, mut n_heldout) = (8usize, 0u64, 8usize, 2usize, 0usize);
        let mut path: Option<PathBuf> = None;
        let mut heldout_path: Option<PathBuf> = None;
        let mut shape_override: Option<ImageShape> = None;
        let mut sigma_data: Option<f64> = None;
        let resolve = |line: usize, v: &str| -> Result<PathBuf> {
            let p = base.join(v);
            fs::canonicalize(&p).map_err(|_| err(line, format!("file `{}` does not exist", p.display())))
        };
        for (line, k, v) in get("dataset") {
            let line = *line;
            match k.as_str() {
                "generator" => generator = v.clone(),
                "n" => n = parse_num(v).map_err(|m| err(line, m))?,
                "seed" => seed = parse_num(v).map_err(|m| err(line, m))?,
                "size" => size = parse_num(v).map_err(|m| err(line, m))?,
                "dim" => dim = parse_num(v).map_err(|m| err(line, m))?,
                "n_heldout" => n_heldout = parse_num(v).map_err(|m| err(line, m))?,
                "path" => path = Some(resolve(line, v)?),
                "heldout_path" => heldout_path = Some(resolve(line, v)?),
                "shape" => {
                    let parts = parse_list(&v.replace('x', ",")).map_err(|m| err(line, m))?;
                    if parts.len() != 3 {
                        return Err(err(line, "shape must be HxWxC".into()));
                    }
                    shape_override = Some(ImageShape::new(parts[0], parts[1], parts[2]));
                }
                "sigma_data" => {
                    if v != "auto" {
                        sigma_data = Some(parse_num(v).map_err(|m| err(line, m))?);
                    }
                }
                _ => return Err(err(line, format!("unknown key `{k}` in [dataset]"))),
            }
        }
        let (source, natural_shape) = match path {
            Some(p) => {
                let ds = EmpiricalDataset::load(&p)?;
                (DataSource::File(p), ImageShape::flat(ds.dim()))
            }
            None => {
                let g = Generator::parse(&generator, size, dim)?;
                let shape = match g {
                    Generator::Gmm2d => ImageShape::flat(2),
                    Generator::Glyphs { size } => ImageShape::new(size, size, 1),
                    Generator::Gaussian { dim } => ImageShape::flat(dim),
                };
                (DataSource::Generator { generator: g, n, seed }, shape)
            }
        };
        let shape = shape_override.unwrap_or(natural_shape);
        if shape.dim() != natural_shape.dim() {
            return Err(err(0, format!("shape {}x{}x{} does not match data dimension {}", shape.height, shape.width, shape.channels, natural_shape.dim())));
        }
        let dataset = DatasetSpec { source, n_heldout, heldout_path, shape, sigma_data };
        let mut cfg = Self::default_for(dataset);

        for (line, k, v) in get("schedule") {
            let line = *line;
            match k.as_str() {
                "formulation" => {
                    let f = Formulation::parse(v).map_err(|e| err(line, e.to_string()))?;
                    cfg.train.schedule = match f {
                        Formulation::Ve => DiffusionSchedule::ve(cfg.train.schedule.sigma_data),
                        Formulation::Vp => DiffusionSchedule::vp(cfg.train.schedule.sigma_data),
                    };
                }
                _ => return Err(err(line, format!("unknown key `{k}` in [schedule]"))),
            }
        }

        let aug_entries = get("augmentation");
        let mut aug = match aug_entries.iter().find(|(_, k, _)| k == "preset") {
            Some((line, _, v)) => AugmentationConfig::preset(v, shape).map_err(|e| err(*line, e.to_string()))?,
            None => AugmentationConfig::identity_only(shape),
        };
        for (line, k, v) in aug_entries {
            let line = *line;
            match k.as_str() {
                "preset" => {}
                "kinds" => {
                    aug.kinds = v.split(',').filter(|s| !s.trim().is_empty()).map(|s| AugKind::parse(s.trim())).collect::<Result<_>>().map_err(|e| err(line, e.to_string()))?;
                }
                "brightness_max" => aug.brightness_max = parse_num(v).map_err(|m| err(line, m))?,
                "translation_ratio" => aug.translation_ratio = parse_num(v).map_err(|m| err(line, m))?,
                "cutout_ratio" => aug.cutout_ratio = parse_num(v).map_err(|m| err(line, m))?,
                "nonlinear_max" => aug.nonlinear_max = parse_num(v).map_err(|m| err(line, m))?,
                "explicit_identity_slot" => aug.explicit_identity_slot = parse_bool(v).map_err(|m| err(line, m))?,
                other => match AugKind::parse(other) {
                    Ok(kind) => {
                        let on = parse_bool(v).map_err(|m| err(line, m))?;
                        aug.kinds.retain(|k| *k != kind);
                        if on {
                            aug.kinds.push(kind);
                        }
                    }
                    Err(_) => return Err(err(line, format!("unknown key `{k}` in [augmentation]"))),
                },
            }
        }
        if aug.kinds.is_empty() {
            aug.kinds.push(AugKind::Identity);
        }
        if aug.kinds.contains(&AugKind::Rotation) && shape.height != shape.width {
            return Err(err(0, "rotation needs square images".into()));
        }
        cfg.train.augmentation = aug;

        for (line, k, v) in get("model") {
            let line = *line;
            let t = &mut cfg.train;
            match k.as_str() {
                "hidden" => t.hidden = parse_list(v).map_err(|m| err(line, m))?,
                "noise_embed_dim" => t.noise_embed_dim = parse_num(v).map_err(|m| err(line, m))?,
                "dropout" => t.dropout = parse_num(v).map_err(|m| err(line, m))?,
                _ => return Err(err(line, format!("unknown key `{k}` in [model]"))),
            }
        }

        for (line, k, v) in get("train") {
            let line = *line;
            let t = &mut cfg.train;
            let e = |m: String| err(line, m);
            match k.as_str() {
                "variant" => t.variant = LossVariant::parse(v).map_err(|x| e(x.to_string()))?,
                "conditioning" => t.conditioning = parse_bool(v).map_err(e)?,
                "batch_size" => t.batch_size = parse_num(v).map_err(e)?,
                "steps" => t.steps = parse_num(v).map_err(e)?,
                "learning_rate" => t.learning_rate = parse_num(v).map_err(e)?,
                "ema_halflife" => t.ema_halflife = parse_num(v).map_err(e)?,
                "heldout_fraction" => t.heldout_fraction = parse_num(v).map_err(e)?,
                "seed" => t.seed = parse_num(v).map_err(e)?,
                "eval_every" => t.eval_every = parse_num(v).map_err(e)?,
                "checkpoint_every" => t.checkpoint_every = parse_num(v).map_err(e)?,
                "weight_decay" => t.weight_decay = parse_num(v).map_err(e)?,
                "n_eval" => t.n_eval = parse_num(v).map_err(e)?,
                "n_eval_samples" => t.n_eval_samples = parse_num(v).map_err(e)?,
                "eval_sampler_steps" => t.sampler.n_steps = parse_num(v).map_err(e)?,
                _ => return Err(err(line, format!("unknown key `{k}` in [train]"))),
            }
        }

        for (line, k, v) in get("sampler") {
            let line = *line;
            let s = &mut cfg.sampler;
            let e = |m: String| err(line, m);
            match k.as_str() {
                "n_steps" => s.n_steps = parse_num(v).map_err(e)?,
                "sigma_max" => s.sigma_max = parse_num(v).map_err(e)?,
                "sigma_min" => s.sigma_min = parse_num(v).map_err(e)?,
                "rho" => s.rho = parse_num(v).map_err(e)?,
                "condition" => {
                    s.condition = match v.as_str() {
                        "none" | "zeros" | "" => None,
                        other => Some(AugmentationParams::parse(other).map_err(|x| e(x.to_string()))?),
                    }
                }
                "count" => cfg.sample_count = parse_num(v).map_err(e)?,
                "seed" => cfg.sample_seed = parse_num(v).map_err(e)?,
                _ => return Err(err(line, format!("unknown key `{k}` in [sampler]"))),
            }
        }
        // evaluation sampling during training follows the sampler's noise range
        cfg.train.sampler.sigma_max = cfg.sampler.sigma_max;
        cfg.train.sampler.sigma_min = cfg.sampler.sigma_min;
        cfg.train.sampler.rho = cfg.sampler.rho;

        for (line, k, v) in get("verify") {
            let line = *line;
            let c = &mut cfg.verify;
            let e = |m: String| err(line, m);
            match k.as_str() {
                "n_mc" => c.n_mc = parse_num(v).map_err(e)?,
                "grid" => c.grid = parse_num(v).map_err(e)?,
                "sigma" => c.sigma = parse_num(v).map_err(e)?,
                "seed" => c.seed = parse_num(v).map_err(e)?,
                k if k.starts_with("linear_map") => c.extra_linear_maps.push(parse_matrix(v).map_err(e)?),
                _ => return Err(err(line, format!("unknown key `{k}` in [verify]"))),
            }
        }

        for (line, k, v) in get("output") {
            match k.as_str() {
                "dir" => cfg.output_dir = PathBuf::from(v),
                _ => return Err(err(*line, format!("unknown key `{k}` in [output]"))),
            }
        }

        cfg.apply_seed_env()?;
        cfg.train.validate().map_err(|e| err(0, e.to_string()))?;
        cfg.sampler.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `SCOREAUG_SEED` to the training, sampling and verification seeds.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v.trim().parse().map_err(|e| Error::InvalidParam(format!("{SEED_ENV}=`{v}`: {e}")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sample_seed = seed;
        self.verify.seed = seed;
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        s.push_str("[dataset]\n");
        match &d.source {
            DataSource::Generator { generator, n, seed } => {
                let _ = writeln!(s, "generator = {}", generator_name(generator));
                let _ = writeln!(s, "n = {n}");
                let _ = writeln!(s, "seed = {seed}");
                match generator {
                    Generator::Glyphs { size } => {
                        let _ = writeln!(s, "size = {size}");
                    }
                    Generator::Gaussian { dim } => {
                        let _ = writeln!(s, "dim = {dim}");
                    }
                    Generator::Gmm2d => {}
                }
            }
            DataSource::File(p) => {
                let _ = writeln!(s, "path = {}", p.display());
            }
        }
        let _ = writeln!(s, "n_heldout = {}", d.n_heldout);
        if let Some(p) = &d.heldout_path {
            let _ = writeln!(s, "heldout_path = {}", p.display());
        }
        let _ = writeln!(s, "shape = {}x{}x{}", d.shape.height, d.shape.width, d.shape.channels);
        let _ = writeln!(s, "sigma_data = {}", d.sigma_data.map_or("auto".to_string(), |v| v.to_string()));

        let t = &self.train;
        let _ = writeln!(s, "\n[schedule]\nformulation = {}", t.schedule.formulation.name());

        let a = &t.augmentation;
        let kinds: Vec<&str> = a.kinds.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "\n[augmentation]\nkinds = {}", kinds.join(", "));
        let _ = writeln!(s, "brightness_max = {}", a.brightness_max);
        let _ = writeln!(s, "translation_ratio = {}", a.translation_ratio);
        let _ = writeln!(s, "cutout_ratio = {}", a.cutout_ratio);
        let _ = writeln!(s, "nonlinear_max = {}", a.nonlinear_max);
        let _ = writeln!(s, "explicit_identity_slot = {}", a.explicit_identity_slot);

        let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "\n[model]\nhidden = {}\nnoise_embed_dim = {}\ndropout = {}", hidden.join(", "), t.noise_embed_dim, t.dropout);

        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "variant = {}", t.variant);
        let _ = writeln!(s, "conditioning = {}", t.conditioning);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "ema_halflife = {}", t.ema_halflife);
        let _ = writeln!(s, "heldout_fraction = {}", t.heldout_fraction);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "n_eval = {}", t.n_eval);
        let _ = writeln!(s, "n_eval_samples = {}", t.n_eval_samples);
        let _ = writeln!(s, "eval_sampler_steps = {}", t.sampler.n_steps);

        let p = &self.sampler;
        let _ = writeln!(s, "\n[sampler]");
        let _ = writeln!(s, "n_steps = {}", p.n_steps);
        let _ = writeln!(s, "sigma_max = {}", p.sigma_max);
        let _ = writeln!(s, "sigma_min = {}", p.sigma_min);
        let _ = writeln!(s, "rho = {}", p.rho);
        let _ = writeln!(s, "condition = {}", p.condition.as_ref().map_or("none".to_string(), |c| c.to_string()));
        let _ = writeln!(s, "count = {}", self.sample_count);
        let _ = writeln!(s, "seed = {}", self.sample_seed);

        let v = &self.verify;
        let _ = writeln!(s, "\n[verify]\nn_mc = {}\ngrid = {}\nsigma = {}\nseed = {}", v.n_mc, v.grid, v.sigma, v.seed);
        for (i, m) in v.extra_linear_maps.iter().enumerate() {
            let _ = writeln!(s, "linear_map{i} = {}", format_matrix(m));
        }

        let _ = writeln!(s, "\n[output]\ndir = {}", self.output_dir.display());
        s
    }
}
