//! Augmentation operators acting on flattened images.
//!
//! Images are stored channel-major in row-major raster order: pixel
//! `(ch, r, c)` lives at `ch·H·W + r·W + c`. Every spatial transform acts on
//! each channel identically, so the full operator is block diagonal.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Height, width and channel count of the flattened data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    /// A flat vector of length `d` viewed as a single-row image.
    pub fn flat(d: usize) -> Self {
        Self::new(1, d, 1)
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    fn index(&self, ch: usize, r: usize, c: usize) -> usize {
        ch * self.height * self.width + r * self.width + c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugKind {
    Identity,
    Brightness,
    Translation,
    Cutout,
    Rotation,
    SmoothNonlinear,
}

impl AugKind {
    pub const ALL: [AugKind; 6] = [
        AugKind::Identity,
        AugKind::Brightness,
        AugKind::Translation,
        AugKind::Cutout,
        AugKind::Rotation,
        AugKind::SmoothNonlinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Identity => "identity",
            AugKind::Brightness => "brightness",
            AugKind::Translation => "translation",
            AugKind::Cutout => "cutout",
            AugKind::Rotation => "rotation",
            AugKind::SmoothNonlinear => "smooth_nonlinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AugKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidParam(format!("unknown augmentation kind `{s}`")))
    }

    pub fn is_linear(self) -> bool {
        self != AugKind::SmoothNonlinear
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One draw ω from the augmentation prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationParams {
    Identity,
    /// Multiply every pixel by `factor`.
    Brightness { factor: f64 },
    /// Shift content by `di` rows (positive moves down) and `dj` columns
    /// (positive moves right), zero filling the vacated pixels.
    Translation { di: i64, dj: i64 },
    /// Zero an `h × w` rectangle centred at fractional coordinates
    /// (`cx` horizontal, `cy` vertical).
    Cutout { cx: f64, cy: f64, h: usize, w: usize },
    /// Counter-clockwise rotation by `quarter_turns · 90°`.
    Rotation { quarter_turns: u8 },
    /// Elementwise `x + a·tanh(x)`.
    SmoothNonlinear { strength: f64 },
}

impl AugmentationParams {
    pub fn kind(&self) -> AugKind {
        match self {
            AugmentationParams::Identity => AugKind::Identity,
            AugmentationParams::Brightness { .. } => AugKind::Brightness,
            AugmentationParams::Translation { .. } => AugKind::Translation,
            AugmentationParams::Cutout { .. } => AugKind::Cutout,
            AugmentationParams::Rotation { .. } => AugKind::Rotation,
            AugmentationParams::SmoothNonlinear { .. } => AugKind::SmoothNonlinear,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.kind() != AugKind::SmoothNonlinear
    }

    /// Parses the `kind[:p1,p2,...]` notation used on the command line, e.g.
    /// `rotation:2`, `brightness:1.5`, `translation:1,-2`, `cutout:0.5,0.5,4,4`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n, r),
            None => (s, ""),
        };
        let kind = AugKind::parse(name)?;
        let nums: Vec<f64> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidParam(format!("bad number `{t}` in `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        let need = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!("`{name}` takes {n} parameter(s), got {}", nums.len())))
            }
        };
        Ok(match kind {
            AugKind::Identity => {
                need(0)?;
                AugmentationParams::Identity
            }
            AugKind::Brightness => {
                need(1)?;
                AugmentationParams::Brightness { factor: nums[0] }
            }
            AugKind::Translation => {
                need(2)?;
                AugmentationParams::Translation { di: nums[0] as i64, dj: nums[1] as i64 }
            }
            AugKind::Cutout => {
                need(4)?;
                AugmentationParams::Cutout {
                    cx: nums[0],
                    cy: nums[1],
                    h: nums[2] as usize,
                    w: nums[3] as usize,
                }
            }
            AugKind::Rotation => {
                need(1)?;
                AugmentationParams::Rotation { quarter_turns: nums[0] as u8 }
            }
            AugKind::SmoothNonlinear => {
                need(1)?;
                AugmentationParams::SmoothNonlinear { strength: nums[0] }
            }
        })
    }
}

impl fmt::Display for AugmentationParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AugmentationParams::Identity => write!(f, "identity"),
            AugmentationParams::Brightness { factor } => write!(f, "brightness:{factor}"),
            AugmentationParams::Translation { di, dj } => write!(f, "translation:{di},{dj}"),
            AugmentationParams::Cutout { cx, cy, h, w } => write!(f, "cutout:{cx},{cy},{h},{w}"),
            AugmentationParams::Rotation { quarter_turns } => write!(f, "rotation:{quarter_turns}"),
            AugmentationParams::SmoothNonlinear { strength } => write!(f, "smooth_nonlinear:{strength}"),
        }
    }
}

/// Enabled kinds and their ranges (`B`, `R_t`, `R_c`).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub kinds: Vec<AugKind>,
    /// Brightness factors are drawn from `[1/B, B]`.
    pub brightness_max: f64,
    /// Shifts satisfy `|Δi| ≤ ⌊R_t·W⌋`, `|Δj| ≤ ⌊R_t·H⌋`.
    pub translation_ratio: f64,
    /// Cutout extents satisfy `h ≤ R_c·H`, `w ≤ R_c·W`.
    pub cutout_ratio: f64,
    /// Smooth nonlinear strengths are drawn from `[-a_max, a_max]`.
    pub nonlinear_max: f64,
    pub shape: ImageShape,
    /// Give identity its own one-hot slot in the condition vector instead of
    /// encoding it as all zeros.
    pub explicit_identity_slot: bool,
}

impl AugmentationConfig {
    pub fn new(shape: ImageShape, kinds: Vec<AugKind>) -> Self {
        Self {
            kinds,
            brightness_max: 2.0,
            translation_ratio: 0.125,
            cutout_ratio: 0.5,
            nonlinear_max: 0.5,
            shape,
            explicit_identity_slot: false,
        }
    }

    pub fn identity_only(shape: ImageShape) -> Self {
        Self::new(shape, vec![AugKind::Identity])
    }

    /// Augmentation mixes used at full scale, keyed by name.
    pub fn preset(name: &str, shape: ImageShape) -> Result<Self> {
        use AugKind::*;
        let mut cfg = Self::new(shape, vec![]);
        match name {
            "cifar10" => {
                cfg.kinds = vec![Brightness, Translation, Cutout, Rotation];
                cfg.brightness_max = 2.0;
                cfg.translation_ratio = 0.25;
                cfg.cutout_ratio = 0.5;
            }
            "ffhq" | "afhq" => {
                cfg.kinds = vec![Translation, Cutout, Rotation];
                cfg.translation_ratio = 0.25;
                cfg.cutout_ratio = 0.5;
            }
            "cifar10_nla" => {
                cfg.kinds = vec![Translation, Cutout];
                cfg.translation_ratio = 0.125;
                cfg.cutout_ratio = 0.25;
            }
            "ffhq_nla" => {
                cfg.kinds = vec![Identity, Translation, Cutout];
                cfg.translation_ratio = 0.125;
                cfg.cutout_ratio = 0.25;
            }
            "afhq_nla" => {
                cfg.kinds = vec![Brightness, Translation, Cutout];
                cfg.brightness_max = 2.0;
                cfg.translation_ratio = 0.125;
                cfg.cutout_ratio = 0.25;
            }
            "imagenet" => {
                cfg.kinds = vec![Translation];
                cfg.translation_ratio = 0.0325;
            }
            "rotation" => cfg.kinds = vec![Rotation],
            "none" => cfg.kinds = vec![Identity],
            _ => return Err(Error::InvalidParam(format!("unknown augmentation preset `{name}`"))),
        }
        Ok(cfg)
    }

    pub fn max_shift_i(&self) -> i64 {
        (self.translation_ratio * self.shape.width as f64).floor() as i64
    }

    pub fn max_shift_j(&self) -> i64 {
        (self.translation_ratio * self.shape.height as f64).floor() as i64
    }

    pub fn max_cut_h(&self) -> usize {
        ((self.cutout_ratio * self.shape.height as f64).floor() as usize).max(1)
    }

    pub fn max_cut_w(&self) -> usize {
        ((self.cutout_ratio * self.shape.width as f64).floor() as usize).max(1)
    }

    /// The kinds actually drawn from. Identity is appended unless an enabled
    /// kind already contains the identity map in its support (rotation with
    /// zero turns, translation with zero shift).
    pub fn effective_kinds(&self) -> Vec<AugKind> {
        let mut kinds = self.kinds.clone();
        kinds.sort();
        kinds.dedup();
        let has_identity = kinds
            .iter()
            .any(|k| matches!(k, AugKind::Identity | AugKind::Rotation | AugKind::Translation));
        if !kinds.is_empty() && !has_identity {
            kinds.insert(0, AugKind::Identity);
        }
        kinds
    }

    /// Checks `params` against the configured ranges.
    pub fn validate(&self, params: &AugmentationParams) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        match *params {
            AugmentationParams::Identity => Ok(()),
            AugmentationParams::Brightness { factor } => {
                let b = self.brightness_max;
                if factor.is_finite() && factor >= 1.0 / b - 1e-12 && factor <= b + 1e-12 {
                    Ok(())
                } else {
                    bad(format!("brightness factor {factor} outside [1/{b}, {b}]"))
                }
            }
            AugmentationParams::Translation { di, dj } => {
                if di.abs() <= self.max_shift_i() && dj.abs() <= self.max_shift_j() {
                    Ok(())
                } else {
                    bad(format!("translation ({di}, {dj}) exceeds the configured range"))
                }
            }
            AugmentationParams::Cutout { cx, cy, h, w } => {
                let (hh, ww) = (self.shape.height as f64, self.shape.width as f64);
                if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                    bad(format!("cutout centre ({cx}, {cy}) outside [0,1]²"))
                } else if h == 0 || w == 0 || h as f64 > self.cutout_ratio * hh + 1e-9 || w as f64 > self.cutout_ratio * ww + 1e-9 {
                    bad(format!("cutout size {h}×{w} outside the configured range"))
                } else {
                    Ok(())
                }
            }
            AugmentationParams::Rotation { quarter_turns } => {
                if quarter_turns < 4 {
                    Ok(())
                } else {
                    bad(format!("rotation quarter turns {quarter_turns} not in 0..4"))
                }
            }
            AugmentationParams::SmoothNonlinear { strength } => {
                if strength.abs() < 1.0 {
                    Ok(())
                } else {
                    bad(format!("smooth-nonlinear strength {strength} not in (-1, 1)"))
                }
            }
        }
    }

    /// Length of [`condition_vector`] output.
    pub fn condition_len(&self) -> usize {
        ONE_HOT_SLOTS + usize::from(self.explicit_identity_slot) + PARAM_SLOTS
    }
}

const ONE_HOT_SLOTS: usize = 5;
const PARAM_SLOTS: usize = 8;

/// Draw ω: uniform over the effective kinds, then uniform parameters.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentationConfig) -> Result<AugmentationParams> {
    let kinds = cfg.effective_kinds();
    if kinds.is_empty() {
        return Err(Error::InvalidParam("augmentation config enables no kinds".into()));
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    Ok(match kind {
        AugKind::Identity => AugmentationParams::Identity,
        AugKind::Brightness => {
            let b = cfg.brightness_max;
            AugmentationParams::Brightness { factor: rng.random_range(1.0 / b..=b) }
        }
        AugKind::Translation => {
            let (mi, mj) = (cfg.max_shift_i(), cfg.max_shift_j());
            AugmentationParams::Translation {
                di: rng.random_range(-mi..=mi),
                dj: rng.random_range(-mj..=mj),
            }
        }
        AugKind::Cutout => AugmentationParams::Cutout {
            cx: rng.random_range(0.0..=1.0),
            cy: rng.random_range(0.0..=1.0),
            h: rng.random_range(1..=cfg.max_cut_h()),
            w: rng.random_range(1..=cfg.max_cut_w()),
        },
        AugKind::Rotation => AugmentationParams::Rotation { quarter_turns: rng.random_range(0..4u8) },
        AugKind::SmoothNonlinear => {
            let a = cfg.nonlinear_max;
            AugmentationParams::SmoothNonlinear { strength: rng.random_range(-a..=a) }
        }
    })
}

/// Fixed-length encoding of ω: a one-hot block over the non-identity kinds
/// (plus an identity slot when configured) followed by normalized parameters.
///
/// Parameter block: `[ln ω_b / ln B, Δi/H, Δj/W, h/H, w/W, cos θ − 1, sin θ, a]`.
/// The cutout centre is dropped, and identity maps to an all-zero parameter
/// block (and an all-zero vector without the explicit slot).
pub fn condition_vector(params: &AugmentationParams, cfg: &AugmentationConfig) -> Vec<f64> {
    let off = usize::from(cfg.explicit_identity_slot);
    let mut v = vec![0.0; cfg.condition_len()];
    let slot = |k: AugKind| -> Option<usize> {
        match k {
            AugKind::Identity => cfg.explicit_identity_slot.then_some(0),
            AugKind::Brightness => Some(off),
            AugKind::Translation => Some(off + 1),
            AugKind::Cutout => Some(off + 2),
            AugKind::Rotation => Some(off + 3),
            AugKind::SmoothNonlinear => Some(off + 4),
        }
    };
    if let Some(s) = slot(params.kind()) {
        v[s] = 1.0;
    }
    let p = off + ONE_HOT_SLOTS;
    let (hh, ww) = (cfg.shape.height as f64, cfg.shape.width as f64);
    match *params {
        AugmentationParams::Identity => {}
        AugmentationParams::Brightness { factor } => v[p] = factor.ln() / cfg.brightness_max.ln(),
        AugmentationParams::Translation { di, dj } => {
            v[p + 1] = di as f64 / hh;
            v[p + 2] = dj as f64 / ww;
        }
        AugmentationParams::Cutout { h, w, .. } => {
            v[p + 3] = h as f64 / hh;
            v[p + 4] = w as f64 / ww;
        }
        AugmentationParams::Rotation { quarter_turns } => {
            let theta = std::f64::consts::FRAC_PI_2 * quarter_turns as f64;
            // exact values at multiples of 90°
            let (s, c) = match quarter_turns % 4 {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                3 => (-1.0, 0.0),
                _ => theta.sin_cos(),
            };
            v[p + 5] = c - 1.0;
            v[p + 6] = s;
        }
        AugmentationParams::SmoothNonlinear { strength } => v[p + 7] = strength,
    }
    v
}

#[derive(Debug, Clone)]
enum Repr {
    /// `out[i] = scale · in[src[i]]`, zero where `src[i]` is `None`.
    Gather { src: Vec<Option<usize>>, scale: f64 },
    Dense(DMatrix<f64>),
}

/// A linear map `ℝⁿ → ℝᵐ` with its adjoint.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    rows: usize,
    cols: usize,
    repr: Repr,
}

impl LinearOperator {
    pub fn identity(d: usize) -> Self {
        Self::gather((0..d).map(Some).collect(), d, 1.0)
    }

    pub fn dense(m: DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), repr: Repr::Dense(m) }
    }

    fn gather(src: Vec<Option<usize>>, cols: usize, scale: f64) -> Self {
        Self { rows: src.len(), cols, repr: Repr::Gather { src, scale } }
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "operator input length");
        match &self.repr {
            Repr::Gather { src, scale } => src
                .iter()
                .map(|s| match s {
                    Some(j) => scale * x[*j],
                    None => 0.0,
                })
                .collect(),
            Repr::Dense(m) => linalg::mat_vec(m, x),
        }
    }

    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "adjoint input length");
        match &self.repr {
            Repr::Gather { src, scale } => {
                let mut x = vec![0.0; self.cols];
                for (i, s) in src.iter().enumerate() {
                    if let Some(j) = s {
                        x[*j] += scale * y[i];
                    }
                }
                x
            }
            Repr::Dense(m) => linalg::mat_vec(&m.transpose(), y),
        }
    }

    pub fn materialize(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Gather { src, scale } => {
                let mut m = DMatrix::zeros(self.rows, self.cols);
                for (i, s) in src.iter().enumerate() {
                    if let Some(j) = s {
                        m[(i, *j)] = *scale;
                    }
                }
                m
            }
            Repr::Dense(m) => m.clone(),
        }
    }

    /// `𝐓𝐓ᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.materialize();
        &m * m.transpose()
    }

    /// Composition `self ∘ other`.
    pub fn compose(&self, other: &LinearOperator) -> LinearOperator {
        assert_eq!(self.cols, other.rows);
        match (&self.repr, &other.repr) {
            (Repr::Gather { src: a, scale: sa }, Repr::Gather { src: b, scale: sb }) => {
                let src = a.iter().map(|s| s.and_then(|j| b[j])).collect();
                Self::gather(src, other.cols, sa * sb)
            }
            _ => Self::dense(self.materialize() * other.materialize()),
        }
    }
}

/// Exact matrix realization of a linear augmentation on `shape`.
pub fn build_operator(params: &AugmentationParams, shape: ImageShape) -> Result<LinearOperator> {
    let d = shape.dim();
    if d == 0 {
        return Err(Error::Dimension("image has zero size".into()));
    }
    let (h, w) = (shape.height, shape.width);
    let spatial = |f: &dyn Fn(usize, usize) -> Option<(usize, usize)>, scale: f64| {
        let mut src = vec![None; d];
        for ch in 0..shape.channels {
            for r in 0..h {
                for c in 0..w {
                    src[shape.index(ch, r, c)] = f(r, c).map(|(sr, sc)| shape.index(ch, sr, sc));
                }
            }
        }
        LinearOperator::gather(src, d, scale)
    };
    Ok(match *params {
        AugmentationParams::Identity => LinearOperator::identity(d),
        AugmentationParams::Brightness { factor } => {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(Error::InvalidParam(format!("brightness factor {factor} must be positive")));
            }
            LinearOperator::gather((0..d).map(Some).collect(), d, factor)
        }
        AugmentationParams::Translation { di, dj } => spatial(
            &|r, c| {
                let sr = r as i64 - di;
                let sc = c as i64 - dj;
                (sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64).then_some((sr as usize, sc as usize))
            },
            1.0,
        ),
        AugmentationParams::Cutout { cx, cy, h: ch, w: cw } => {
            let (cy_px, cx_px) = (cy * h as f64, cx * w as f64);
            spatial(
                &|r, c| {
                    let inside = ((r as f64 + 0.5) - cy_px).abs() <= ch as f64 / 2.0
                        && ((c as f64 + 0.5) - cx_px).abs() <= cw as f64 / 2.0;
                    (!inside).then_some((r, c))
                },
                1.0,
            )
        }
        AugmentationParams::Rotation { quarter_turns } => {
            if h != w {
                return Err(Error::Dimension(format!("rotation needs a square image, got {h}×{w}")));
            }
            if quarter_turns > 3 {
                return Err(Error::InvalidParam(format!("rotation quarter turns {quarter_turns} not in 0..4")));
            }
            let n = h - 1;
            spatial(
                &|r, c| {
                    Some(match quarter_turns {
                        0 => (r, c),
                        1 => (c, n - r),
                        2 => (n - r, n - c),
                        _ => (n - c, r),
                    })
                },
                1.0,
            )
        }
        AugmentationParams::SmoothNonlinear { .. } => {
            return Err(Error::InvalidParam(
                "smooth_nonlinear has no matrix form; use the nonlinear loss path".into(),
            ))
        }
    })
}

/// Apply any augmentation, linear or not, to a flat vector.
pub fn apply_transform(params: &AugmentationParams, shape: ImageShape, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != shape.dim() {
        return Err(Error::Dimension(format!("vector of length {} for image of size {}", x.len(), shape.dim())));
    }
    match *params {
        AugmentationParams::SmoothNonlinear { strength } => {
            Ok(x.iter().map(|v| v + strength * v.tanh()).collect())
        }
        _ => Ok(build_operator(params, shape)?.apply(x)),
    }
}

/// `(𝐓𝐓ᵀ)†`.
pub fn gram_pseudoinverse(op: &LinearOperator) -> DMatrix<f64> {
    linalg::psd_spectrum(&op.gram()).pinv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Independent brute-force transforms over a nested `[ch][r][c]` image.
    fn brute(params: &AugmentationParams, shape: ImageShape, x: &[f64]) -> Vec<f64> {
        let (h, w) = (shape.height, shape.width);
        let img: Vec<Vec<Vec<f64>>> = (0..shape.channels)
            .map(|ch| (0..h).map(|r| (0..w).map(|c| x[ch * h * w + r * w + c]).collect()).collect())
            .collect();
        let mut out = img.clone();
        for ch in 0..shape.channels {
            match *params {
                AugmentationParams::Identity => {}
                AugmentationParams::Brightness { factor } => {
                    for row in out[ch].iter_mut() {
                        for v in row.iter_mut() {
                            *v *= factor;
                        }
                    }
                }
                AugmentationParams::Translation { di, dj } => {
                    for r in 0..h {
                        for c in 0..w {
                            out[ch][r][c] = 0.0;
                        }
                    }
                    for r in 0..h {
                        for c in 0..w {
                            let (tr, tc) = (r as i64 + di, c as i64 + dj);
                            if (0..h as i64).contains(&tr) && (0..w as i64).contains(&tc) {
                                out[ch][tr as usize][tc as usize] = img[ch][r][c];
                            }
                        }
                    }
                }
                AugmentationParams::Cutout { cx, cy, h: ch_, w: cw } => {
                    // rows/cols whose pixel centres fall within the box
                    for r in 0..h {
                        for c in 0..w {
                            let dy = (r as f64 + 0.5 - cy * h as f64).abs();
                            let dx = (c as f64 + 0.5 - cx * w as f64).abs();
                            if 2.0 * dy <= ch_ as f64 && 2.0 * dx <= cw as f64 {
                                out[ch][r][c] = 0.0;
                            }
                        }
                    }
                }
                AugmentationParams::Rotation { quarter_turns } => {
                    let mut cur = img[ch].clone();
                    for _ in 0..quarter_turns {
                        // np.rot90: out[r][c] = in[c][n-1-r]
                        let n = h;
                        let mut next = cur.clone();
                        for r in 0..n {
                            for c in 0..n {
                                next[r][c] = cur[c][n - 1 - r];
                            }
                        }
                        cur = next;
                    }
                    out[ch] = cur;
                }
                AugmentationParams::SmoothNonlinear { .. } => unreachable!(),
            }
        }
        out.into_iter().flatten().flatten().collect()
    }

    fn all_params(shape: ImageShape) -> Vec<AugmentationParams> {
        let mut v = vec![
            AugmentationParams::Identity,
            AugmentationParams::Brightness { factor: 1.7 },
            AugmentationParams::Cutout { cx: 0.3, cy: 0.7, h: 2, w: 3 },
            AugmentationParams::Cutout { cx: 0.0, cy: 1.0, h: 1, w: 1 },
        ];
        for di in -2..=2 {
            for dj in -2..=2 {
                v.push(AugmentationParams::Translation { di, dj });
            }
        }
        if shape.height == shape.width {
            for q in 0..4 {
                v.push(AugmentationParams::Rotation { quarter_turns: q });
            }
        }
        v
    }

    #[test]
    fn brightness_one_is_identity() {
        let op = build_operator(&AugmentationParams::Brightness { factor: 1.0 }, ImageShape::new(3, 3, 1)).unwrap();
        assert_eq!(op.materialize(), DMatrix::identity(9, 9));
    }

    #[test]
    fn rotation_180_reverses_raster() {
        let op = build_operator(&AugmentationParams::Rotation { quarter_turns: 2 }, ImageShape::new(2, 2, 1)).unwrap();
        assert_eq!(op.apply(&[0.0, 1.0, 10.0, 11.0]), vec![11.0, 10.0, 1.0, 0.0]);
    }

    #[test]
    fn full_cutout_is_zero() {
        let op = build_operator(&AugmentationParams::Cutout { cx: 0.5, cy: 0.5, h: 6, w: 4 }, ImageShape::new(6, 4, 2)).unwrap();
        assert_eq!(op.materialize(), DMatrix::zeros(48, 48));
    }

    #[test]
    fn translation_matches_brute_shift_2x2() {
        let shape = ImageShape::new(2, 2, 1);
        let p = AugmentationParams::Translation { di: 1, dj: 0 };
        let x = [1.0, 2.0, 3.0, 4.0];
        let op = build_operator(&p, shape).unwrap();
        assert_eq!(op.apply(&x), brute(&p, shape, &x));
        assert_eq!(op.apply(&x), vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn nonlinear_rejected_and_dims_checked() {
        let shape = ImageShape::new(2, 3, 1);
        assert!(build_operator(&AugmentationParams::SmoothNonlinear { strength: 0.3 }, shape).is_err());
        assert!(build_operator(&AugmentationParams::Rotation { quarter_turns: 1 }, shape).is_err());
        assert!(apply_transform(&AugmentationParams::Identity, shape, &[1.0; 5]).is_err());
    }

    #[test]
    fn operators_match_brute_force_entrywise() {
        for (h, w, chans) in [(1, 1, 1), (2, 2, 1), (3, 5, 2), (4, 4, 3), (8, 8, 1), (5, 7, 1)] {
            let shape = ImageShape::new(h, w, chans);
            let d = shape.dim();
            for p in all_params(shape) {
                let op = build_operator(&p, shape).unwrap();
                let m = op.materialize();
                for j in 0..d {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    let col = brute(&p, shape, &e);
                    for i in 0..d {
                        assert_eq!(m[(i, j)], col[i], "{p} on {h}x{w}x{chans} at ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = ImageShape::new(6, 6, 2);
        let d = shape.dim();
        for p in all_params(shape) {
            let op = build_operator(&p, shape).unwrap();
            for _ in 0..100 {
                let (x, y, z) = (randn(&mut rng, d), randn(&mut rng, d), randn(&mut rng, d));
                let lhs = linalg::dot(&op.apply(&x), &y);
                let rhs = linalg::dot(&x, &op.adjoint(&y));
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())), "{p}");
                let (a, b) = (0.7, -1.3);
                let comb: Vec<f64> = x.iter().zip(&z).map(|(u, v)| a * u + b * v).collect();
                let lhs = op.apply(&comb);
                let rhs: Vec<f64> = op.apply(&x).iter().zip(op.apply(&z)).map(|(u, v)| a * u + b * v).collect();
                assert!(linalg::rel_err(&lhs, &rhs) < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let shape = ImageShape::new(5, 5, 2);
        let r = build_operator(&AugmentationParams::Rotation { quarter_turns: 1 }, shape).unwrap();
        let x: Vec<f64> = (0..shape.dim()).map(|i| i as f64 * 0.37 - 3.0).collect();
        let mut y = x.clone();
        for _ in 0..4 {
            y = r.apply(&y);
        }
        assert_eq!(x, y);
        let r4 = r.compose(&r).compose(&r).compose(&r);
        assert_eq!(r4.materialize(), DMatrix::identity(50, 50));
    }

    #[test]
    fn brightness_group_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ImageShape::new(4, 4, 1);
        let (a, b) = (1.3, 0.6);
        let oa = build_operator(&AugmentationParams::Brightness { factor: a }, shape).unwrap();
        let ob = build_operator(&AugmentationParams::Brightness { factor: b }, shape).unwrap();
        let oab = build_operator(&AugmentationParams::Brightness { factor: a * b }, shape).unwrap();
        for _ in 0..50 {
            let x = randn(&mut rng, 16);
            assert!(linalg::rel_err(&oa.apply(&ob.apply(&x)), &oab.apply(&x)) < 1e-12);
        }
    }

    #[test]
    fn gram_pseudoinverse_examples() {
        let shape = ImageShape::new(4, 4, 1);
        let g = gram_pseudoinverse(&build_operator(&AugmentationParams::Brightness { factor: 2.0 }, shape).unwrap());
        assert!((g - DMatrix::identity(16, 16) * 0.25).abs().max() < 1e-14);
        let g = gram_pseudoinverse(&build_operator(&AugmentationParams::Rotation { quarter_turns: 3 }, shape).unwrap());
        assert!((g - DMatrix::identity(16, 16)).abs().max() < 1e-14);
        let cut = build_operator(&AugmentationParams::Cutout { cx: 0.4, cy: 0.6, h: 2, w: 2 }, shape).unwrap();
        let proj = cut.gram();
        assert!((gram_pseudoinverse(&cut) - &proj).abs().max() < 1e-14);
    }

    #[test]
    fn penrose_conditions() {
        let shape = ImageShape::new(5, 5, 1);
        let mut params = all_params(shape);
        params.push(AugmentationParams::Brightness { factor: 0.55 });
        for p in params {
            let op = build_operator(&p, shape).unwrap();
            let g = op.gram();
            let pi = gram_pseudoinverse(&op);
            let tol = 1e-10;
            assert!((&g * &pi * &g - &g).abs().max() < tol, "{p}");
            assert!((&pi * &g * &pi - &pi).abs().max() < tol, "{p}");
            let gp = &g * &pi;
            assert!((gp.transpose() - &gp).abs().max() < tol, "{p}");
            let pg = &pi * &g;
            assert!((pg.transpose() - &pg).abs().max() < tol, "{p}");
        }
    }

    #[test]
    fn sampling_identity_only_and_replay() {
        let shape = ImageShape::new(8, 8, 1);
        let cfg = AugmentationConfig::identity_only(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_params(&mut rng, &cfg).unwrap(), AugmentationParams::Identity);
        }
        let cfg = AugmentationConfig::preset("cifar10", shape).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_params(&mut rng, &cfg).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        for p in &a {
            cfg.validate(p).unwrap();
        }
        assert!(sample_params(&mut rng, &AugmentationConfig::new(shape, vec![])).is_err());
    }

    #[test]
    fn rotation_frequencies_are_uniform() {
        let cfg = AugmentationConfig::new(ImageShape::new(4, 4, 1), vec![AugKind::Rotation]);
        assert_eq!(cfg.effective_kinds(), vec![AugKind::Rotation]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match sample_params(&mut rng, &cfg).unwrap() {
                AugmentationParams::Rotation { quarter_turns } => counts[quarter_turns as usize] += 1,
                other => panic!("unexpected {other}"),
            }
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let e = n as f64 / 4.0;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 3 dof, 99.9% quantile
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn identity_added_only_when_missing() {
        let shape = ImageShape::new(4, 4, 1);
        let cfg = AugmentationConfig::new(shape, vec![AugKind::Brightness, AugKind::Cutout]);
        assert_eq!(cfg.effective_kinds()[0], AugKind::Identity);
        let cfg = AugmentationConfig::new(shape, vec![AugKind::Translation]);
        assert_eq!(cfg.effective_kinds(), vec![AugKind::Translation]);
    }

    #[test]
    fn condition_vectors() {
        let shape = ImageShape::new(8, 8, 1);
        let mut cfg = AugmentationConfig::preset("cifar10", shape).unwrap();
        assert!(condition_vector(&AugmentationParams::Identity, &cfg).iter().all(|&v| v == 0.0));
        cfg.explicit_identity_slot = true;
        let id = condition_vector(&AugmentationParams::Identity, &cfg);
        assert_eq!(id[0], 1.0);
        assert!(id[1..].iter().all(|&v| v == 0.0));
        cfg.explicit_identity_slot = false;

        let a = condition_vector(&AugmentationParams::Cutout { cx: 0.3, cy: 0.7, h: 4, w: 2 }, &cfg);
        let b = condition_vector(&AugmentationParams::Cutout { cx: 0.9, cy: 0.1, h: 4, w: 2 }, &cfg);
        assert_eq!(a, b);
        let params = &a[ONE_HOT_SLOTS..];
        assert_eq!(params[3], 0.5);
        assert_eq!(params[4], 0.25);
        assert!(!a.contains(&0.3) && !a.contains(&0.7));

        let r0 = condition_vector(&AugmentationParams::Rotation { quarter_turns: 0 }, &cfg);
        let r2 = condition_vector(&AugmentationParams::Rotation { quarter_turns: 2 }, &cfg);
        assert_ne!(r0, r2);
        assert_eq!(r0.len(), cfg.condition_len());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["identity", "rotation:2", "brightness:1.5", "translation:1,-2", "cutout:0.5,0.25,4,2", "smooth_nonlinear:0.3"] {
            let p = AugmentationParams::parse(s).unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!(AugmentationParams::parse("rotation").is_err());
        assert!(AugmentationParams::parse("warp:1").is_err());
    }
}
