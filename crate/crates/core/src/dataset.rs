//! Empirical datasets, their text file format, and the built-in generators.
//!
//! File format: a header line `d N`, then `N` rows of `d` whitespace-separated
//! values. Values are written in Rust's shortest round-trip form, so a file
//! re-parses to bit-identical values.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::transforms::ImageShape;

/// `N` points in `ℝ^d` defining a Dirac-mixture data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDataset {
    points: Vec<Vec<f64>>,
    dim: usize,
    sigma_data: f64,
    shape: ImageShape,
}

impl EmpiricalDataset {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidParam("dataset needs at least one point".into()))?;
        if dim == 0 {
            return Err(Error::Dimension("points have zero dimension".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Dimension(format!("point {i} has length {}, expected {dim}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!("point {i} has a non-finite value")));
            }
        }
        let sigma_data = pooled_std(&points);
        Ok(Self { points, dim, sigma_data, shape: ImageShape::flat(dim) })
    }

    pub fn with_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.dim() != self.dim {
            return Err(Error::Dimension(format!("shape of size {} for data of dimension {}", shape.dim(), self.dim)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn with_sigma_data(mut self, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_data must be positive, got {sigma_data}")));
        }
        self.sigma_data = sigma_data;
        Ok(self)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for p in &self.points {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v / n;
            }
        }
        m
    }

    /// Split off the trailing `fraction` of points as a held-out set.
    pub fn split(&self, fraction: f64) -> Result<(EmpiricalDataset, Option<EmpiricalDataset>)> {
        if !(0.0..=0.5).contains(&fraction) {
            return Err(Error::InvalidParam(format!("held-out fraction {fraction} not in [0, 0.5]")));
        }
        let n_held = (fraction * self.len() as f64).round() as usize;
        if n_held == 0 {
            return Ok((self.clone(), None));
        }
        let cut = self.len() - n_held;
        let keep = |pts: &[Vec<f64>]| -> Result<EmpiricalDataset> {
            EmpiricalDataset::new(pts.to_vec())?.with_shape(self.shape)
        };
        Ok((keep(&self.points[..cut])?, Some(keep(&self.points[cut..])?)))
    }

    /// Apply `f` to every point, keeping the shape.
    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<EmpiricalDataset> {
        EmpiricalDataset::new(self.points.iter().map(|p| f(p)).collect())?.with_shape(self.shape)
    }

    pub fn concat(&self, other: &EmpiricalDataset) -> Result<EmpiricalDataset> {
        let mut pts = self.points.clone();
        pts.extend(other.points.iter().cloned());
        EmpiricalDataset::new(pts)?.with_shape(self.shape)
    }

    pub fn to_text(&self) -> String {
        write_rows(&self.points, self.dim)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty dataset file".into() })?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse { line: hl + 1, msg: format!("bad header field `{s}`") });
        if head.len() != 2 {
            return Err(Error::Parse { line: hl + 1, msg: "header must be `d N`".into() });
        }
        let (d, n) = (parse_usize(head[0])?, parse_usize(head[1])?);
        let mut points = Vec::with_capacity(n);
        for (ln, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Parse { line: ln + 1, msg: format!("bad value `{t}`") }))
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(Error::Parse { line: ln + 1, msg: format!("expected {d} values, found {}", row.len()) });
            }
            points.push(row);
        }
        if points.len() != n {
            return Err(Error::Parse { line: hl + 1, msg: format!("header declares {n} rows, found {}", points.len()) });
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Render rows in the dataset file format.
pub fn write_rows(rows: &[Vec<f64>], dim: usize) -> String {
    let mut s = format!("{} {}\n", dim, rows.len());
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

/// Pooled per-coordinate standard deviation.
fn pooled_std(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let ss: f64 = points
        .iter()
        .flat_map(|p| p.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
        .sum();
    (ss / (n * d) as f64).sqrt()
}

/// Built-in synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Three unequal, anisotropic clusters in the plane.
    Gmm2d,
    /// `size × size` single-channel L-shaped glyphs with random bar placement,
    /// values in `[-1, 1]`.
    Glyphs { size: usize },
    /// A single isotropic Gaussian blob in `d` dimensions.
    Gaussian { dim: usize },
}

impl Generator {
    pub fn parse(name: &str, size: usize, dim: usize) -> Result<Self> {
        match name {
            "gmm2d" => Ok(Generator::Gmm2d),
            "glyphs" => Ok(Generator::Glyphs { size }),
            "gaussian" => Ok(Generator::Gaussian { dim }),
            other => Err(Error::InvalidParam(format!("unknown generator `{other}`"))),
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<EmpiricalDataset> {
        if n == 0 {
            return Err(Error::InvalidParam("generator asked for zero points".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            Generator::Gmm2d => {
                const MEANS: [[f64; 2]; 3] = [[1.2, 0.6], [-0.9, 1.1], [0.2, -1.3]];
                const STDS: [[f64; 2]; 3] = [[0.25, 0.1], [0.1, 0.3], [0.2, 0.2]];
                const WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
                let pts = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let k = if u < WEIGHTS[0] {
                            0
                        } else if u < WEIGHTS[0] + WEIGHTS[1] {
                            1
                        } else {
                            2
                        };
                        (0..2)
                            .map(|j| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                MEANS[k][j] + STDS[k][j] * z
                            })
                            .collect()
                    })
                    .collect();
                EmpiricalDataset::new(pts)
            }
            Generator::Glyphs { size } => {
                if size < 4 {
                    return Err(Error::InvalidParam("glyphs need size >= 4".into()));
                }
                let pts = (0..n).map(|_| glyph(&mut rng, size)).collect();
                EmpiricalDataset::new(pts)?.with_shape(ImageShape::new(size, size, 1))
            }
            Generator::Gaussian { dim } => {
                let pts = (0..n)
                    .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                EmpiricalDataset::new(pts)
            }
        }
    }
}

/// A horizontal bar with a downward stub hanging from its left end.
fn glyph(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut img = vec![-1.0; size * size];
    let len = rng.random_range(size / 2..=size - 1);
    let stub = rng.random_range(2..=size / 2);
    let row = rng.random_range(0..=size - 1 - stub);
    let col = rng.random_range(0..=size - len);
    for c in col..col + len {
        img[row * size + c] = 1.0;
    }
    for r in row..=row + stub {
        img[r * size + col] = 1.0;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let ds = Generator::Gmm2d.generate(50, 3).unwrap();
        let back = EmpiricalDataset::parse(&ds.to_text()).unwrap();
        assert_eq!(ds.points(), back.points());
        let ds = EmpiricalDataset::new(vec![vec![0.1 + 0.2, -1e-300, 1e300], vec![f64::MIN_POSITIVE, 3.0, -0.0]]).unwrap();
        let back = EmpiricalDataset::parse(&ds.to_text()).unwrap();
        for (a, b) in ds.points().iter().flatten().zip(back.points().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parse_errors_carry_lines() {
        match EmpiricalDataset::parse("2 2\n1 2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(EmpiricalDataset::parse("2 3\n1 2\n").is_err());
        assert!(EmpiricalDataset::parse("").is_err());
    }

    #[test]
    fn sigma_data_is_pooled_std() {
        let ds = EmpiricalDataset::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!((ds.sigma_data() - 1.0).abs() < 1e-15);
        let one = EmpiricalDataset::new(vec![vec![2.0, 3.0]]).unwrap();
        assert_eq!(one.sigma_data(), 0.0);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = Generator::Glyphs { size: 8 }.generate(10, 7).unwrap();
        assert_eq!(a, Generator::Glyphs { size: 8 }.generate(10, 7).unwrap());
        assert_eq!(a.shape(), ImageShape::new(8, 8, 1));
        assert!(a.points().iter().flatten().all(|v| *v == 1.0 || *v == -1.0));
        assert_ne!(a, Generator::Glyphs { size: 8 }.generate(10, 8).unwrap());
    }

    #[test]
    fn split_holds_out_tail() {
        let ds = Generator::Gmm2d.generate(10, 1).unwrap();
        let (tr, ho) = ds.split(0.2).unwrap();
        assert_eq!(tr.len(), 8);
        assert_eq!(ho.unwrap().points(), &ds.points()[8..]);
        assert!(ds.split(0.7).is_err());
    }
}
