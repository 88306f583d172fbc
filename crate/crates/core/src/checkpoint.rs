//! Binary checkpoint files.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `SAUGCKPT` | 8 bytes |
//! | version (= 1) | u32 |
//! | data_dim, cond_dim, noise_embed_dim | u32 each |
//! | number of hidden layers `L` | u32 |
//! | hidden widths | `L` × u32 |
//! | sigma_data | f64 |
//! | parameter count `P` | u64 |
//! | θ | `P` × f64 |
//! | EMA θ | `P` × f64 |
//! | optimizer step | u64 |
//! | first moments | `P` × f64 |
//! | second moments | `P` × f64 |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DenoiserNet, NetConfig};

pub const MAGIC: &[u8; 8] = b"SAUGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub sigma_data: f64,
    pub theta: Vec<f64>,
    pub ema_theta: Vec<f64>,
    pub adam_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    /// The EMA network, which is what sampling and evaluation use.
    pub fn ema_net(&self) -> Result<DenoiserNet> {
        DenoiserNet::with_theta(self.config.clone(), self.sigma_data, self.ema_theta.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.theta.len();
        let mut out = Vec::with_capacity(64 + 8 * 4 * p);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.config.data_dim, self.config.cond_dim, self.config.noise_embed_dim, self.config.hidden.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &w in &self.config.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.sigma_data.to_le_bytes());
        out.extend_from_slice(&(p as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&mut out, &self.theta);
        put(&mut out, &self.ema_theta);
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        put(&mut out, &self.adam_m);
        put(&mut out, &self.adam_v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let data_dim = r.u32()? as usize;
        let cond_dim = r.u32()? as usize;
        let noise_embed_dim = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let hidden = (0..layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let config = NetConfig { data_dim, cond_dim, noise_embed_dim, hidden };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let sigma_data = r.f64()?;
        let p = r.u64()? as usize;
        if p != config.param_count() {
            return Err(Error::Checkpoint(format!("parameter count {p} does not match the network ({})", config.param_count())));
        }
        let theta = r.f64s(p)?;
        let ema_theta = r.f64s(p)?;
        let adam_step = r.u64()?;
        let adam_m = r.f64s(p)?;
        let adam_v = r.f64s(p)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, sigma_data, theta, ema_theta, adam_step, adam_m, adam_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
