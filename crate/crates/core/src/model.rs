//! The complete codec model, its training forward pass and its checkpoint
//! file.
//!
//! Checkpoint layout, little-endian:
//!
//! ```text
//! "MSNC-CKPT"  version:u16
//! config_len:u32  config text (key=value lines)
//! count:u32
//! per parameter, by name:  name_len:u16 name  rank:u8 dims:u32*rank  data:f32*
//! digest:u64   first 8 bytes of SHA-256 over everything before it
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::ShiftPolicy;
use crate::entropy::{entropy_specs, latent_rate, quantize_noise, Rate};
use crate::error::{Error, Result};
use crate::metrics::rd_loss;
use crate::params::{Binder, Param, ParamSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::Var;
use crate::transforms::{analysis_ga, hyper_ha, hyper_hs, synthesis_gs, transform_specs, StageConfig};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MSNC-CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// First 8 bytes of SHA-256, little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub config: StageConfig,
    pub params: ParamStore,
}

impl CodecModel {
    pub fn specs(cfg: &StageConfig) -> Vec<ParamSpec> {
        let mut v = transform_specs(cfg);
        v.extend(entropy_specs(cfg));
        v
    }

    pub fn new(config: StageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&Self::specs(&config), seed)?;
        Ok(Self { config, params })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = digest64(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint, including that its parameters are
    /// exactly those the stored config declares.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if digest64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Corrupt("checkpoint digest mismatch".into()));
        }
        let mut r = Reader::new(&body[CHECKPOINT_MAGIC.len()..]);
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes(text_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = StageConfig::from_text(text)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .bytes(n.checked_mul(4).ok_or_else(|| Error::Format("parameter too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Param { shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        let specs = Self::specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!("{} parameters, config declares {}", params.len(), specs.len())));
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(p) if p.shape == s.shape => {}
                _ => return Err(Error::Format(format!("parameter {} missing or misshapen", s.name))),
            }
        }
        Ok(Self { config, params })
    }

    /// Identity of the exact weights, stored in every compressed file.
    pub fn digest(&self) -> u64 {
        let b = self.to_bytes();
        u64::from_le_bytes(b[b.len() - 8..].try_into().expect("8 bytes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Little-endian cursor that fails on truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// Terms of the training objective for one image.
#[derive(Clone, Copy, Debug)]
pub struct TrainForward<'g> {
    pub x_hat: Var<'g>,
    pub rate: Rate<'g>,
    pub loss: Var<'g>,
}

/// Noisy-quantization forward pass: `g_a`, `h_a`, additive noise on both
/// latents, `h_s`, the rate of the noisy latents and the RD loss of the
/// unclamped `g_s` reconstruction.
pub fn train_forward<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    x: Var<'g>,
    lambda: f64,
    noise: &mut Rng,
    shifts: &mut ShiftPolicy,
) -> Result<TrainForward<'g>> {
    let s = x.shape();
    let y = analysis_ga(b, cfg, x, shifts)?;
    let z = hyper_ha(b, cfg, y)?;
    let z_tilde = quantize_noise(z, noise)?;
    let ctx = hyper_hs(b, cfg, z_tilde)?;
    let y_tilde = quantize_noise(y, noise)?;
    let rate = latent_rate(b, cfg, y_tilde, z_tilde, ctx)?;
    let x_hat = synthesis_gs(b, cfg, y_tilde, shifts, false)?;
    let loss = rd_loss(x, x_hat, rate.total()?, lambda, s[0], s[1])?;
    Ok(TrainForward { x_hat, rate, loss })
}
