//! Compression pipeline and the `.msnc` file format.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MSNC" version:u16 height:u32 width:u32 spectral:u16 model_digest:u64
//! z_len:u32 z_stream
//! per channel group:  len:u32 stream
//! ```
//!
//! Images whose extents are not a multiple of the model's spatial multiple
//! are padded by edge replication before coding; the header keeps the
//! original extents and the decoder crops.

use crate::attention::ShiftPolicy;
use crate::entropy::{dequantize, factorized_likelihood, gaussian_likelihood, group_params, rate_bits, ChannelGroups};
use crate::error::{shape_err, Error, Result};
use crate::model::{CodecModel, Reader};
use crate::params::Binder;
use crate::rans::{gaussian_table, logistic_table, rans_encode, scale_bin, scale_bins, CdfTable, RansDecoder, SCALE_BINS};
use crate::tensor::{Graph, Tensor, Var};
use crate::transforms::{analysis_ga, hyper_ha, hyper_hs, synthesis_gs};

pub const MAGIC: &[u8; 4] = b"MSNC";
pub const VERSION: u16 = 1;
/// Bytes before the first stream.
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 2 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: u32,
    pub width: u32,
    pub spectral: u16,
    pub model_digest: u64,
}

/// Parsed `.msnc` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsncFile {
    pub header: Header,
    pub z_stream: Vec<u8>,
    pub y_streams: Vec<Vec<u8>>,
}

impl MsncFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.spectral.to_le_bytes());
        out.extend_from_slice(&self.header.model_digest.to_le_bytes());
        for s in std::iter::once(&self.z_stream).chain(&self.y_streams) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    /// Parses a file with `groups` y-streams.
    pub fn from_bytes(bytes: &[u8], groups: usize) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an .msnc file".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(".msnc version {version}")));
        }
        let header = Header {
            height: r.u32()?,
            width: r.u32()?,
            spectral: r.u16()?,
            model_digest: r.u64()?,
        };
        let stream = |r: &mut Reader| -> Result<Vec<u8>> {
            let n = r.u32()? as usize;
            Ok(r.bytes(n)?.to_vec())
        };
        let z_stream = stream(&mut r)?;
        let y_streams = (0..groups).map(|_| stream(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after the last stream".into()));
        }
        Ok(Self { header, z_stream, y_streams })
    }

    /// Serialized size in bytes.
    pub fn len(&self) -> usize {
        HEADER_BYTES + 4 + self.z_stream.len() + self.y_streams.iter().map(|s| 4 + s.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Bytes of entropy-coded payload, excluding header and length fields.
    pub fn stream_bytes(&self) -> usize {
        self.z_stream.len() + self.y_streams.iter().map(Vec::len).sum::<usize>()
    }
}

/// Everything the encoder knows after coding one image.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub file: MsncFile,
    pub bytes: Vec<u8>,
    /// Quantized latent as the decoder will see it.
    pub yhat: Tensor,
    pub zhat: Tensor,
    /// Reconstruction the decoder will produce.
    pub x_hat: Tensor,
    /// Model rate of `ŷ` and `ẑ` in bits.
    pub estimated_bits: f64,
}

impl Encoded {
    /// Bits per pixel of the whole file over the original plane.
    pub fn bpp(&self) -> f64 {
        let h = &self.file.header;
        self.bytes.len() as f64 * 8.0 / (h.height as f64 * h.width as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub x_hat: Tensor,
    pub yhat: Tensor,
}

/// Edge-replicating pad of `[H, W, S]` up to `[hp, wp, S]`.
pub fn pad_edge(x: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || hp < s[0] || wp < s[1] {
        return Err(shape_err!("cannot pad {s:?} to {hp}x{wp}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(hp * wp * c);
    for i in 0..hp {
        for j in 0..wp {
            let src = ((i.min(h - 1)) * w + j.min(w - 1)) * c;
            data.extend_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(vec![hp, wp, c], data)
}

/// Top-left `[h, w, S]` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || h > s[0] || w > s[1] || h == 0 || w == 0 {
        return Err(shape_err!("cannot crop {s:?} to {h}x{w}"));
    }
    if (h, w) == (s[0], s[1]) {
        return Ok(x.clone());
    }
    let c = s[2];
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        data.extend_from_slice(&x.data()[i * s[1] * c..(i * s[1] + w) * c]);
    }
    Tensor::new(vec![h, w, c], data)
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Per-group results of the conditional coding loop.
struct GroupPass<'g> {
    yhat: Tensor,
    mus: Vec<Var<'g>>,
    sigmas: Vec<Var<'g>>,
    parts: Vec<Var<'g>>,
}

/// A model with its coding tables.
pub struct Codec {
    model: CodecModel,
    digest: u64,
    gaussian: CdfTable,
    prior: CdfTable,
    bins: [f64; SCALE_BINS],
}

impl Codec {
    pub fn new(model: CodecModel) -> Result<Self> {
        let loc: Vec<f64> = model.params.get("entropy.prior.loc").expect("prior loc").data.iter().map(|&v| v as f64).collect();
        let scale: Vec<f64> = model
            .params
            .get("entropy.prior.log_scale")
            .expect("prior scale")
            .data
            .iter()
            .map(|&v| (v as f64).exp())
            .collect();
        Ok(Self {
            digest: model.digest(),
            gaussian: gaussian_table()?,
            prior: logistic_table(&loc, &scale)?,
            bins: scale_bins(),
            model,
        })
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Runs the group loop; `pick` supplies the integer residuals of group
    /// `i` given its means and scale bins.
    fn groups<'g>(
        &self,
        b: &Binder<'g, '_>,
        ctx: Var<'g>,
        mut pick: impl FnMut(usize, &Tensor, &[usize]) -> Result<Vec<i32>>,
    ) -> Result<GroupPass<'g>> {
        let cfg = &self.model.config;
        let g = b.graph();
        let groups = ChannelGroups::from_config(cfg)?;
        let mut pass = GroupPass { yhat: Tensor::scalar(0.0), mus: vec![], sigmas: vec![], parts: vec![] };
        for i in 0..groups.len() {
            let prev = if i == 0 { None } else { Some(g.concat(&pass.parts, 2)?) };
            let (mu, sigma) = group_params(b, cfg, i, ctx, prev)?;
            let bins: Vec<usize> = sigma.value().data().iter().map(|&s| scale_bin(&self.bins, s)).collect();
            let mu_t = mu.value();
            let symbols = pick(i, &mu_t, &bins)?;
            let part = dequantize(&symbols, &mu_t)?;
            pass.parts.push(g.constant(part));
            pass.mus.push(mu);
            pass.sigmas.push(sigma);
        }
        pass.yhat = g.concat(&pass.parts, 2)?.value().as_ref().clone();
        Ok(pass)
    }

    fn reconstruct<'g>(&self, b: &Binder<'g, '_>, yhat: Var<'g>, h: usize, w: usize) -> Result<Tensor> {
        let x = synthesis_gs(b, &self.model.config, yhat, &mut ShiftPolicy::Mode, true)?;
        crop(&x.value(), h, w)
    }

    pub fn compress(&self, image: &Tensor) -> Result<Encoded> {
        let cfg = &self.model.config;
        let s = image.shape();
        if s.len() != 3 || s[2] != cfg.spectral {
            return Err(shape_err!("image {s:?} does not have {} channels", cfg.spectral));
        }
        let (h, w) = (s[0], s[1]);
        let m = cfg.spatial_multiple();
        let x = pad_edge(image, round_up(h, m), round_up(w, m))?;

        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params, false);
        let y = analysis_ga(&b, cfg, g.constant(x), &mut ShiftPolicy::Mode)?;
        let z = hyper_ha(&b, cfg, y)?;

        let nh = cfg.hyper;
        let mut z_symbols = Vec::with_capacity(z.value().numel());
        for (i, &v) in z.value().data().iter().enumerate() {
            z_symbols.push(self.prior.get(i % nh)?.clamp(v.round() as i32));
        }
        let z_contexts: Vec<usize> = (0..z_symbols.len()).map(|i| i % nh).collect();
        let zhat = Tensor::new(z.shape(), z_symbols.iter().map(|&q| q as f64).collect())?;
        let zv = g.constant(zhat.clone());
        let ctx = hyper_hs(&b, cfg, zv)?;

        let groups = ChannelGroups::from_config(cfg)?;
        let y_parts = y.split(2, groups.sizes())?;
        let mut y_streams = Vec::with_capacity(groups.len());
        let pass = self.groups(&b, ctx, |i, mu, bins| {
            let yi = y_parts[i].value();
            let mut symbols = Vec::with_capacity(bins.len());
            for ((&v, &m), &bin) in yi.data().iter().zip(mu.data()).zip(bins) {
                symbols.push(self.gaussian.get(bin)?.clamp((v - m).round() as i32));
            }
            y_streams.push(rans_encode(&symbols, bins, &self.gaussian)?);
            Ok(symbols)
        })?;

        let mut bits = rate_bits(factorized_likelihood(
            zv,
            b.get("entropy.prior.loc")?,
            b.get("entropy.prior.log_scale")?,
        )?)?
        .value()
        .data()[0];
        for i in 0..groups.len() {
            bits += rate_bits(gaussian_likelihood(pass.parts[i], pass.mus[i], pass.sigmas[i])?)?.value().data()[0];
        }

        let yhat_v = g.constant(pass.yhat.clone());
        let x_hat = self.reconstruct(&b, yhat_v, h, w)?;
        let file = MsncFile {
            header: Header {
                height: h as u32,
                width: w as u32,
                spectral: cfg.spectral as u16,
                model_digest: self.digest,
            },
            z_stream: rans_encode(&z_symbols, &z_contexts, &self.prior)?,
            y_streams,
        };
        Ok(Encoded {
            bytes: file.to_bytes(),
            file,
            yhat: pass.yhat,
            zhat,
            x_hat,
            estimated_bits: bits,
        })
    }

    pub fn decompress(&self, bytes: &[u8]) -> Result<Decoded> {
        let cfg = &self.model.config;
        let file = MsncFile::from_bytes(bytes, cfg.groups.len())?;
        let hd = file.header;
        if hd.model_digest != self.digest {
            return Err(Error::Format(format!(
                "file was coded with model {:016x}, this checkpoint is {:016x}",
                hd.model_digest, self.digest
            )));
        }
        if hd.spectral as usize != cfg.spectral || hd.height == 0 || hd.width == 0 {
            return Err(Error::Format(format!("header {hd:?} does not fit the model")));
        }
        let (h, w) = (hd.height as usize, hd.width as usize);
        let m = cfg.spatial_multiple();
        let (hp, wp) = (round_up(h, m), round_up(w, m));
        let down = cfg.downsample();
        let (lh, lw) = (hp / down, wp / down);
        let nh = cfg.hyper;

        let mut dec = RansDecoder::new(&file.z_stream)?;
        let n_z = (lh / 4) * (lw / 4) * nh;
        let z_symbols = (0..n_z)
            .map(|i| dec.decode(self.prior.get(i % nh)?))
            .collect::<Result<Vec<_>>>()?;
        dec.finish()?;
        let zhat = Tensor::new(vec![lh / 4, lw / 4, nh], z_symbols.iter().map(|&q| q as f64).collect())?;

        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params, false);
        let ctx = hyper_hs(&b, cfg, g.constant(zhat))?;
        let pass = self.groups(&b, ctx, |i, _mu, bins| {
            let mut d = RansDecoder::new(&file.y_streams[i])?;
            let symbols = bins
                .iter()
                .map(|&bin| d.decode(self.gaussian.get(bin)?))
                .collect::<Result<Vec<_>>>()?;
            d.finish()?;
            Ok(symbols)
        })?;
        let x_hat = self.reconstruct(&b, g.constant(pass.yhat.clone()), h, w)?;
        Ok(Decoded { x_hat, yhat: pass.yhat })
    }
}
