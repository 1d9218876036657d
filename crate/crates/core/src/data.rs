//! Multi-spectral images: the `.msim` container, a synthetic solar-like
//! corpus, random crops and the pseudo-temporal train/test split.
//!
//! `.msim` layout, little-endian:
//!
//! ```text
//! "MSIM" version:u16 height:u32 width:u32 spectral:u16 dtype:u8 (8 or 16)
//! per channel:  label_len:u8 label
//! payload: channel-major planes of unsigned samples
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::model::Reader;
use crate::rng::{rng_for, tag, Rng};
use crate::tensor::Tensor;

pub const MSIM_MAGIC: &[u8; 4] = b"MSIM";
pub const MSIM_VERSION: u16 = 1;

/// Wavelength tags of the nine standard channels, in Angstrom.
pub const DEFAULT_LABELS: [&str; 9] = ["94", "131", "171", "193", "211", "304", "335", "1600", "1700"];

/// Samples per pseudo-year in the synthetic corpus.
pub const CYCLE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleType {
    U8,
    U16,
}

impl SampleType {
    fn max(self) -> f64 {
        match self {
            Self::U8 => 255.0,
            Self::U16 => 65535.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::U8 => 8,
            Self::U16 => 16,
        }
    }
}

/// An `[H, W, S]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralImage {
    pixels: Tensor,
    labels: Vec<String>,
    /// Position in pseudo-time.
    pub index: usize,
}

impl MultiSpectralImage {
    pub fn new(pixels: Tensor, labels: Vec<String>, index: usize) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 {
            return Err(shape_err!("image must be [H, W, S], got {s:?}"));
        }
        if labels.len() != s[2] {
            return Err(Error::Usage(format!("{} labels for {} channels", labels.len(), s[2])));
        }
        if labels.iter().any(|l| l.len() > u8::MAX as usize) {
            return Err(Error::Usage("channel label longer than 255 bytes".into()));
        }
        if !pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Usage("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels, labels, index })
    }

    /// Image with the standard labels (or `ch<i>` when `S != 9`).
    pub fn with_default_labels(pixels: Tensor, index: usize) -> Result<Self> {
        let s = pixels.shape().get(2).copied().unwrap_or(0);
        let labels = default_labels(s);
        Self::new(pixels, labels, index)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn spectral(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn to_bytes(&self, dtype: SampleType) -> Vec<u8> {
        let (h, w, s) = (self.height(), self.width(), self.spectral());
        let mut out = Vec::with_capacity(17 + s * 8 + h * w * s * 2);
        out.extend_from_slice(MSIM_MAGIC);
        out.extend_from_slice(&MSIM_VERSION.to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(s as u16).to_le_bytes());
        out.push(dtype.tag());
        for l in &self.labels {
            out.push(l.len() as u8);
            out.extend_from_slice(l.as_bytes());
        }
        let max = dtype.max();
        let px = self.pixels.data();
        for c in 0..s {
            for i in 0..h * w {
                let q = (px[i * s + c] * max).round();
                match dtype {
                    SampleType::U8 => out.push(q as u8),
                    SampleType::U16 => out.extend_from_slice(&(q as u16).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], index: usize) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MSIM_MAGIC {
            return Err(Error::Format("not an .msim file".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u16()?;
        if version != MSIM_VERSION {
            return Err(Error::Format(format!(".msim version {version}")));
        }
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let s = r.u16()? as usize;
        let dtype = match r.u8()? {
            8 => SampleType::U8,
            16 => SampleType::U16,
            t => return Err(Error::Format(format!("sample type tag {t}"))),
        };
        if h == 0 || w == 0 || s == 0 {
            return Err(Error::Format(format!("empty image {h}x{w}x{s}")));
        }
        let labels = (0..s)
            .map(|_| {
                let n = r.u8()? as usize;
                String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| Error::Format("channel label is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let width = match dtype {
            SampleType::U8 => 1,
            SampleType::U16 => 2,
        };
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(s))
            .ok_or_else(|| Error::Format("image too large".into()))?;
        let payload = r.bytes(n.checked_mul(width).ok_or_else(|| Error::Format("image too large".into()))?)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let max = dtype.max();
        let mut data = vec![0.0; n];
        for c in 0..s {
            for i in 0..h * w {
                let k = c * h * w + i;
                let q = match dtype {
                    SampleType::U8 => payload[k] as f64,
                    SampleType::U16 => u16::from_le_bytes([payload[2 * k], payload[2 * k + 1]]) as f64,
                };
                data[i * s + c] = q / max;
            }
        }
        Self::new(Tensor::new(vec![h, w, s], data)?, labels, index)
    }
}

pub fn default_labels(spectral: usize) -> Vec<String> {
    if spectral == DEFAULT_LABELS.len() {
        DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..spectral).map(|i| format!("ch{i}")).collect()
    }
}

pub fn write_msi(path: &Path, img: &MultiSpectralImage, dtype: SampleType) -> Result<()> {
    std::fs::write(path, img.to_bytes(dtype))?;
    Ok(())
}

pub fn read_msi(path: &Path) -> Result<MultiSpectralImage> {
    MultiSpectralImage::from_bytes(&std::fs::read(path)?, 0)
}

fn corpus_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:05}.msim"))
}

/// Writes `sample_<index>.msim` files into `dir`, creating it if needed.
pub fn write_corpus(dir: &Path, images: &[MultiSpectralImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for img in images {
        write_msi(&corpus_file(dir, img.index), img, SampleType::U16)?;
    }
    Ok(())
}

/// Reads every `.msim` file of `dir` in name order; indices follow that
/// order.
pub fn read_corpus(dir: &Path) -> Result<Vec<MultiSpectralImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "msim"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no .msim files in {}", dir.display())));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut img = read_msi(p)?;
            img.index = i;
            Ok(img)
        })
        .collect()
}

/// One low-frequency plane wave of the shared texture.
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    drift: f64,
    amp: f64,
}

struct Channel {
    gain: f64,
    gamma: f64,
    floor: f64,
    corona: f64,
}

/// Synthetic solar-like corpus: a limb-darkened disk on a dark background,
/// modulated by a shared slowly drifting texture, rendered into every
/// channel with its own gain and gamma, plus independent per-channel noise.
/// Values are rounded to the 16-bit grid so the corpus survives `.msim`
/// storage unchanged.
pub fn synth_generate(seed: u64, n: usize, height: usize, width: usize, spectral: usize) -> Result<Vec<MultiSpectralImage>> {
    if height == 0 || width == 0 || spectral == 0 {
        return Err(Error::Usage(format!("synthetic image {height}x{width}x{spectral}")));
    }
    let mut r = rng_for(seed, &[tag::SYNTH]);
    let waves: Vec<Wave> = (0..6)
        .map(|_| {
            let f = r.random_range(1.0..4.0);
            let a = r.random_range(0.0..2.0 * PI);
            Wave {
                kx: f * a.cos(),
                ky: f * a.sin(),
                phase: r.random_range(0.0..2.0 * PI),
                drift: r.random_range(0.05..0.25),
                amp: r.random_range(0.5..1.0),
            }
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.amp).sum();
    let channels: Vec<Channel> = (0..spectral)
        .map(|_| Channel {
            gain: r.random_range(0.55..0.95),
            gamma: r.random_range(0.7..1.4),
            floor: r.random_range(0.0..0.05),
            corona: r.random_range(0.05..0.2),
        })
        .collect();
    let labels = default_labels(spectral);
    (0..n)
        .map(|idx| {
            let mut nr = rng_for(seed, &[tag::SYNTH, idx as u64 + 1]);
            let noise = Normal::new(0.0, 0.01).expect("valid noise law");
            let radius = 0.36 * height.min(width) as f64;
            let (cy, cx) = (
                height as f64 / 2.0 + nr.random_range(-1.0..1.0),
                width as f64 / 2.0 + nr.random_range(-1.0..1.0),
            );
            let t = idx as f64;
            let mut data = Vec::with_capacity(height * width * spectral);
            for i in 0..height {
                for j in 0..width {
                    let (u, v) = (j as f64 / width as f64, i as f64 / height as f64);
                    let tex = waves
                        .iter()
                        .map(|w| w.amp * (2.0 * PI * (w.kx * u + w.ky * v) + w.phase + w.drift * t).sin())
                        .sum::<f64>()
                        / norm;
                    let rr = ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt() / radius;
                    let disk = if rr < 1.0 {
                        let mu = (1.0 - rr * rr).sqrt();
                        1.0 - 0.6 * (1.0 - mu)
                    } else {
                        0.0
                    };
                    let halo = (-4.0 * (rr - 1.0).max(0.0)).exp();
                    for ch in &channels {
                        let base = disk * (0.75 + 0.25 * tex) + ch.corona * halo * (0.5 + 0.5 * tex);
                        let val = ch.floor + ch.gain * base.clamp(0.0, 1.0).powf(ch.gamma) + noise.sample(&mut nr);
                        data.push((val.clamp(0.0, 1.0) * 65535.0).round() / 65535.0);
                    }
                }
            }
            MultiSpectralImage::new(Tensor::new(vec![height, width, spectral], data)?, labels.clone(), idx)
        })
        .collect()
}

/// A crop together with its top-left offset in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Tensor,
    pub top: usize,
    pub left: usize,
}

/// Square crop at a uniformly drawn offset.
pub fn crop_patch(img: &Tensor, size: usize, rng: &mut Rng) -> Result<Patch> {
    let s = img.shape();
    if s.len() != 3 || size == 0 || size > s[0] || size > s[1] {
        return Err(Error::Usage(format!("{size}-pixel crop of a {s:?} image")));
    }
    let top = rng.random_range(0..=s[0] - size);
    let left = rng.random_range(0..=s[1] - size);
    let c = s[2];
    let mut data = Vec::with_capacity(size * size * c);
    for i in top..top + size {
        let row = (i * s[1] + left) * c;
        data.extend_from_slice(&img.data()[row..row + size * c]);
    }
    Ok(Patch {
        pixels: Tensor::new(vec![size, size, c], data)?,
        top,
        left,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits indices `0..n` by their position within each cycle of
/// [`CYCLE`] samples: the first `round(cut * CYCLE)` go to training.
pub fn split_train_test(n: usize, cut: f64) -> Result<DatasetSplit> {
    if !(cut > 0.0 && cut < 1.0) {
        return Err(Error::Usage(format!("split fraction {cut} outside (0, 1)")));
    }
    let keep = (cut * CYCLE as f64).round() as usize;
    if keep == 0 || keep == CYCLE {
        return Err(Error::Usage(format!("split fraction {cut} leaves one side empty")));
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| i % CYCLE < keep);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Usage(format!("corpus of {n} samples is too small to split")));
    }
    Ok(DatasetSplit { train, test })
}
