//! Static-table rANS with a 64-bit state and 32-bit renormalization.
//!
//! Stream layout: the final encoder state as 8 little-endian bytes, then the
//! 32-bit words emitted during encoding, last emitted first, so the decoder
//! reads front to back. Symbols are encoded in reverse order for the same
//! reason.

use crate::entropy::{SCALE_MAX, SCALE_MIN};
use crate::error::{Error, Result};
use crate::tensor::{logistic, normal_cdf};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Lower bound of the normalized state interval.
const RANS_L: u64 = 1 << 31;

/// Number of log-spaced Gaussian scale bins.
pub const SCALE_BINS: usize = 64;
/// Probability mass allowed outside a table's support before folding.
pub const TAIL_MASS: f64 = 1e-6;
/// Widest support of any table, in symbols.
pub const MAX_SUPPORT: usize = 1 << 14;

/// Quantized distribution over the integer range `min .. min + len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cdf {
    min: i32,
    /// `cum[i]` is the total frequency of symbols before index `i`;
    /// `cum[len] == TOTAL`.
    cum: Vec<u32>,
}

impl Cdf {
    /// Quantizes `probs` (any positive weights) for symbols starting at
    /// `min`: every symbol gets frequency 1, the remaining `TOTAL - len`
    /// are shared out by floor, then by largest remainder, ties to the lower
    /// symbol.
    pub fn from_probs(min: i32, probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 || n > TOTAL as usize / 2 {
            return Err(Error::Usage(format!("support of {n} symbols")));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Numeric("invalid probability in table".into()));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Numeric("table has zero mass".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut freqs = Vec::with_capacity(n);
        let mut rems = Vec::with_capacity(n);
        for &p in probs {
            let share = p / total * spare;
            let whole = share.floor();
            freqs.push(1 + whole as u32);
            rems.push(share - whole);
        }
        let assigned: u32 = freqs.iter().sum();
        let mut left = TOTAL - assigned;
        if left > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rems[b].total_cmp(&rems[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                freqs[i] += 1;
                left -= 1;
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for f in freqs {
            cum.push(cum.last().expect("nonempty") + f);
        }
        debug_assert_eq!(*cum.last().expect("nonempty"), TOTAL);
        Ok(Self { min, cum })
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn freq(&self, symbol: i32) -> Option<u32> {
        let i = symbol.checked_sub(self.min)?;
        if i < 0 || i as usize >= self.len() {
            return None;
        }
        Some(self.cum[i as usize + 1] - self.cum[i as usize])
    }

    /// Nearest codeable symbol.
    pub fn clamp(&self, symbol: i32) -> i32 {
        symbol.clamp(self.min, self.max_symbol())
    }

    /// Symbol index whose frequency interval holds `slot`.
    fn find(&self, slot: u32) -> usize {
        self.cum.partition_point(|&c| c <= slot) - 1
    }
}

/// Distributions indexed by context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub cdfs: Vec<Cdf>,
}

impl CdfTable {
    pub fn get(&self, ctx: usize) -> Result<&Cdf> {
        self.cdfs
            .get(ctx)
            .ok_or_else(|| Error::Usage(format!("context {ctx} of {}", self.cdfs.len())))
    }
}

/// Scales `SCALE_MIN * (SCALE_MAX / SCALE_MIN)^(j / 63)`.
pub fn scale_bins() -> [f64; SCALE_BINS] {
    let ratio = (SCALE_MAX / SCALE_MIN).ln();
    let mut out = [0.0; SCALE_BINS];
    for (j, v) in out.iter_mut().enumerate() {
        *v = SCALE_MIN * (ratio * j as f64 / (SCALE_BINS - 1) as f64).exp();
    }
    out[0] = SCALE_MIN;
    out[SCALE_BINS - 1] = SCALE_MAX;
    out
}

/// First bin whose scale is at least `sigma` (the last bin beyond range).
pub fn scale_bin(bins: &[f64; SCALE_BINS], sigma: f64) -> usize {
    bins.partition_point(|&b| b < sigma).min(SCALE_BINS - 1)
}

/// Integer residual distribution of a zero-mean Gaussian with scale `sigma`
/// on the support `[-k, k]`, tails folded into the edge symbols.
fn gaussian_cdf(sigma: f64) -> Result<Cdf> {
    let tail = |k: f64| 2.0 * normal_cdf(-(k + 0.5) / sigma);
    let mut k = 0usize;
    while tail(k as f64) >= TAIL_MASS && 2 * k + 1 < MAX_SUPPORT {
        k += 1;
    }
    let probs: Vec<f64> = (-(k as i64)..=k as i64)
        .map(|q| {
            let q = q as f64;
            // mass evaluated on the lower tail to avoid cancellation
            let v = q.abs();
            let mut p = normal_cdf((0.5 - v) / sigma) - normal_cdf((-0.5 - v) / sigma);
            if q.abs() == k as f64 {
                p += normal_cdf(-(k as f64 + 0.5) / sigma);
            }
            p
        })
        .collect();
    Cdf::from_probs(-(k as i32), &probs)
}

/// One table per scale bin.
pub fn gaussian_table() -> Result<CdfTable> {
    Ok(CdfTable {
        cdfs: scale_bins().iter().map(|&s| gaussian_cdf(s)).collect::<Result<_>>()?,
    })
}

/// Per-channel table of a logistic with location `loc[c]` and scale
/// `scale[c]`, over integer symbols.
pub fn logistic_table(loc: &[f64], scale: &[f64]) -> Result<CdfTable> {
    let cdfs = loc
        .iter()
        .zip(scale)
        .map(|(&mu, &s)| {
            if !(s > 0.0 && s.is_finite() && mu.is_finite()) {
                return Err(Error::Numeric(format!("logistic location {mu}, scale {s}")));
            }
            let cdf = |x: f64| logistic((x - mu) / s);
            let upper_tail = |hi: i64| 1.0 - cdf(hi as f64 + 0.5);
            let lower_tail = |lo: i64| cdf(lo as f64 - 0.5);
            let center = mu.round() as i64;
            let (mut lo, mut hi) = (center, center);
            while lower_tail(lo) + upper_tail(hi) >= TAIL_MASS && ((hi - lo + 1) as usize) < MAX_SUPPORT {
                if lower_tail(lo) >= upper_tail(hi) {
                    lo -= 1;
                } else {
                    hi += 1;
                }
            }
            let probs: Vec<f64> = (lo..=hi)
                .map(|q| {
                    // mirror onto the side with small CDF values
                    let d = q as f64 - mu;
                    let v = d.abs();
                    let mut p = logistic((0.5 - v) / s) - logistic((-0.5 - v) / s);
                    if q == lo {
                        p += lower_tail(lo);
                    }
                    if q == hi {
                        p += upper_tail(hi);
                    }
                    p
                })
                .collect();
            let lo = i32::try_from(lo).map_err(|_| Error::Numeric(format!("logistic location {mu}")))?;
            Cdf::from_probs(lo, &probs)
        })
        .collect::<Result<_>>()?;
    Ok(CdfTable { cdfs })
}

/// Encodes `symbols[i]` under `table[contexts[i]]`. Symbols must lie in
/// their context's support.
pub fn rans_encode(symbols: &[i32], contexts: &[usize], table: &CdfTable) -> Result<Vec<u8>> {
    if symbols.len() != contexts.len() {
        return Err(Error::Usage(format!("{} symbols, {} contexts", symbols.len(), contexts.len())));
    }
    let mut x = RANS_L;
    let mut words: Vec<u32> = Vec::with_capacity(symbols.len() / 8 + 1);
    for (&s, &ctx) in symbols.iter().zip(contexts).rev() {
        let cdf = table.get(ctx)?;
        let i = s - cdf.min;
        if i < 0 || i as usize >= cdf.len() {
            return Err(Error::Usage(format!(
                "symbol {s} outside support [{}, {}]",
                cdf.min,
                cdf.max_symbol()
            )));
        }
        let start = cdf.cum[i as usize] as u64;
        let freq = cdf.cum[i as usize + 1] as u64 - start;
        let x_max = ((RANS_L >> PRECISION_BITS) << 32) * freq;
        if x >= x_max {
            words.push(x as u32);
            x >>= 32;
        }
        x = ((x / freq) << PRECISION_BITS) + (x % freq) + start;
    }
    let mut out = Vec::with_capacity(8 + 4 * words.len());
    out.extend_from_slice(&x.to_le_bytes());
    for w in words.iter().rev() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

/// Streaming decoder; contexts may be chosen symbol by symbol.
pub struct RansDecoder<'a> {
    x: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RansDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 8 || (data.len() - 8) % 4 != 0 {
            return Err(Error::Corrupt(format!("rANS stream of {} bytes", data.len())));
        }
        let x = u64::from_le_bytes(data[..8].try_into().expect("8 bytes"));
        if x < RANS_L {
            return Err(Error::Corrupt("rANS state below normalization bound".into()));
        }
        Ok(Self { x, data, pos: 8 })
    }

    pub fn decode(&mut self, cdf: &Cdf) -> Result<i32> {
        let slot = (self.x & (TOTAL as u64 - 1)) as u32;
        let i = cdf.find(slot);
        let start = cdf.cum[i] as u64;
        let freq = cdf.cum[i + 1] as u64 - start;
        self.x = freq * (self.x >> PRECISION_BITS) + slot as u64 - start;
        if self.x < RANS_L {
            let Some(word) = self.data.get(self.pos..self.pos + 4) else {
                return Err(Error::Corrupt("rANS stream truncated".into()));
            };
            self.x = (self.x << 32) | u32::from_le_bytes(word.try_into().expect("4 bytes")) as u64;
            self.pos += 4;
        }
        Ok(cdf.min + i as i32)
    }

    /// Checks that the stream was consumed exactly and the state returned to
    /// its initial value.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Corrupt(format!("{} unread rANS bytes", self.data.len() - self.pos)));
        }
        if self.x != RANS_L {
            return Err(Error::Corrupt("rANS final state mismatch".into()));
        }
        Ok(())
    }
}

pub fn rans_decode(data: &[u8], contexts: &[usize], table: &CdfTable) -> Result<Vec<i32>> {
    let mut d = RansDecoder::new(data)?;
    let out = contexts
        .iter()
        .map(|&c| d.decode(table.get(c)?))
        .collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Ok(out)
}
