//! Window self-attention, inter-window token aggregation, and the randomly
//! shifted SHiNV block.
//!
//! Feature maps are `[H, W, C]` tensors. Windows are `𝔚 x 𝔚` tiles taken in
//! row-major order, tokens inside a window are row-major too. Attention after
//! a cyclic shift is unmasked: windows wrap around the torus. There is no
//! positional bias, so every block commutes with cyclic shifts by multiples
//! of the window size.

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::params::{Binder, Init, ParamSpec};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Variance epsilon of every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;

/// Weights of one multi-head attention unit.
///
/// `wq_heads` is the column-wise concatenation of the per-head `C x C/n`
/// projections, so head `i` owns columns `i*C/n .. (i+1)*C/n`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wq_heads: Var<'g>,
    pub wk_heads: Var<'g>,
    pub wv_heads: Var<'g>,
    pub wh: Var<'g>,
    pub bh: Var<'g>,
    pub heads: usize,
    pub window: usize,
    pub topk: usize,
}

impl<'g> AttentionParams<'g> {
    pub fn specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        let c = channels;
        let mut v: Vec<ParamSpec> = ["wq", "wk", "wv", "wq_heads", "wk_heads", "wv_heads"]
            .iter()
            .map(|n| ParamSpec::new(format!("{prefix}.{n}"), &[c, c], Init::TruncNormal(0.02)))
            .collect();
        v.push(ParamSpec::new(format!("{prefix}.wh"), &[c, c], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.bh"), &[c], Init::Zeros));
        v
    }

    pub fn bind(b: &Binder<'g, '_>, prefix: &str, heads: usize, window: usize, topk: usize) -> Result<Self> {
        let p = Self {
            wq: b.get(&format!("{prefix}.wq"))?,
            wk: b.get(&format!("{prefix}.wk"))?,
            wv: b.get(&format!("{prefix}.wv"))?,
            wq_heads: b.get(&format!("{prefix}.wq_heads"))?,
            wk_heads: b.get(&format!("{prefix}.wk_heads"))?,
            wv_heads: b.get(&format!("{prefix}.wv_heads"))?,
            wh: b.get(&format!("{prefix}.wh"))?,
            bh: b.get(&format!("{prefix}.bh"))?,
            heads,
            window,
            topk,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Usage(format!("{c} channels not divisible into {} heads", self.heads)));
        }
        if self.window == 0 || self.topk == 0 {
            return Err(Error::Usage("window size and top-k must be positive".into()));
        }
        Ok(())
    }
}

/// `[H, W, C] -> [HW/𝔚², 𝔚², C]`.
pub fn window_partition<'g>(x: Var<'g>, window: usize) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || window == 0 || s[0] % window != 0 || s[1] % window != 0 {
        return Err(shape_err!("window {window} does not tile feature map {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    x.reshape(&[h / window, window, w / window, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[(h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`] for an `height x width` map.
pub fn window_reverse<'g>(xw: Var<'g>, height: usize, width: usize, window: usize) -> Result<Var<'g>> {
    let s = xw.shape();
    if s.len() != 3
        || window == 0
        || height % window != 0
        || width % window != 0
        || s[0] != (height / window) * (width / window)
        || s[1] != window * window
    {
        return Err(shape_err!("cannot reverse windows {s:?} into {height}x{width} with window {window}"));
    }
    let c = s[2];
    xw.reshape(&[height / window, width / window, window, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[height, width, c])
}

/// Scaled dot-product attention over heads.
///
/// `q` is `[B, Tq, C]`, `k` and `v` are `[B, Tk, C]`, already carrying the
/// per-head projections; returns the concatenated heads `[B, Tq, C]`.
pub(crate) fn attend<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let (sq, sk) = (q.shape(), k.shape());
    let (b, tq, c) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    let d = c / heads;
    let qh = q.reshape(&[b, tq, heads, d])?.permute(&[0, 2, 1, 3])?;
    let kt = k.reshape(&[b, tk, heads, d])?.permute(&[0, 2, 3, 1])?;
    let vh = v.reshape(&[b, tk, heads, d])?.permute(&[0, 2, 1, 3])?;
    let weights = qh.matmul(kt)?.scale(1.0 / (d as f64).sqrt())?.softmax(3)?;
    weights
        .matmul(vh)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, tq, c])
}

fn as_batched(x: Var<'_>) -> Result<(Var<'_>, bool)> {
    match x.shape().len() {
        2 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((x, false)),
        _ => Err(shape_err!("attention input must be [N, C] or [B, N, C], got {:?}", x.shape())),
    }
}

/// Multi-head self-attention over `[N, C]` tokens (or a batch `[B, N, C]` of
/// independent token sets).
pub fn mhsa<'g>(x: Var<'g>, p: &AttentionParams<'g>) -> Result<Var<'g>> {
    let (xb, squeeze) = as_batched(x)?;
    let q = xb.matmul(p.wq)?.matmul(p.wq_heads)?;
    let k = xb.matmul(p.wk)?.matmul(p.wk_heads)?;
    let v = xb.matmul(p.wv)?.matmul(p.wv_heads)?;
    let out = attend(q, k, v, p.heads)?.matmul(p.wh)?.add_row(p.bh)?;
    if squeeze {
        out.reshape(&x.shape())
    } else {
        Ok(out)
    }
}

/// Plain window attention on a `[H, W, C]` map.
pub fn window_mhsa<'g>(x: Var<'g>, p: &AttentionParams<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let xw = window_partition(x, p.window)?;
    window_reverse(mhsa(xw, p)?, s[0], s[1], p.window)
}

/// Per-window means of projected queries and keys, `[nW, 𝔚², C] -> [nW, C]`.
pub fn window_candidates(q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((window_mean(q)?, window_mean(k)?))
}

fn window_mean(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(shape_err!("candidates need [nW, T, C], got {s:?}"));
    }
    let (nw, tk, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; nw * c];
    for w in 0..nw {
        let acc = &mut out[w * c..(w + 1) * c];
        for tok in 0..tk {
            let row = &t.data()[(w * tk + tok) * c..(w * tk + tok + 1) * c];
            acc.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
        }
        acc.iter_mut().for_each(|a| *a /= tk as f64);
    }
    Tensor::new(vec![nw, c], out)
}

/// Window-by-window dot-product similarity of candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ResemblanceMatrix(pub Tensor);

impl ResemblanceMatrix {
    pub fn windows(&self) -> usize {
        self.0.shape()[0]
    }
}

/// `ℜ = Q^𝔚 (K^𝔚)ᵀ`, unscaled.
pub fn resemblance(q_cand: &Tensor, k_cand: &Tensor) -> Result<ResemblanceMatrix> {
    if q_cand.rank() != 2 || k_cand.shape() != q_cand.shape() {
        return Err(shape_err!("resemblance of {:?} and {:?}", q_cand.shape(), k_cand.shape()));
    }
    let kt = k_cand.permuted(&[1, 0])?;
    Ok(ResemblanceMatrix(q_cand.matmul2(&kt)?))
}

/// Chosen source windows for each target window, `k` per row, flattened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSelection {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl WindowSelection {
    pub fn row(&self, w: usize) -> &[usize] {
        &self.indices[w * self.k..(w + 1) * self.k]
    }

    /// Every window attends to itself only.
    pub fn own_window(windows: usize) -> Self {
        Self { k: 1, indices: (0..windows).collect() }
    }

    /// Every window attends to all windows, in index order.
    pub fn all_windows(windows: usize) -> Self {
        Self {
            k: windows,
            indices: (0..windows).flat_map(|_| 0..windows).collect(),
        }
    }
}

/// Per row, the `k` largest entries by descending value; ties go to the
/// smaller window index.
pub fn topk_windows(r: &ResemblanceMatrix, k: usize) -> Result<WindowSelection> {
    let n = r.windows();
    if k == 0 || k > n {
        return Err(Error::Usage(format!("top-k {k} outside 1..={n}")));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in r.0.data().chunks(n) {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        indices.extend_from_slice(&order[..k]);
    }
    Ok(WindowSelection { k, indices })
}

/// How a token-aggregated layer picks its source windows.
#[derive(Clone, Debug)]
pub enum Selection {
    /// Top-k of the resemblance matrix, with `k` clamped to the window count.
    TopK,
    /// Externally fixed selection.
    Fixed(WindowSelection),
}

/// Inter-window token-aggregated attention on a `[H, W, C]` map.
pub fn token_aggregated_attention<'g>(x: Var<'g>, p: &AttentionParams<'g>) -> Result<Var<'g>> {
    token_aggregated_attention_with(x, p, &Selection::TopK)
}

pub fn token_aggregated_attention_with<'g>(
    x: Var<'g>,
    p: &AttentionParams<'g>,
    selection: &Selection,
) -> Result<Var<'g>> {
    let s = x.shape();
    let xw = window_partition(x, p.window)?;
    let ws = xw.shape();
    let (nw, t, c) = (ws[0], ws[1], ws[2]);
    let q = xw.matmul(p.wq)?;
    let k = xw.matmul(p.wk)?;
    let v = xw.matmul(p.wv)?;
    let sel = match selection {
        Selection::TopK => {
            let (qc, kc) = window_candidates(&q.value(), &k.value())?;
            topk_windows(&resemblance(&qc, &kc)?, p.topk.min(nw))?
        }
        Selection::Fixed(sel) => {
            if sel.indices.len() != nw * sel.k || sel.indices.iter().any(|&i| i >= nw) {
                return Err(Error::Usage(format!("fixed selection does not fit {nw} windows")));
            }
            sel.clone()
        }
    };
    let qh = q.matmul(p.wq_heads)?;
    let kh = k.matmul(p.wk_heads)?;
    let vh = v.matmul(p.wv_heads)?;
    let k_agg = kh.gather(0, &sel.indices)?.reshape(&[nw, sel.k * t, c])?;
    let v_agg = vh.gather(0, &sel.indices)?.reshape(&[nw, sel.k * t, c])?;
    let out = attend(qh, k_agg, v_agg, p.heads)?.matmul(p.wh)?.add_row(p.bh)?;
    window_reverse(out, s[0], s[1], p.window)
}

/// Toroidal roll: `out[i, j] = x[(i + s_h) mod H, (j + s_w) mod W]`.
/// The inverse is the shift by `(H - s_h, W - s_w)`.
pub fn cyclic_shift<'g>(x: Var<'g>, s_h: usize, s_w: usize) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || s_h >= s[0] || s_w >= s[1] {
        return Err(shape_err!("shift ({s_h}, {s_w}) of map {s:?}"));
    }
    let roll = |v: Var<'g>, axis: usize, by: usize| -> Result<Var<'g>> {
        if by == 0 {
            return Ok(v);
        }
        let n = s[axis];
        let head = v.slice(axis, by, n - by)?;
        let tail = v.slice(axis, 0, by)?;
        v.graph().concat(&[head, tail], axis)
    };
    roll(roll(x, 0, s_h)?, 1, s_w)
}

/// Categorical law over shift sizes `1..𝔚-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftDistribution {
    window: usize,
    /// `masses[i]` is the probability of shift `i + 1`.
    masses: Vec<f64>,
}

impl ShiftDistribution {
    pub fn new(window: usize, masses: Vec<f64>) -> Result<Self> {
        if window < 2 {
            return Err(Error::Usage(format!("window {window} admits no nonzero shift")));
        }
        if masses.len() != window - 1 {
            return Err(Error::Usage(format!(
                "{} masses for support 1..={}",
                masses.len(),
                window - 1
            )));
        }
        let total: f64 = masses.iter().sum();
        if masses.iter().any(|&m| !(m >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Usage(format!("shift masses {masses:?} are not a distribution")));
        }
        Ok(Self { window, masses })
    }

    /// Half the mass on `𝔚/2`, the rest spread evenly over the other shifts.
    pub fn peaked(window: usize) -> Result<Self> {
        if window < 2 {
            return Self::new(window, vec![]);
        }
        let n = window - 1;
        let half = window / 2;
        if n == 1 {
            return Self::new(window, vec![1.0]);
        }
        let rest = 0.5 / (n - 1) as f64;
        let masses = (1..window).map(|s| if s == half { 0.5 } else { rest }).collect();
        Self::new(window, masses)
    }

    pub fn uniform(window: usize) -> Result<Self> {
        let n = window.saturating_sub(1).max(1);
        Self::new(window, vec![1.0 / n as f64; window.saturating_sub(1)])
    }

    pub fn point_mass(window: usize, shift: usize) -> Result<Self> {
        if shift == 0 || shift >= window {
            return Err(Error::Usage(format!("shift {shift} outside 1..{window}")));
        }
        Self::new(window, (1..window).map(|s| if s == shift { 1.0 } else { 0.0 }).collect())
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Most probable shift; ties go to the shift closest to `𝔚/2`, then the
    /// smaller one.
    pub fn mode(&self) -> usize {
        let half = self.window / 2;
        let best = self.masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (1..self.window)
            .filter(|&s| self.masses[s - 1] == best)
            .min_by_key(|&s| (s.abs_diff(half), s))
            .expect("non-empty support")
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &m) in self.masses.iter().enumerate() {
            acc += m;
            if u < acc {
                return i + 1;
            }
        }
        // u landed in the rounding gap above the cumulative total
        self.masses.iter().rposition(|&m| m > 0.0).map_or(1, |i| i + 1)
    }
}

/// Independent height and width draws.
pub fn sample_shift(d: &ShiftDistribution, rng: &mut Rng) -> (usize, usize) {
    let s_h = d.sample(rng);
    let s_w = d.sample(rng);
    (s_h, s_w)
}

/// Source of shift sizes for shifted layers.
#[derive(Clone, Debug)]
pub enum ShiftPolicy {
    /// Training: draw from each block's distribution.
    Sample(Rng),
    /// Evaluation and coding: the distribution's mode.
    Mode,
    /// Fixed shifts regardless of distribution.
    Fixed(usize, usize),
}

impl ShiftPolicy {
    pub fn draw(&mut self, d: &ShiftDistribution) -> (usize, usize) {
        match self {
            ShiftPolicy::Sample(rng) => sample_shift(d, rng),
            ShiftPolicy::Mode => (d.mode(), d.mode()),
            ShiftPolicy::Fixed(h, w) => (*h, *w),
        }
    }
}

/// Pre-norm transformer layer weights: attention and a two-layer GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams<'g> {
    pub norm1: (Var<'g>, Var<'g>),
    pub attn: AttentionParams<'g>,
    pub norm2: (Var<'g>, Var<'g>),
    pub mlp_w1: Var<'g>,
    pub mlp_b1: Var<'g>,
    pub mlp_w2: Var<'g>,
    pub mlp_b2: Var<'g>,
}

impl<'g> LayerParams<'g> {
    pub fn specs(prefix: &str, channels: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
        let c = channels;
        let hidden = c * mlp_ratio;
        let mut v = vec![
            ParamSpec::new(format!("{prefix}.norm1.gamma"), &[c], Init::Ones),
            ParamSpec::new(format!("{prefix}.norm1.beta"), &[c], Init::Zeros),
            ParamSpec::new(format!("{prefix}.norm2.gamma"), &[c], Init::Ones),
            ParamSpec::new(format!("{prefix}.norm2.beta"), &[c], Init::Zeros),
            ParamSpec::new(format!("{prefix}.mlp.w1"), &[c, hidden], Init::TruncNormal(0.02)),
            ParamSpec::new(format!("{prefix}.mlp.b1"), &[hidden], Init::Zeros),
            ParamSpec::new(format!("{prefix}.mlp.w2"), &[hidden, c], Init::Zeros),
            ParamSpec::new(format!("{prefix}.mlp.b2"), &[c], Init::Zeros),
        ];
        v.extend(AttentionParams::specs(&format!("{prefix}.attn"), c));
        v
    }

    pub fn bind(b: &Binder<'g, '_>, prefix: &str, heads: usize, window: usize, topk: usize) -> Result<Self> {
        Ok(Self {
            norm1: (b.get(&format!("{prefix}.norm1.gamma"))?, b.get(&format!("{prefix}.norm1.beta"))?),
            attn: AttentionParams::bind(b, &format!("{prefix}.attn"), heads, window, topk)?,
            norm2: (b.get(&format!("{prefix}.norm2.gamma"))?, b.get(&format!("{prefix}.norm2.beta"))?),
            mlp_w1: b.get(&format!("{prefix}.mlp.w1"))?,
            mlp_b1: b.get(&format!("{prefix}.mlp.b1"))?,
            mlp_w2: b.get(&format!("{prefix}.mlp.w2"))?,
            mlp_b2: b.get(&format!("{prefix}.mlp.b2"))?,
        })
    }
}

/// Token mixer used by a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    Window,
    Shifted(usize, usize),
    TokenAgg,
}

/// `b = SA(LN(a)) + a; out = MLP(LN(b)) + b` on a `[H, W, C]` map.
pub fn transformer_layer<'g>(x: Var<'g>, p: &LayerParams<'g>, mixer: Mixer) -> Result<Var<'g>> {
    let s = x.shape();
    let h = x.layer_norm(p.norm1.0, p.norm1.1, LN_EPS)?;
    let attn = match mixer {
        Mixer::Window => window_mhsa(h, &p.attn)?,
        Mixer::Shifted(s_h, s_w) => {
            let shifted = cyclic_shift(h, s_h, s_w)?;
            let a = window_mhsa(shifted, &p.attn)?;
            cyclic_shift(a, (s[0] - s_h) % s[0], (s[1] - s_w) % s[1])?
        }
        Mixer::TokenAgg => token_aggregated_attention(h, &p.attn)?,
    };
    let b = attn.add(x)?;
    let m = b
        .layer_norm(p.norm2.0, p.norm2.1, LN_EPS)?
        .matmul(p.mlp_w1)?
        .add_row(p.mlp_b1)?
        .gelu()?
        .matmul(p.mlp_w2)?
        .add_row(p.mlp_b2)?;
    m.add(b)
}

/// Two consecutive layers: plain windows, then windows under a cyclic shift
/// drawn from `d` by `policy`.
pub fn shinv_block<'g>(
    x: Var<'g>,
    first: &LayerParams<'g>,
    second: &LayerParams<'g>,
    d: &ShiftDistribution,
    policy: &mut ShiftPolicy,
) -> Result<Var<'g>> {
    let a = transformer_layer(x, first, Mixer::Window)?;
    let (s_h, s_w) = policy.draw(d);
    transformer_layer(a, second, Mixer::Shifted(s_h, s_w))
}
