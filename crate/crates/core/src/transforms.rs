//! Analysis/synthesis transforms and the hyper transforms.
//!
//! Every stage halves (or doubles) the spatial extent. With `n` stages the
//! latent sits at `1/2^n` of the image resolution and the hyper latent two
//! further halvings below it.

use std::fmt;
use std::str::FromStr;

use crate::attention::{shinv_block, transformer_layer, LayerParams, Mixer, ShiftDistribution, ShiftPolicy, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::Var;

/// Shift-size law of a SHiNV pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftLaw {
    /// Half the mass on `𝔚/2`, the rest uniform.
    Peaked,
    Uniform,
    /// Always `𝔚/2`, the fixed shifted-window scheme.
    HalfWindow,
}

impl ShiftLaw {
    pub fn distribution(self, window: usize) -> Result<ShiftDistribution> {
        match self {
            ShiftLaw::Peaked => ShiftDistribution::peaked(window),
            ShiftLaw::Uniform => ShiftDistribution::uniform(window),
            ShiftLaw::HalfWindow => ShiftDistribution::point_mass(window, window / 2),
        }
    }
}

/// One block of a transform stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// A single transformer layer with inter-window token aggregation.
    TokenAgg,
    /// A plain window layer followed by a randomly shifted one.
    ShiftPair(ShiftLaw),
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::TokenAgg => f.write_str("token_agg"),
            BlockKind::ShiftPair(ShiftLaw::Peaked) => f.write_str("shift_pair:peaked"),
            BlockKind::ShiftPair(ShiftLaw::Uniform) => f.write_str("shift_pair:uniform"),
            BlockKind::ShiftPair(ShiftLaw::HalfWindow) => f.write_str("shift_pair:half"),
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "token_agg" => BlockKind::TokenAgg,
            "shift_pair:peaked" => BlockKind::ShiftPair(ShiftLaw::Peaked),
            "shift_pair:uniform" => BlockKind::ShiftPair(ShiftLaw::Uniform),
            "shift_pair:half" => BlockKind::ShiftPair(ShiftLaw::HalfWindow),
            _ => return Err(Error::Format(format!("unknown block kind {s:?}"))),
        })
    }
}

/// Architecture of the whole codec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Spectral channels of the input image.
    pub spectral: usize,
    /// Token width of each stage, finest first.
    pub dims: Vec<usize>,
    /// Blocks run at every stage, in order.
    pub blocks: Vec<BlockKind>,
    pub window: usize,
    pub topk: usize,
    pub head_width: usize,
    pub mlp_ratio: usize,
    /// Latent channels `M`.
    pub latent: usize,
    /// Hyper-latent channels.
    pub hyper: usize,
    /// Window of the attention layer inside the hyper transforms.
    pub hyper_window: usize,
    /// Channel group sizes of the autoregressive entropy model.
    pub groups: Vec<usize>,
}

/// Group sizes `M/16, M/16, M/8, M/4` (at least 1 each) and the remainder.
pub fn uneven_groups(latent: usize) -> Result<Vec<usize>> {
    let mut g: Vec<usize> = [16, 16, 8, 4].iter().map(|d| (latent / d).max(1)).collect();
    let used: usize = g.iter().sum();
    if used >= latent {
        return Err(Error::Usage(format!("{latent} latent channels are too few for five groups")));
    }
    g.push(latent - used);
    Ok(g)
}

impl StageConfig {
    /// Small model that trains on a desktop CPU.
    pub fn desk(spectral: usize) -> Self {
        Self {
            spectral,
            dims: vec![32, 48, 64, 80],
            blocks: vec![BlockKind::TokenAgg, BlockKind::ShiftPair(ShiftLaw::Peaked)],
            window: 4,
            topk: 4,
            head_width: 8,
            mlp_ratio: 2,
            latent: 48,
            hyper: 24,
            hyper_window: 2,
            groups: uneven_groups(48).expect("48 channels split"),
        }
    }

    /// Two-stage model for gradient checks on 16x16 inputs.
    pub fn micro(spectral: usize) -> Self {
        Self {
            spectral,
            dims: vec![8, 8],
            blocks: vec![BlockKind::TokenAgg, BlockKind::ShiftPair(ShiftLaw::Peaked)],
            window: 2,
            topk: 2,
            head_width: 4,
            mlp_ratio: 2,
            latent: 16,
            hyper: 8,
            hyper_window: 2,
            groups: uneven_groups(16).expect("16 channels split"),
        }
    }

    /// Full-size token widths; not trained here.
    pub fn reference(spectral: usize) -> Self {
        Self {
            spectral,
            dims: vec![160, 256, 352, 448],
            blocks: vec![BlockKind::TokenAgg, BlockKind::ShiftPair(ShiftLaw::Peaked)],
            window: 8,
            topk: 4,
            head_width: 32,
            mlp_ratio: 2,
            latent: 448,
            hyper: 224,
            hyper_window: 2,
            groups: uneven_groups(448).expect("448 channels split"),
        }
    }

    /// Token-aggregation blocks replaced by fixed half-window shifted pairs.
    pub fn without_token_aggregation(mut self) -> Self {
        for b in &mut self.blocks {
            if *b == BlockKind::TokenAgg {
                *b = BlockKind::ShiftPair(ShiftLaw::HalfWindow);
            }
        }
        self
    }

    /// Peaked shift laws replaced by the uniform law on the same support.
    pub fn with_uniform_shifts(mut self) -> Self {
        for b in &mut self.blocks {
            if *b == BlockKind::ShiftPair(ShiftLaw::Peaked) {
                *b = BlockKind::ShiftPair(ShiftLaw::Uniform);
            }
        }
        self
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    pub fn heads(&self, channels: usize) -> usize {
        channels / self.head_width
    }

    /// Image-to-latent downsampling factor.
    pub fn downsample(&self) -> usize {
        1 << self.stages()
    }

    /// Image extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        let a = self.downsample() * self.window;
        let b = self.downsample() * 2 * self.hyper_window;
        a / gcd(a, b) * b
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.spectral == 0 || self.dims.is_empty() || self.blocks.is_empty() {
            return bad("spectral channels, stages and blocks must be nonempty".into());
        }
        if self.head_width == 0 || self.mlp_ratio == 0 || self.topk == 0 || self.window == 0 || self.hyper_window == 0 {
            return bad("head width, mlp ratio, top-k and windows must be positive".into());
        }
        for &c in self.dims.iter().chain([&self.hyper]) {
            if c == 0 || c % self.head_width != 0 {
                return bad(format!("width {c} is not a positive multiple of head width {}", self.head_width));
            }
        }
        if self.latent == 0 {
            return bad("latent channels must be positive".into());
        }
        let shifted = self.blocks.iter().any(|b| matches!(b, BlockKind::ShiftPair(_)));
        if shifted && self.window < 2 {
            return bad(format!("window {} cannot be shifted", self.window));
        }
        if self.groups.iter().any(|&g| g == 0) || self.groups.iter().sum::<usize>() != self.latent {
            return bad(format!("groups {:?} do not partition {} channels", self.groups, self.latent));
        }
        Ok(())
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err!("image {h}x{w} is not a multiple of {m}"));
        }
        Ok(())
    }

    /// `key=value` lines, the config block of a checkpoint.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let blocks = self.blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "spectral={}\ndims={}\nblocks={}\nwindow={}\ntopk={}\nhead_width={}\nmlp_ratio={}\nlatent={}\nhyper={}\nhyper_window={}\ngroups={}\n",
            self.spectral,
            list(&self.dims),
            blocks,
            self.window,
            self.topk,
            self.head_width,
            self.mlp_ratio,
            self.latent,
            self.hyper,
            self.hyper_window,
            list(&self.groups),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {line:?}")))?;
            if kv.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::Format(format!("duplicate config key {k}")));
            }
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("config key {k} missing")));
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        let nums = |s: &str| s.split(',').map(num).collect::<Result<Vec<_>>>();
        let cfg = Self {
            spectral: num(take("spectral")?)?,
            dims: nums(take("dims")?)?,
            blocks: take("blocks")?.split(',').map(str::parse).collect::<Result<_>>()?,
            window: num(take("window")?)?,
            topk: num(take("topk")?)?,
            head_width: num(take("head_width")?)?,
            mlp_ratio: num(take("mlp_ratio")?)?,
            latent: num(take("latent")?)?,
            hyper: num(take("hyper")?)?,
            hyper_window: num(take("hyper_window")?)?,
            groups: nums(take("groups")?)?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Format(format!("unknown config key {k}")));
        }
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn linear_specs(prefix: &str, cin: usize, cout: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(format!("{prefix}.w"), &[cin, cout], Init::TruncNormal(0.02))];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros));
    }
    v
}

fn norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[c], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[c], Init::Zeros),
    ]
}

fn linear<'g>(b: &Binder<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    x.matmul(b.get(&format!("{prefix}.w"))?)?.add_row(b.get(&format!("{prefix}.b"))?)
}

/// Space-to-depth by 2, linear `4C -> C_out` without bias, layer norm.
pub fn patch_merge<'g>(x: Var<'g>, w: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(shape_err!("patch merge needs even extents, got {s:?}"));
    }
    x.space_to_depth(2)?.matmul(w)?.layer_norm(gamma, beta, LN_EPS)
}

/// Linear `C -> 4 C_out` without bias, depth-to-space by 2, layer norm.
pub fn patch_split<'g>(x: Var<'g>, w: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    x.matmul(w)?.depth_to_space(2)?.layer_norm(gamma, beta, LN_EPS)
}

fn merge<'g>(b: &Binder<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    patch_merge(
        x,
        b.get(&format!("{prefix}.w"))?,
        b.get(&format!("{prefix}.gamma"))?,
        b.get(&format!("{prefix}.beta"))?,
    )
}

fn split<'g>(b: &Binder<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    patch_split(
        x,
        b.get(&format!("{prefix}.w"))?,
        b.get(&format!("{prefix}.gamma"))?,
        b.get(&format!("{prefix}.beta"))?,
    )
}

fn resample_specs(prefix: &str, cin: usize, cout: usize, expand: bool) -> Vec<ParamSpec> {
    let mut v = if expand {
        linear_specs(prefix, cin, 4 * cout, false)
    } else {
        linear_specs(prefix, 4 * cin, cout, false)
    };
    v.extend(norm_specs(prefix, cout));
    v
}

fn stage_specs(cfg: &StageConfig, prefix: &str, c: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for (j, kind) in cfg.blocks.iter().enumerate() {
        match kind {
            BlockKind::TokenAgg => v.extend(LayerParams::specs(&format!("{prefix}.b{j}"), c, cfg.mlp_ratio)),
            BlockKind::ShiftPair(_) => {
                v.extend(LayerParams::specs(&format!("{prefix}.b{j}.l0"), c, cfg.mlp_ratio));
                v.extend(LayerParams::specs(&format!("{prefix}.b{j}.l1"), c, cfg.mlp_ratio));
            }
        }
    }
    v
}

fn run_stage<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    prefix: &str,
    mut x: Var<'g>,
    policy: &mut ShiftPolicy,
) -> Result<Var<'g>> {
    let c = x.shape()[2];
    let layer = |name: String| LayerParams::bind(b, &name, cfg.heads(c), cfg.window, cfg.topk);
    for (j, kind) in cfg.blocks.iter().enumerate() {
        x = match kind {
            BlockKind::TokenAgg => transformer_layer(x, &layer(format!("{prefix}.b{j}"))?, Mixer::TokenAgg)?,
            BlockKind::ShiftPair(law) => shinv_block(
                x,
                &layer(format!("{prefix}.b{j}.l0"))?,
                &layer(format!("{prefix}.b{j}.l1"))?,
                &law.distribution(cfg.window)?,
                policy,
            )?,
        };
    }
    Ok(x)
}

/// Parameters of `g_a`, `g_s`, `h_a` and `h_s`.
pub fn transform_specs(cfg: &StageConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let n = cfg.stages();
    let (m, nh) = (cfg.latent, cfg.hyper);
    let mut prev = cfg.spectral;
    for (i, &c) in cfg.dims.iter().enumerate() {
        v.extend(resample_specs(&format!("ga.s{i}.merge"), prev, c, false));
        v.extend(stage_specs(cfg, &format!("ga.s{i}"), c));
        prev = c;
    }
    v.extend(linear_specs("ga.out", prev, m, true));

    v.extend(linear_specs("gs.in", m, cfg.dims[n - 1], true));
    for i in (0..n).rev() {
        v.extend(stage_specs(cfg, &format!("gs.s{i}"), cfg.dims[i]));
        if i > 0 {
            v.extend(resample_specs(&format!("gs.s{i}.split"), cfg.dims[i], cfg.dims[i - 1], true));
        }
    }
    v.extend(linear_specs("gs.out", cfg.dims[0], 4 * cfg.spectral, true));

    v.extend(resample_specs("ha.merge", m, nh, false));
    v.extend(LayerParams::specs("ha.block", nh, cfg.mlp_ratio));
    v.extend(linear_specs("ha.out", 4 * nh, nh, true));

    v.extend(resample_specs("hs.split", nh, nh, true));
    v.extend(LayerParams::specs("hs.block", nh, cfg.mlp_ratio));
    v.extend(linear_specs("hs.out", nh, 4 * 2 * m, true));
    v
}

/// `g_a`: image `[H, W, S]` to latent `[H/2^n, W/2^n, M]`.
pub fn analysis_ga<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    x: Var<'g>,
    policy: &mut ShiftPolicy,
) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.spectral {
        return Err(shape_err!("image {s:?} does not have {} channels", cfg.spectral));
    }
    cfg.check_extent(s[0], s[1])?;
    let mut h = x;
    for i in 0..cfg.stages() {
        h = merge(b, &format!("ga.s{i}.merge"), h)?;
        h = run_stage(b, cfg, &format!("ga.s{i}"), h, policy)?;
    }
    linear(b, "ga.out", h)
}

/// `g_s`: latent back to an `[H, W, S]` image, clamped to `[0, 1]` when
/// `clamp` is set.
pub fn synthesis_gs<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    y: Var<'g>,
    policy: &mut ShiftPolicy,
    clamp: bool,
) -> Result<Var<'g>> {
    let s = y.shape();
    if s.len() != 3 || s[2] != cfg.latent {
        return Err(shape_err!("latent {s:?} does not have {} channels", cfg.latent));
    }
    let n = cfg.stages();
    cfg.check_extent(s[0] * cfg.downsample(), s[1] * cfg.downsample())?;
    let mut h = linear(b, "gs.in", y)?;
    for i in (0..n).rev() {
        h = run_stage(b, cfg, &format!("gs.s{i}"), h, policy)?;
        if i > 0 {
            h = split(b, &format!("gs.s{i}.split"), h)?;
        }
    }
    let out = linear(b, "gs.out", h)?.depth_to_space(2)?;
    if clamp {
        out.clamp(0.0, 1.0)
    } else {
        Ok(out)
    }
}

fn hyper_layer<'g>(b: &Binder<'g, '_>, cfg: &StageConfig, prefix: &str) -> Result<LayerParams<'g>> {
    LayerParams::bind(b, prefix, cfg.heads(cfg.hyper), cfg.hyper_window, cfg.topk)
}

/// `h_a`: latent `[h, w, M]` to hyper latent `[h/4, w/4, N_h]`.
pub fn hyper_ha<'g>(b: &Binder<'g, '_>, cfg: &StageConfig, y: Var<'g>) -> Result<Var<'g>> {
    let s = y.shape();
    if s.len() != 3 || s[2] != cfg.latent || s[0] % (2 * cfg.hyper_window) != 0 || s[1] % (2 * cfg.hyper_window) != 0 {
        return Err(shape_err!("latent {s:?} cannot feed the hyper analysis"));
    }
    let h = merge(b, "ha.merge", y)?;
    let h = transformer_layer(h, &hyper_layer(b, cfg, "ha.block")?, Mixer::Window)?;
    linear(b, "ha.out", h.space_to_depth(2)?)
}

/// `h_s`: hyper latent to the `[h, w, 2M]` context of the entropy model.
pub fn hyper_hs<'g>(b: &Binder<'g, '_>, cfg: &StageConfig, z: Var<'g>) -> Result<Var<'g>> {
    let s = z.shape();
    if s.len() != 3 || s[2] != cfg.hyper {
        return Err(shape_err!("hyper latent {s:?} does not have {} channels", cfg.hyper));
    }
    let h = split(b, "hs.split", z)?;
    let h = transformer_layer(h, &hyper_layer(b, cfg, "hs.block")?, Mixer::Window)?;
    linear(b, "hs.out", h)?.depth_to_space(2)
}
