//! Quantization and the probability models of the two latents.
//!
//! The hyper latent `ẑ` uses a per-channel logistic prior. The main latent is
//! split into channel groups; group `i` is Gaussian with mean and scale
//! predicted from the hyper context and the already decoded groups `< i`.

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::params::{Binder, Init, ParamSpec};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};
use crate::transforms::StageConfig;

pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Ordered channel groups of the latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGroups {
    sizes: Vec<usize>,
}

impl ChannelGroups {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Usage(format!("invalid channel groups {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn from_config(cfg: &StageConfig) -> Result<Self> {
        Self::new(cfg.groups.clone())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// First channel of group `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.sizes[..i].iter().sum()
    }
}

/// Uniform `U(-1/2, 1/2)` draws.
pub fn uniform_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>() - 0.5)
}

/// Training-time stand-in for rounding: `y + u`.
pub fn quantize_noise<'g>(y: Var<'g>, rng: &mut Rng) -> Result<Var<'g>> {
    let u = y.graph().constant(uniform_noise(&y.shape(), rng));
    y.add(u)
}

/// Mean-centered rounding, half away from zero. Returns `ŷ = q + μ` and the
/// integer residuals `q`.
pub fn quantize_round(y: &Tensor, mu: &Tensor) -> Result<(Tensor, Vec<i32>)> {
    if y.shape() != mu.shape() {
        return Err(shape_err!("rounding {:?} around means {:?}", y.shape(), mu.shape()));
    }
    let symbols: Vec<i32> = y
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&v, &m)| (v - m).round() as i32)
        .collect();
    let yhat = dequantize(&symbols, mu)?;
    Ok((yhat, symbols))
}

/// `ŷ = q + μ`, exactly as the decoder computes it.
pub fn dequantize(symbols: &[i32], mu: &Tensor) -> Result<Tensor> {
    if symbols.len() != mu.numel() {
        return Err(shape_err!("{} symbols for {} means", symbols.len(), mu.numel()));
    }
    let data = symbols.iter().zip(mu.data()).map(|(&q, &m)| q as f64 + m).collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// Prior location and log-scale, and the per-group parameter networks.
pub fn entropy_specs(cfg: &StageConfig) -> Vec<ParamSpec> {
    let mut v = vec![
        ParamSpec::new("entropy.prior.loc", &[cfg.hyper], Init::Zeros),
        ParamSpec::new("entropy.prior.log_scale", &[cfg.hyper], Init::Zeros),
    ];
    let hidden = 2 * cfg.latent;
    let mut prev = 0;
    for (i, &size) in cfg.groups.iter().enumerate() {
        let p = format!("entropy.g{i}");
        v.push(ParamSpec::new(format!("{p}.w1"), &[2 * cfg.latent + prev, hidden], Init::TruncNormal(0.02)));
        v.push(ParamSpec::new(format!("{p}.b1"), &[hidden], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.w2"), &[hidden, 2 * size], Init::TruncNormal(0.02)));
        v.push(ParamSpec::new(format!("{p}.b2"), &[2 * size], Init::Zeros));
        prev += size;
    }
    v
}

/// Mean and scale of group `i` from the hyper context `[h, w, 2M]` and the
/// decoded groups `< i` (`None` for group 0).
pub fn group_params<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    i: usize,
    ctx: Var<'g>,
    decoded_prev: Option<Var<'g>>,
) -> Result<(Var<'g>, Var<'g>)> {
    let groups = ChannelGroups::from_config(cfg)?;
    if i >= groups.len() {
        return Err(Error::Usage(format!("group {i} of {}", groups.len())));
    }
    let prev_ch = groups.offset(i);
    let input = match decoded_prev {
        None if i == 0 => ctx,
        Some(prev) if i > 0 && prev.shape().last() == Some(&prev_ch) => b.graph().concat(&[ctx, prev], 2)?,
        _ => return Err(shape_err!("group {i} needs exactly {prev_ch} decoded channels")),
    };
    let p = format!("entropy.g{i}");
    let raw = input
        .matmul(b.get(&format!("{p}.w1"))?)?
        .add_row(b.get(&format!("{p}.b1"))?)?
        .gelu()?
        .matmul(b.get(&format!("{p}.w2"))?)?
        .add_row(b.get(&format!("{p}.b2"))?)?;
    let size = groups.sizes()[i];
    let parts = raw.split(2, &[size, size])?;
    let sigma = parts[1].softplus()?.clamp(SCALE_MIN, SCALE_MAX)?;
    Ok((parts[0], sigma))
}

/// Sign of `v` as a constant, with `sign(0) = 1`.
fn sign_of<'g>(v: Var<'g>) -> Var<'g> {
    v.graph().constant(v.value().map(|x| if x < 0.0 { -1.0 } else { 1.0 }))
}

/// Probability mass of the unit bin around `ŷ` under `N(μ, σ²)`, floored.
///
/// Evaluated on the lower tail (`|ŷ - μ|` mirrored to the left) so that far
/// tails do not cancel to zero.
pub fn gaussian_likelihood<'g>(yhat: Var<'g>, mu: Var<'g>, sigma: Var<'g>) -> Result<Var<'g>> {
    let d = yhat.sub(mu)?;
    let v = d.mul(sign_of(d))?;
    let upper = v.neg()?.add_scalar(0.5)?.div(sigma)?.normal_cdf()?;
    let lower = v.neg()?.add_scalar(-0.5)?.div(sigma)?.normal_cdf()?;
    upper.sub(lower)?.clamp(LIKELIHOOD_FLOOR, 1.0)
}

/// Probability mass of the unit bin around `ẑ` under a per-channel logistic
/// with location `loc` and scale `exp(log_scale)`, floored.
pub fn factorized_likelihood<'g>(zhat: Var<'g>, loc: Var<'g>, log_scale: Var<'g>) -> Result<Var<'g>> {
    let d = zhat.add_row(loc.neg()?)?;
    let v = d.mul(sign_of(d))?;
    let inv_scale = log_scale.neg()?.exp()?;
    let upper = v.neg()?.add_scalar(0.5)?.mul_row(inv_scale)?.sigmoid()?;
    let lower = v.neg()?.add_scalar(-0.5)?.mul_row(inv_scale)?.sigmoid()?;
    upper.sub(lower)?.clamp(LIKELIHOOD_FLOOR, 1.0)
}

/// `Σ -log2 p`.
pub fn rate_bits<'g>(p: Var<'g>) -> Result<Var<'g>> {
    p.ln()?.sum()?.scale(-1.0 / std::f64::consts::LN_2)
}

/// Model of the rate terms produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Rate<'g> {
    pub y_bits: Var<'g>,
    pub z_bits: Var<'g>,
}

impl<'g> Rate<'g> {
    pub fn total(&self) -> Result<Var<'g>> {
        self.y_bits.add(self.z_bits)
    }
}

/// Rate of quantized (or noisy) latents: the hyper latent under the prior,
/// then every group conditioned on `ctx` and the groups before it.
pub fn latent_rate<'g>(
    b: &Binder<'g, '_>,
    cfg: &StageConfig,
    yq: Var<'g>,
    zq: Var<'g>,
    ctx: Var<'g>,
) -> Result<Rate<'g>> {
    let z_bits = rate_bits(factorized_likelihood(
        zq,
        b.get("entropy.prior.loc")?,
        b.get("entropy.prior.log_scale")?,
    )?)?;
    let groups = ChannelGroups::from_config(cfg)?;
    let parts = yq.split(2, groups.sizes())?;
    let mut y_bits: Option<Var<'g>> = None;
    for i in 0..groups.len() {
        let prev = if i == 0 { None } else { Some(yq.slice(2, 0, groups.offset(i))?) };
        let (mu, sigma) = group_params(b, cfg, i, ctx, prev)?;
        let bits = rate_bits(gaussian_likelihood(parts[i], mu, sigma)?)?;
        y_bits = Some(match y_bits {
            None => bits,
            Some(acc) => acc.add(bits)?,
        });
    }
    Ok(Rate {
        y_bits: y_bits.expect("at least one group"),
        z_bits,
    })
}
