//! Rate-distortion objective and image quality metrics.
//!
//! Images are `[H, W, S]` tensors with values in `[0, 1]`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tensor, Var};

/// The seven trade-off weights trained for an RD curve, low rate first.
pub const LAMBDA_PRESETS: [f64; 7] = [0.0015, 0.0035, 0.0070, 0.0125, 0.0250, 0.0410, 0.0550];

/// Standard five-scale MS-SSIM exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `bpp + λ·255²·MSE`, with bits per pixel over the `height x width` plane.
pub fn rd_loss<'g>(
    x: Var<'g>,
    x_hat: Var<'g>,
    rate_bits: Var<'g>,
    lambda: f64,
    height: usize,
    width: usize,
) -> Result<Var<'g>> {
    if x.shape() != x_hat.shape() {
        return Err(shape_err!("distortion of {:?} against {:?}", x.shape(), x_hat.shape()));
    }
    let bpp = rate_bits.scale(1.0 / (height * width) as f64)?;
    let mse = x.sub(x_hat)?.square()?.mean()?;
    bpp.add(mse.scale(lambda * 255.0 * 255.0)?)
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err!("mse of {:?} against {:?}", x.shape(), y.shape()));
    }
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(255² / MSE₂₅₅)` for an MSE measured on the 255 scale; `+∞` at 0.
pub fn psnr_from_mse255(mse255: f64) -> f64 {
    if mse255 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse255).log10()
    }
}

/// PSNR over all channels jointly.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse255(mse(x, y)? * 255.0 * 255.0))
}

/// `-10·log10(1 - m)`; `+∞` at `m = 1`.
pub fn db_transform(m: f64) -> f64 {
    if m >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * (1.0 - m).log10()
    }
}

/// Number of scales usable for the smaller extent, at most five.
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let mut side = height.min(width);
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && side >= SSIM_WINDOW {
        n += 1;
        side /= 2;
    }
    n
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter of a `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = blur(x, h, w, k);
    let (my, _, _) = blur(y, h, w, k);
    let (ex2, _, _) = blur(&xx, h, w, k);
    let (ey2, _, _) = blur(&yy, h, w, k);
    let (exy, _, _) = blur(&xy, h, w, k);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let vx = ex2[i] - mx[i] * mx[i];
        let vy = ey2[i] - my[i] * my[i];
        let cov = exy[i] - mx[i] * my[i];
        let c = (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
        let l = (2.0 * mx[i] * my[i] + SSIM_C1) / (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn avg_pool2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
            let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
            out[i * ow + j] = (a + b) / 4.0;
        }
    }
    (out, oh, ow)
}

/// MS-SSIM of one channel plane pair with `scales` scales.
fn ms_ssim_plane(x: Vec<f64>, y: Vec<f64>, h: usize, w: usize, scales: usize) -> f64 {
    let k = gaussian_kernel();
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let (mut x, mut y, mut h, mut w) = (x, y, h, w);
    let mut m = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, h, w, &k);
        let term = if s + 1 == scales { ssim } else { cs };
        m *= term.max(0.0).powf(wt / total);
        if s + 1 < scales {
            let (px, ph, pw) = avg_pool2(&x, h, w);
            let (py, _, _) = avg_pool2(&y, h, w);
            (x, y, h, w) = (px, py, ph, pw);
        }
    }
    m
}

/// MS-SSIM computed per channel and averaged. Uses as many of the five
/// scales as the extents allow, with the exponents renormalized.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let s = x.shape();
    if s != y.shape() || s.len() != 3 {
        return Err(shape_err!("ms-ssim of {:?} against {:?}", s, y.shape()));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(Error::Usage(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}-pixel window")));
    }
    let plane = |t: &Tensor, ch: usize| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).copied().collect() };
    let sum: f64 = (0..c).map(|ch| ms_ssim_plane(plane(x, ch), plane(y, ch), h, w, scales)).sum();
    Ok(sum / c as f64)
}

/// One point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub n_images: usize,
}

impl RdPoint {
    pub const CSV_HEADER: &'static str = "lambda,bpp,psnr_db,msssim,msssim_db,n_images";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.6},{:.4},{}",
            self.lambda, self.bpp, self.psnr, self.ms_ssim, self.ms_ssim_db, self.n_images
        )
    }
}

/// CSV for a list of RD points, with a comment line stating the averaging.
pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from("# psnr_db is the mean of per-image PSNR; bpp, msssim are per-image means\n");
    out.push_str(RdPoint::CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&p.csv_row());
        out.push('\n');
    }
    out
}
