#![allow(dead_code)]

use msnc_core::metrics::{ms_ssim_scales, MS_SSIM_WEIGHTS};
use msnc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale)`.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Direct 2-D SSIM maps with an explicit 11x11 window.
pub fn reference_ms_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let scales = ms_ssim_scales(h, w);
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for ch in 0..c {
        let mut a: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..w).map(|j| x.at(&[i, j, ch])).collect())
            .collect();
        let mut b: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..w).map(|j| y.at(&[i, j, ch])).collect())
            .collect();
        let mut prod = 1.0;
        for (k, &wt) in weights.iter().enumerate() {
            let (hh, ww) = (a.len(), a[0].len());
            let (mut ssim, mut cs, mut n) = (0.0, 0.0, 0.0);
            for i in 0..=hh - 11 {
                for j in 0..=ww - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..11 {
                        for v in 0..11 {
                            let g = win[u][v] / total;
                            let (p, q) = (a[i + u][j + v], b[i + u][j + v]);
                            mx += g * p;
                            my += g * q;
                            xx += g * p * p;
                            yy += g * q * q;
                            xy += g * p * q;
                        }
                    }
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let cst = (2.0 * (xy - mx * my) + c2) / ((xx - mx * mx) + (yy - my * my) + c2);
                    ssim += l * cst;
                    cs += cst;
                    n += 1.0;
                }
            }
            let term = if k + 1 == scales { ssim / n } else { cs / n };
            prod *= term.max(0.0).powf(wt / wsum);
            let pool = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..hh / 2)
                    .map(|i| {
                        (0..ww / 2)
                            .map(|j| {
                                (m[2 * i][2 * j]
                                    + m[2 * i][2 * j + 1]
                                    + m[2 * i + 1][2 * j]
                                    + m[2 * i + 1][2 * j + 1])
                                    / 4.0
                            })
                            .collect()
                    })
                    .collect()
            };
            a = pool(&a);
            b = pool(&b);
        }
        acc += prod;
    }
    acc / c as f64
}
