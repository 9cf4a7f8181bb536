//! Image quality metrics on `[N, C, H, W]` tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target, "mse")?;
    if pred.numel() == 0 {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x] / (s * s);
        }
    }
    w
}

/// Mean structural similarity over all images and channels, using an 11x11
/// Gaussian window (sigma 1.5) at every valid position.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let [n, c, h, w] = a.dims4("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for plane in 0..n * c {
        let pa = &a.data()[plane * h * w..(plane + 1) * h * w];
        let pb = &b.data()[plane * h * w..(plane + 1) * h * w];
        let mut plane_sum = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        let i = (y + dy) * w + x + dx;
                        let (u, v) = (pa[i], pb[i]);
                        mx += k * u;
                        my += k * v;
                        sxx += k * u * u;
                        syy += k * v * v;
                        sxy += k * u * v;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                plane_sum += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
        total += plane_sum / (oh * ow) as f64;
    }
    Ok(total / (n * c) as f64)
}
