//! Full-reference quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::image::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for data in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i32;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; ho * w];
    for y in 0..ho {
        for x in 0..w {
            tmp[y * w + x] = (0..n).map(|j| k[j] * src[(y + j) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|j| k[j] * tmp[y * w + x + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-covered 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, L = 1), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, ch) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(shape_err!("ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

pub fn evaluate(reference: &Image, test: &Image) -> Result<MetricResult> {
    Ok(MetricResult { psnr_db: psnr(reference, test)?, ssim: ssim(reference, test)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::add_noise_level;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn texture(n: usize) -> Image {
        Image::from_fn(n, n, 1, |y, x, _| (0.5 + 0.3 * ((x * 3 + y) as f32 * 0.4).sin()) * 0.9)
    }

    #[test]
    fn psnr_cases() {
        let a = texture(16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = Image::filled(16, 16, 1, 0.2);
        let o = Image::filled(16, 16, 1, 0.3);
        assert!((psnr(&z, &o).unwrap() - 20.0).abs() < 1e-3);
        let b = add_noise_level(&a, 10.0, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(8, 8, 1, 0.0)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = texture(64);
        let p: Vec<f64> = [5.0, 10.0, 20.0].iter().map(|&d| psnr(&a, &add_noise_level(&a, d, 7)).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    }

    #[test]
    fn ssim_cases() {
        let a = texture(24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = add_noise_level(&a, 25.0, 1);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let binary = Image::from_fn(24, 24, 1, |y, x, _| ((x / 3 + y / 5) % 2) as f32);
        let inverted = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverted).unwrap() < 0.0);
        assert!(ssim(&Image::filled(10, 30, 1, 0.0), &Image::filled(10, 30, 1, 0.0)).is_err());
    }

    #[test]
    fn luminance_shift_hurts_less_than_noise() {
        let a = texture(32);
        let c = 0.03f32;
        let shifted = a.map(|v| v + c);
        // Gaussian noise with the same MSE: δ/255 = c
        let noisy = crate::degradation::add_awgn(&a, c as f64 * 255.0, &mut ChaCha8Rng::seed_from_u64(11));
        assert!(ssim(&a, &shifted).unwrap() > ssim(&a, &noisy).unwrap());
    }
}
