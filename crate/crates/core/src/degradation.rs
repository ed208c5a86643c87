//! Synthetic degradation `x = [(y ⊛ k_σ)↓_r + n_δ]_JPEG_q`, followed by
//! optional colour jitter and a final clamp to `[0, 1]`.
//!
//! Every stage is a pure function of its inputs and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::resample::{AxisPlan, ResamplePlan};

/// Blur standard deviations below this are treated as no blur.
pub const MIN_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Contrast factor drawn from `[1 − contrast, 1 + contrast]`.
    pub contrast: f64,
    /// Brightness offset drawn from `[−brightness, brightness]`.
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Gaussian blur standard deviation in pixels.
    pub sigma: f64,
    /// Integer downsampling factor.
    pub scale: usize,
    /// AWGN standard deviation on the 0–255 scale.
    pub noise: f64,
    /// JPEG quality, 1–100.
    pub quality: u32,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self { sigma: 0.0, scale: 1, noise: 0.0, quality: 100, jitter: Jitter::default(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be ≥ 0, got {}", self.sigma));
        }
        if self.scale < 1 {
            return bad("scale must be ≥ 1".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be ≥ 0, got {}", self.noise));
        }
        if !(1..=100).contains(&self.quality) {
            return bad(format!("quality must be in 1..=100, got {}", self.quality));
        }
        if !(self.jitter.contrast >= 0.0 && self.jitter.brightness >= 0.0) {
            return bad("jitter bounds must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Sampling ranges for training-time degradations (inclusive bounds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub sigma: [f64; 2],
    pub scale: [usize; 2],
    pub noise: [f64; 2],
    pub quality: [u32; 2],
    pub jitter: Jitter,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self { sigma: [0.2, 10.0], scale: [1, 8], noise: [0.0, 15.0], quality: [60, 100], jitter: Jitter::default() }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma[0] >= 0.0
            && self.sigma[0] <= self.sigma[1]
            && self.scale[0] >= 1
            && self.scale[0] <= self.scale[1]
            && self.noise[0] >= 0.0
            && self.noise[0] <= self.noise[1]
            && self.quality[0] >= 1
            && self.quality[0] <= self.quality[1]
            && self.quality[1] <= 100;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid degradation ranges {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DegradationSpec {
        DegradationSpec {
            sigma: rng.gen_range(self.sigma[0]..=self.sigma[1]),
            scale: rng.gen_range(self.scale[0]..=self.scale[1]),
            noise: rng.gen_range(self.noise[0]..=self.noise[1]),
            quality: rng.gen_range(self.quality[0]..=self.quality[1]),
            jitter: self.jitter,
            seed: rng.gen(),
        }
    }
}

/// Normalized 1-D Gaussian of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma < MIN_SIGMA {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index into `[0, n)` without repeating the edge sample, for any
/// offset (kernels may be wider than the image).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn blur_axis_plan(n: usize, kernel: &[f64]) -> AxisPlan {
    let radius = (kernel.len() / 2) as isize;
    let taps = (0..n as isize)
        .map(|o| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
            for (j, &w) in kernel.iter().enumerate() {
                let src = reflect(o + j as isize - radius, n);
                match row.iter_mut().find(|(i, _)| *i == src) {
                    Some(entry) => entry.1 += w,
                    None => row.push((src, w)),
                }
            }
            row
        })
        .collect();
    AxisPlan { len_in: n, taps }
}

fn resample_image(img: &Image, plan: &ResamplePlan) -> Image {
    let (ho, wo) = plan.out_dims();
    let mut data = vec![0.0f32; ho * wo * img.channels()];
    for c in 0..img.channels() {
        plan.apply(img.plane(c), &mut data[c * ho * wo..(c + 1) * ho * wo]);
    }
    Image::new(ho, wo, img.channels(), data).expect("plan dimensions are consistent")
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma < MIN_SIGMA {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let plan = ResamplePlan::new(blur_axis_plan(img.height(), &k), blur_axis_plan(img.width(), &k));
    resample_image(img, &plan)
}

/// `r×r` block mean. Dimensions must be divisible by `r`.
pub fn downsample(img: &Image, r: usize) -> Result<Image> {
    if r == 0 {
        return Err(Error::InvalidArgument("downsample factor must be ≥ 1".into()));
    }
    let plan = ResamplePlan::new(AxisPlan::area(img.height(), r)?, AxisPlan::area(img.width(), r)?);
    Ok(resample_image(img, &plan))
}

/// Bilinear (align-corners-false) upsampling by an integer factor.
pub fn upsample(img: &Image, r: usize) -> Result<Image> {
    if r == 0 {
        return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
    }
    resize_bilinear(img, img.height() * r, img.width() * r)
}

pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(shape_err!("cannot resize to {height}×{width}"));
    }
    let plan = ResamplePlan::new(AxisPlan::bilinear(img.height(), height), AxisPlan::bilinear(img.width(), width));
    Ok(resample_image(img, &plan))
}

/// Replicate-pad bottom/right edges up to the given size.
pub fn pad_replicate(img: &Image, height: usize, width: usize) -> Image {
    Image::from_fn(height, width, img.channels(), |y, x, c| {
        img.get(y.min(img.height() - 1), x.min(img.width() - 1), c)
    })
}

pub fn crop(img: &Image, height: usize, width: usize) -> Image {
    Image::from_fn(height, width, img.channels(), |y, x, c| img.get(y, x, c))
}

/// Standard normal samples via the Box–Muller transform.
pub struct BoxMuller<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> BoxMuller<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 ∈ (0, 1] keeps the logarithm finite
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn jitter_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Add `N(0, (δ/255)²)` per sample. The result is not clamped.
pub fn add_awgn(img: &Image, delta: f64, rng: &mut impl Rng) -> Image {
    if delta == 0.0 {
        return img.clone();
    }
    let std = delta / 255.0;
    let mut gauss = BoxMuller::new(rng);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + std * gauss.sample()) as f32;
    }
    out
}

/// Standalone noise injection for denoising experiments (clamped).
pub fn add_noise_level(img: &Image, delta: f64, seed: u64) -> Image {
    add_awgn(img, delta, &mut noise_rng(seed)).clamped()
}

/// Baseline JPEG luminance quantization table (natural order).
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG quality scaling of the luminance table.
pub fn quant_table(quality: u32) -> [u16; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

fn dct2(block: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| basis[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * basis[v][x]).sum();
        }
    }
    out
}

fn idct2(coef: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| basis[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * basis[v][x]).sum();
        }
    }
    out
}

fn blockwise(img: &Image, table: Option<&[u16; 64]>) -> Image {
    let (h, w, ch) = img.dims();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let basis = dct_basis();
    let mut out = img.clone();
    for c in 0..ch {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = src[sy * w + sx] as f64 * 255.0 - 128.0;
                    }
                }
                let mut coef = dct2(&block, &basis);
                if let Some(t) = table {
                    for (c, &q) in coef.iter_mut().zip(t) {
                        *c = (*c / q as f64).round() * q as f64;
                    }
                }
                let rec = idct2(&coef, &basis);
                for y in 0..8 {
                    for x in 0..8 {
                        let (oy, ox) = (by + y, bx + x);
                        if oy < h && ox < w {
                            dst[oy * w + ox] = ((rec[y * 8 + x] + 128.0) / 255.0) as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

/// JPEG-like lossy round trip: per channel 8×8 block DCT, quantization with
/// the IJG-scaled luminance table, dequantization and inverse DCT. Edge
/// blocks are replicate-padded; entropy coding has no pixel effect and is
/// omitted.
pub fn jpeg_like(img: &Image, quality: u32) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("quality must be in 1..=100, got {quality}")));
    }
    Ok(blockwise(img, Some(&quant_table(quality))))
}

/// Block DCT followed immediately by its inverse (no quantization).
pub fn dct_roundtrip(img: &Image) -> Image {
    blockwise(img, None)
}

/// Per-channel `v' = a·v + b`, `a ∈ [1 − contrast, 1 + contrast]`,
/// `b ∈ [−brightness, brightness]`.
pub fn color_jitter(img: &Image, jitter: Jitter, rng: &mut impl Rng) -> Image {
    if jitter.contrast == 0.0 && jitter.brightness == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for c in 0..img.channels() {
        let a = if jitter.contrast > 0.0 { rng.gen_range(1.0 - jitter.contrast..=1.0 + jitter.contrast) } else { 1.0 };
        let b = if jitter.brightness > 0.0 { rng.gen_range(-jitter.brightness..=jitter.brightness) } else { 0.0 };
        apply_affine(out.plane_mut(c), a, b);
    }
    out
}

pub fn apply_affine(plane: &mut [f32], a: f64, b: f64) {
    plane.iter_mut().for_each(|v| *v = (a * *v as f64 + b) as f32);
}

/// Full degradation at reduced resolution `ceil(H/r)×ceil(W/r)`.
/// Dimensions not divisible by `r` are replicate-padded before the block mean.
pub fn degrade(img: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let blurred = gaussian_blur(img, spec.sigma);
    let r = spec.scale;
    let padded = pad_replicate(&blurred, img.height().div_ceil(r) * r, img.width().div_ceil(r) * r);
    let small = downsample(&padded, r)?;
    let noisy = add_awgn(&small, spec.noise, &mut noise_rng(spec.seed));
    let compressed = jpeg_like(&noisy, spec.quality)?;
    let jittered = color_jitter(&compressed, spec.jitter, &mut jitter_rng(spec.seed));
    Ok(jittered.clamped())
}

/// [`degrade`] followed by bilinear re-upsampling to the input size.
pub fn degrade_keep_size(img: &Image, spec: &DegradationSpec) -> Result<Image> {
    let small = degrade(img, spec)?;
    let r = spec.scale;
    let up = upsample(&small, r)?;
    Ok(crop(&up, img.height(), img.width()).clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| (y + x) as f32 / (h + w - 2) as f32)
    }

    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| {
            let (yf, xf) = (y as f32, x as f32);
            (0.5 + 0.25 * (xf * 0.9).sin() * (yf * 0.7).cos() + 0.2 * ((xf + 2.0 * yf) * 0.35).sin()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn blur_identity_and_normalization() {
        let img = texture(16, 16);
        assert_eq!(gaussian_blur(&img, 0.0), img);
        for s in [0.2, 0.7, 1.0, 3.3, 10.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
        }
    }

    #[test]
    fn blur_of_impulse_is_the_kernel() {
        let mut img = Image::filled(15, 15, 1, 0.0);
        img.data_mut()[7 * 15 + 7] = 1.0;
        let out = gaussian_blur(&img, 1.0);
        // direct evaluation of the normalized 7-tap kernel, outer product
        let raw: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        for dy in 0..7 {
            for dx in 0..7 {
                let expect = raw[dy] * raw[dx] / (s * s);
                let got = out.get(4 + dy, 4 + dx, 0) as f64;
                assert!((got - expect).abs() < 1e-6, "({dy},{dx}) {got} vs {expect}");
            }
        }
    }

    #[test]
    fn reflect_handles_wide_kernels() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        let img = texture(4, 4);
        let out = gaussian_blur(&img, 10.0);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn down_and_up_sampling() {
        let img = texture(8, 8);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        assert_eq!(upsample(&img, 1).unwrap(), img);
        let flat = Image::filled(8, 8, 1, 0.3);
        let d = downsample(&flat, 4).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let u = upsample(&d, 4).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let checker = Image::from_fn(4, 4, 1, |y, x, _| ((y + x) % 2) as f32);
        assert!(downsample(&checker, 2).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(downsample(&Image::filled(5, 4, 1, 0.0), 2).is_err());
    }

    #[test]
    fn awgn_identity_and_determinism() {
        let img = texture(8, 8);
        assert_eq!(add_awgn(&img, 0.0, &mut noise_rng(1)), img);
        let a = add_awgn(&img, 10.0, &mut noise_rng(5));
        let b = add_awgn(&img, 10.0, &mut noise_rng(5));
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn quant_table_scaling() {
        assert!(quant_table(100).iter().all(|&q| q == 1));
        assert_eq!(quant_table(50), LUMA_QUANT);
        // q = 10 → S = 500 → Q'₀ = (16·500 + 50)/100 = 80
        assert_eq!(quant_table(10)[0], 80);
        assert_eq!(quant_table(1)[63], 255);
    }

    #[test]
    fn dct_roundtrip_is_lossless() {
        let img = texture(13, 11);
        let back = dct_roundtrip(&img);
        let max = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max <= 1e-4, "{max}");
    }

    #[test]
    fn jpeg_quality_behaviour() {
        let g = gradient(32, 32);
        assert!(psnr(&jpeg_like(&g, 100).unwrap(), &g).unwrap() > 45.0);
        let t = texture(32, 32);
        let p10 = psnr(&jpeg_like(&t, 10).unwrap(), &t).unwrap();
        let p50 = psnr(&jpeg_like(&t, 50).unwrap(), &t).unwrap();
        let p90 = psnr(&jpeg_like(&t, 90).unwrap(), &t).unwrap();
        assert!(p10 < p50 && p50 < p90, "{p10} {p50} {p90}");
        assert!(jpeg_like(&t, 0).is_err());
    }

    #[test]
    fn constant_image_survives_quantization() {
        // DC of a constant block: 8·(255v − 128). At v = 128/255 it is 0 and the
        // block is recovered exactly for any quality.
        let mid = Image::filled(8, 8, 1, 128.0 / 255.0);
        for q in [1, 10, 50, 90, 100] {
            assert_eq!(jpeg_like(&mid, q).unwrap(), mid);
        }
        // Otherwise only the single DC coefficient is quantized: the output
        // stays constant, off by at most Q₀/16 on the 255 scale.
        let v = 0.7f32;
        let img = Image::filled(16, 16, 1, v);
        for q in [10, 60, 95] {
            let out = jpeg_like(&img, q).unwrap();
            let dc = 8.0 * (255.0 * v as f64 - 128.0);
            let q0 = quant_table(q)[0] as f64;
            let expect = ((dc / q0).round() * q0 / 8.0 + 128.0) / 255.0;
            for &o in out.data() {
                assert!((o as f64 - expect).abs() < 1e-6);
                assert!((o as f64 - v as f64).abs() * 255.0 <= q0 / 16.0 + 1e-6);
            }
        }
    }

    #[test]
    fn jitter_behaviour() {
        let img = texture(4, 4);
        let mut rng = jitter_rng(3);
        assert_eq!(color_jitter(&img, Jitter::default(), &mut rng), img);
        let mut shifted = img.clone();
        apply_affine(shifted.plane_mut(0), 1.0, 0.1);
        for (a, b) in shifted.data().iter().zip(img.data()) {
            assert!((a - b - 0.1).abs() < 1e-6);
        }
        let j = Jitter { contrast: 0.2, brightness: 0.1 };
        assert_eq!(color_jitter(&img, j, &mut jitter_rng(9)), color_jitter(&img, j, &mut jitter_rng(9)));
    }

    #[test]
    fn identity_spec_is_near_lossless() {
        let img = texture(32, 32);
        let out = degrade(&img, &DegradationSpec::identity()).unwrap();
        assert!(psnr(&out, &img).unwrap() > 45.0);
    }

    #[test]
    fn degrade_shapes_and_determinism() {
        let img = texture(32, 32);
        let spec = DegradationSpec { sigma: 2.0, scale: 3, noise: 10.0, quality: 70, jitter: Jitter::default(), seed: 42 };
        let small = degrade(&img, &spec).unwrap();
        assert_eq!((small.height(), small.width()), (11, 11));
        let full = degrade_keep_size(&img, &spec).unwrap();
        assert_eq!(full.dims(), img.dims());
        assert_eq!(full, degrade_keep_size(&img, &spec).unwrap());
        assert!(full.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bad = DegradationSpec { quality: 0, ..spec };
        assert!(degrade(&img, &bad).is_err());
    }

    #[test]
    fn sampled_specs_respect_ranges() {
        let ranges = DegradationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let s = ranges.sample(&mut rng);
            assert!((0.2..=10.0).contains(&s.sigma));
            assert!((1..=8).contains(&s.scale));
            assert!((0.0..=15.0).contains(&s.noise));
            assert!((60..=100).contains(&s.quality));
        }
    }

    #[test]
    fn noise_level_psnr() {
        let gray = Image::filled(128, 128, 1, 0.5);
        let p20 = psnr(&add_noise_level(&gray, 20.0, 1), &gray).unwrap();
        let analytic = 10.0 * (1.0 / (20.0f64 / 255.0).powi(2)).log10();
        assert!((p20 - analytic).abs() < 0.3, "{p20} vs {analytic}");
        let p60 = psnr(&add_noise_level(&gray, 60.0, 1), &gray).unwrap();
        assert!(p60 < p20);
        assert_eq!(add_noise_level(&gray, 0.0, 1), gray);
    }
}
