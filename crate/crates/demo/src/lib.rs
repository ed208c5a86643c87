//! Browser bindings: toy-face generation, degradation preview and masked
//! network interpolation between two hand-built denoisers.
//!
//! Images cross the boundary as row-major grayscale `Float32Array`s in [0, 1].

use wasm_bindgen::prelude::*;

use faceprior::config::RunConfig;
use faceprior::degradation::{degrade_keep_size, DegradationSpec, Jitter};
use faceprior::dni::spatial_blend;
use faceprior::image::Image;
use faceprior::metrics::{psnr, ssim};
use faceprior::model_io::Checkpoint;
use faceprior::tensor::Tensor;
use faceprior::train::denoiser_initial_checkpoint;

const KERNEL: usize = 5;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn image(data: &[f32], size: usize) -> Result<Image, JsError> {
    Image::new(size, size, 1, data.to_vec()).map_err(js_err)
}

#[wasm_bindgen]
pub fn toy_face(size: usize, seed: u64) -> Result<Vec<f32>, JsError> {
    Ok(faceprior::toyface::toy_face(size, seed).map_err(js_err)?.image.data().to_vec())
}

/// Blur, downsample by `scale`, add noise, JPEG-compress, then upsample back to `size`.
#[wasm_bindgen]
pub fn degrade(
    face: &[f32],
    size: usize,
    sigma: f64,
    scale: usize,
    noise: f64,
    quality: u32,
    seed: u64,
) -> Result<Vec<f32>, JsError> {
    let spec = DegradationSpec { sigma, scale, noise, quality, jitter: Jitter::default(), seed };
    Ok(degrade_keep_size(&image(face, size)?, &spec).map_err(js_err)?.data().to_vec())
}

/// `[psnr_db, ssim]` of `test` against `reference`.
#[wasm_bindgen]
pub fn quality(reference: &[f32], test: &[f32], size: usize) -> Result<Vec<f64>, JsError> {
    let (r, t) = (image(reference, size)?, image(test, size)?);
    Ok(vec![psnr(&t, &r).map_err(js_err)?, ssim(&t, &r).map_err(js_err)?])
}

fn gaussian(sigma: f64) -> Vec<f32> {
    let c = (KERNEL / 2) as f64;
    let raw: Vec<f64> = (0..KERNEL * KERNEL)
        .map(|i| {
            let (y, x) = ((i / KERNEL) as f64 - c, (i % KERNEL) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / s) as f32).collect()
}

/// Two denoisers with identical layouts: one is the identity (zero residual
/// branch), the other outputs a Gaussian blur of its input.
fn endpoints() -> Result<(Checkpoint, Checkpoint), JsError> {
    let mut cfg = RunConfig::default();
    cfg.denoise.arch.kernel = KERNEL;
    cfg.denoise.arch.width1 = 2;
    cfg.denoise.arch.width2 = 2;
    let mut sharp = denoiser_initial_checkpoint(&cfg).map_err(js_err)?;
    for t in sharp.params.values_mut() {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let mut smooth = sharp.clone();
    let centre = KERNEL * KERNEL / 2;
    let p = &mut smooth.params;
    let mut conv1 = gaussian(1.5);
    conv1.extend((0..KERNEL * KERNEL).map(|i| if i == centre { 1.0 } else { 0.0 }));
    p.insert("conv1.weight".into(), Tensor::new([2, 1, KERNEL, KERNEL], conv1).map_err(js_err)?);
    p.insert("conv2.weight".into(), Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).map_err(js_err)?);
    let mut conv3 = vec![0.0; 2 * KERNEL * KERNEL];
    conv3[centre] = 1.0;
    conv3[KERNEL * KERNEL + centre] = -1.0;
    p.insert("conv3.weight".into(), Tensor::new([1, 2, KERNEL, KERNEL], conv3).map_err(js_err)?);
    Ok((sharp, smooth))
}

/// Interpolate the two denoisers with `alpha_fg` inside a disc of `radius`
/// (fraction of the image size) at the centre and `alpha_bg` outside, then
/// blend the outputs under the soft disc mask. α = 1 is the identity network.
#[wasm_bindgen]
pub fn dni_blend(input: &[f32], size: usize, alpha_fg: f64, alpha_bg: f64, radius: f64) -> Result<Vec<f32>, JsError> {
    let (sharp, smooth) = endpoints()?;
    let c = (size as f64 - 1.0) / 2.0;
    let r = radius * size as f64;
    let mask = Image::from_fn(size, size, 1, |y, x, _| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        (r + 1.0 - d).clamp(0.0, 1.0) as f32
    });
    let out = spatial_blend(&sharp, &smooth, alpha_fg, alpha_bg, &mask, &image(input, size)?).map_err(js_err)?;
    Ok(out.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_identity_and_blur() {
        let face = toy_face(32, 5).unwrap();
        let same = dni_blend(&face, 32, 1.0, 1.0, 0.3).unwrap();
        let max = face.iter().zip(&same).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max < 1e-6, "{max}");
        let blurred = dni_blend(&face, 32, 0.0, 0.0, 0.3).unwrap();
        assert!(quality(&face, &blurred, 32).unwrap()[0] < 40.0);
    }

    #[test]
    fn degrade_reports_finite_quality() {
        let face = toy_face(32, 1).unwrap();
        let d = degrade(&face, 32, 2.0, 4, 10.0, 50, 3).unwrap();
        let q = quality(&face, &d, 32).unwrap();
        assert!(q[0].is_finite() && q[0] > 5.0 && q[1] < 1.0);
    }
}
