use serde::{Deserialize, Serialize};

use super::{Bound, CsSft, Init, PriorConfig, PriorGenerator, UNet, UNetConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model_io::Params;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerConfig {
    pub unet: UNetConfig,
    pub prior: PriorConfig,
    /// CS-SFT split fraction per decoder scale, coarsest first. A single
    /// value applies to every scale.
    pub rho: Vec<f64>,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self { unet: UNetConfig::default(), prior: PriorConfig::default(), rho: vec![0.5] }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.prior.validate()?;
        let (u, p) = (&self.unet, &self.prior);
        if u.depth != p.depth || u.image_size != p.image_size || u.in_channels != p.out_channels {
            return Err(Error::Config(format!(
                "prior scales ({}×{} over {} stages) do not match the U-Net ({}×{} over {} stages)",
                p.out_channels, p.image_size, p.depth, u.in_channels, u.image_size, u.depth
            )));
        }
        if u.latent_width != p.latent_width {
            return Err(Error::Config(format!(
                "U-Net latent width {} differs from the prior mapping input {}",
                u.latent_width, p.latent_width
            )));
        }
        if self.rho.len() != 1 && self.rho.len() != u.depth {
            return Err(Error::Config(format!("rho needs 1 or {} entries, got {}", u.depth, self.rho.len())));
        }
        Ok(())
    }

    /// ρ for the `i`-th decoder scale (coarsest first).
    pub fn rho_at(&self, i: usize) -> f64 {
        self.rho[i.min(self.rho.len() - 1)]
    }
}

pub struct RestoreOutput {
    pub image: Var,
    pub pyramid: Vec<Var>,
    pub latent: Var,
    pub w: Var,
    /// Modulated prior features per scale, coarsest first.
    pub features: Vec<Var>,
}

/// U-Net + frozen prior generator + CS-SFT stack.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: RestorerConfig,
    pub unet: UNet,
    pub prior: PriorGenerator,
    /// Coarsest first, matching the U-Net's spatial outputs.
    pub sft: Vec<CsSft>,
}

impl Restorer {
    pub fn new(config: RestorerConfig) -> Result<Self> {
        config.validate()?;
        let unet = UNet::new(config.unet.clone())?;
        let prior = PriorGenerator::new(config.prior.clone())?;
        let sft = (0..config.unet.depth)
            .rev()
            .enumerate()
            .map(|(i, l)| CsSft::new(format!("sft{l}"), config.prior.width(l), config.unet.width(l), config.rho_at(i)))
            .collect::<Result<_>>()?;
        Ok(Self { config, unet, prior, sft })
    }

    /// Initialize the trainable part (U-Net and CS-SFT convs).
    pub fn init_trainable(&self, init: &mut Init, p: &mut Params) {
        self.unet.init(init, p);
        for layer in &self.sft {
            layer.init(init, p);
        }
    }

    pub fn is_prior_param(name: &str) -> bool {
        name.starts_with("prior.")
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<RestoreOutput> {
        let u = self.unet.forward(p, x)?;
        let w = self.prior.map_latent(p, u.latent)?;
        let mut h = self.prior.base(p, w)?;
        let mut features = Vec::with_capacity(self.sft.len());
        for (i, l) in (0..self.config.unet.depth).rev().enumerate() {
            let f = self.prior.stage(p, l, h, w)?;
            h = self.sft[i].forward(p, f, u.spatial[i])?;
            features.push(h);
        }
        let image = self.prior.to_img(p, h)?;
        Ok(RestoreOutput { image, pyramid: u.pyramid, latent: u.latent, w, features })
    }

    /// Restore a batch of images; outputs are clamped to `[0, 1]`.
    pub fn restore(&self, params: &Params, inputs: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let g = Graph::<f32>::new();
            let mut b = Bound::new(&g);
            b.bind(params, false);
            let x = g.constant(Image::batch_to_tensor(chunk)?);
            let y = self.forward(&b, x)?.image;
            let v = g.value(y);
            for n in 0..chunk.len() {
                out.push(Image::from_tensor(&v, n)?.clamped());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(r: &Restorer, seed: u64) -> Params {
        let mut p = Params::new();
        r.prior.init(&mut Init::new(seed), &mut p);
        r.init_trainable(&mut Init::new(seed + 1), &mut p);
        p
    }

    #[test]
    fn shape_table() {
        let r = Restorer::new(RestorerConfig::default()).unwrap();
        let p = params(&r, 1);
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let x = g.constant(Tensor::full([2, 1, 32, 32], 0.4));
        let out = r.forward(&b, x).unwrap();
        assert_eq!(g.shape(out.image), vec![2, 1, 32, 32]);
        assert_eq!(g.shape(out.latent), vec![2, 64]);
        assert_eq!(g.shape(out.w), vec![2, 64]);
        assert_eq!(g.shape(out.features[0]), vec![2, 32, 16, 16]);
        assert_eq!(g.shape(out.features[1]), vec![2, 16, 32, 32]);
        assert_eq!(r.sft[0].split(), 16);
        assert_eq!(r.sft[1].split(), 8);
    }

    #[test]
    fn deterministic_restore() {
        let r = Restorer::new(RestorerConfig::default()).unwrap();
        let p = params(&r, 3);
        let img = Image::from_fn(32, 32, 1, |y, x, _| ((x + y) % 9) as f32 / 9.0);
        let a = r.restore(&p, std::slice::from_ref(&img)).unwrap();
        let b = r.restore(&params(&r, 3), &[img]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let mut cfg = RestorerConfig::default();
        cfg.prior.depth = 3;
        assert!(Restorer::new(cfg).is_err());
        let cfg = RestorerConfig { rho: vec![0.5, 0.5, 0.5], ..Default::default() };
        assert!(Restorer::new(cfg).is_err());
        let cfg = RestorerConfig { rho: vec![0.0], ..Default::default() };
        assert!(Restorer::new(cfg).is_err());
    }
}
