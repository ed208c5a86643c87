use serde::{Deserialize, Serialize};

use super::{level_width, lrelu_gain, Bound, Init};
use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::tensor::Float;

/// Degradation-removal U-Net.
///
/// Level `l` runs at `image_size / 2^l` with `level_width(widths, l)`
/// channels; the encoder descends to level `depth`, the decoder climbs back
/// to level 0 and emits one spatial feature map and one image per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub latent_width: usize,
    /// Residual blocks after every down/up stage.
    pub res_blocks: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, image_size: 32, depth: 2, widths: vec![16, 32], latent_width: 64, res_blocks: 1 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.widths.is_empty() || self.widths.contains(&0) || self.latent_width == 0 {
            return Err(Error::Config(format!("invalid U-Net config {self:?}")));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        level_width(&self.widths, level)
    }

    /// Spatial size at `level`.
    pub fn size(&self, level: usize) -> usize {
        self.image_size >> level
    }
}

pub struct UNetOutput {
    pub latent: Var,
    /// Decoder features, coarsest first (levels `depth−1 … 0`).
    pub spatial: Vec<Var>,
    /// Image-space side outputs, same order as `spatial`.
    pub pyramid: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, init: &mut Init, p: &mut Params) {
        let c = &self.config;
        let gain = lrelu_gain();
        init.conv(p, "unet.conv_in", c.width(0), c.in_channels, 3, gain);
        for l in 1..=c.depth {
            init.conv(p, &format!("unet.down{l}"), c.width(l), c.width(l - 1), 3, gain);
            for j in 0..c.res_blocks {
                Self::init_res(init, p, &format!("unet.enc{l}.res{j}"), c.width(l));
            }
        }
        let flat = c.width(c.depth) * c.size(c.depth).pow(2);
        init.linear(p, "unet.latent", c.latent_width, flat, 1.0);
        for l in (0..c.depth).rev() {
            init.conv(p, &format!("unet.up{l}"), c.width(l), c.width(l + 1) + c.width(l), 3, gain);
            for j in 0..c.res_blocks {
                Self::init_res(init, p, &format!("unet.dec{l}.res{j}"), c.width(l));
            }
            init.conv(p, &format!("unet.head{l}"), c.in_channels, c.width(l), 1, 1.0);
        }
    }

    fn init_res(init: &mut Init, p: &mut Params, prefix: &str, width: usize) {
        init.conv(p, &format!("{prefix}.a"), width, width, 3, lrelu_gain());
        // small second conv keeps the block close to identity at start
        init.conv(p, &format!("{prefix}.b"), width, width, 3, 0.1);
    }

    fn res<T: Float>(p: &Bound<T>, prefix: &str, h: Var) -> Result<Var> {
        let a = p.conv(&format!("{prefix}.a"), h, 1)?;
        let b = p.conv(&format!("{prefix}.b"), p.lrelu(a), 1)?;
        p.graph().add(h, b)
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<UNetOutput> {
        let c = &self.config;
        let g = p.graph();
        let shape = g.shape(x);
        let [_, ch, h, w] = shape[..] else {
            return Err(shape_err!("U-Net input must be N×C×H×W, got {shape:?}"));
        };
        if h % (1 << c.depth) != 0 || w % (1 << c.depth) != 0 {
            return Err(shape_err!("U-Net input {h}×{w} not divisible by 2^{}", c.depth));
        }
        if ch != c.in_channels || h != c.image_size || w != c.image_size {
            return Err(shape_err!(
                "U-Net configured for {}×{s}×{s}, got {ch}×{h}×{w}",
                c.in_channels,
                s = c.image_size
            ));
        }
        let mut skips = Vec::with_capacity(c.depth + 1);
        let mut hcur = p.lrelu(p.conv("unet.conv_in", x, 1)?);
        skips.push(hcur);
        for l in 1..=c.depth {
            hcur = p.lrelu(p.conv(&format!("unet.down{l}"), hcur, 2)?);
            for j in 0..c.res_blocks {
                hcur = Self::res(p, &format!("unet.enc{l}.res{j}"), hcur)?;
            }
            skips.push(hcur);
        }
        let flat = g.flatten(hcur)?;
        let latent = p.linear("unet.latent", flat)?;

        let mut spatial = Vec::with_capacity(c.depth);
        let mut pyramid = Vec::with_capacity(c.depth);
        for l in (0..c.depth).rev() {
            let up = g.upsample_bilinear(hcur, 2)?;
            let cat = g.concat_channels(&[up, skips[l]])?;
            hcur = p.lrelu(p.conv(&format!("unet.up{l}"), cat, 1)?);
            for j in 0..c.res_blocks {
                hcur = Self::res(p, &format!("unet.dec{l}.res{j}"), hcur)?;
            }
            spatial.push(hcur);
            pyramid.push(p.conv(&format!("unet.head{l}"), hcur, 1)?);
        }
        Ok(UNetOutput { latent, spatial, pyramid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{gradcheck, DEFAULT_STEP};
    use crate::tensor::Tensor;

    #[test]
    fn toy_shapes() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let mut p = Params::new();
        net.init(&mut Init::new(1), &mut p);
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let x = g.constant(Tensor::full([2, 1, 32, 32], 0.5));
        let out = net.forward(&b, x).unwrap();
        assert_eq!(g.shape(out.latent), vec![2, 64]);
        let sizes: Vec<Vec<usize>> = out.spatial.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(sizes, vec![vec![2, 32, 16, 16], vec![2, 16, 32, 32]]);
        assert_eq!(g.shape(out.pyramid[0]), vec![2, 1, 16, 16]);
        assert_eq!(g.shape(out.pyramid[1]), vec![2, 1, 32, 32]);
        let bad = g.constant(Tensor::zeros([1, 1, 30, 30]));
        assert!(net.forward(&b, bad).is_err());
    }

    #[test]
    fn zero_heads_give_zero_pyramid() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let mut p = Params::new();
        net.init(&mut Init::new(2), &mut p);
        for (n, t) in p.iter_mut() {
            if n.starts_with("unet.head") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let x = g.constant(Tensor::from_fn([1, 1, 32, 32], |i| (i % 7) as f32 / 7.0));
        let out = net.forward(&b, x).unwrap();
        for v in out.pyramid {
            assert!(g.value(v).data().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn one_stage_gradcheck() {
        let cfg = UNetConfig { in_channels: 1, image_size: 4, depth: 1, widths: vec![2, 3], latent_width: 2, res_blocks: 1 };
        let net = UNet::new(cfg).unwrap();
        let mut p = Params::new();
        net.init(&mut Init::new(3), &mut p);
        let mut inputs: Vec<(String, Tensor<f64>)> = p.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        inputs.push(("x".into(), Tensor::from_fn([1, 1, 4, 4], |i| ((i * 7) % 5) as f64 * 0.2 - 0.3)));
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
        let report = gradcheck(
            |g, vars| {
                let mut b = Bound::new(g);
                b.bind_vars(&names, vars);
                let out = net.forward(&b, *vars.last().unwrap())?;
                let l = g.sum(g.exp(g.scale(out.latent, 0.3)));
                let s = g.sum(g.mul(out.pyramid[0], out.pyramid[0])?);
                let f = g.mean(g.mul(out.spatial[0], out.spatial[0])?);
                let t = g.add(l, s)?;
                g.add(t, f)
            },
            &inputs,
            DEFAULT_STEP,
            12,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report}");
    }
}
