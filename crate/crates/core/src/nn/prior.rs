use serde::{Deserialize, Serialize};

use super::{level_width, lrelu_gain, Bound, Init};
use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::tensor::Float;

/// Miniature generator standing in for a pretrained face GAN: a learned
/// constant at the coarsest level, then upsample + conv stages whose channels
/// are scaled and shifted by affine functions of the latent code `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub out_channels: usize,
    pub image_size: usize,
    /// Number of upsampling stages; the constant lives at `image_size / 2^depth`.
    pub depth: usize,
    pub widths: Vec<usize>,
    pub latent_width: usize,
    pub w_width: usize,
    pub mlp_layers: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { out_channels: 1, image_size: 32, depth: 2, widths: vec![16, 32], latent_width: 64, w_width: 64, mlp_layers: 2 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.widths.is_empty()
            || self.widths.contains(&0)
            || self.latent_width == 0
            || self.w_width == 0
            || self.mlp_layers == 0
        {
            return Err(Error::Config(format!("invalid prior config {self:?}")));
        }
        if !self.image_size.is_multiple_of(1 << self.depth) || self.image_size >> self.depth == 0 {
            return Err(Error::Config(format!("image size {} not divisible by 2^{}", self.image_size, self.depth)));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        level_width(&self.widths, level)
    }

    pub fn base_size(&self) -> usize {
        self.image_size >> self.depth
    }
}

#[derive(Clone, Debug)]
pub struct PriorGenerator {
    pub config: PriorConfig,
}

impl PriorGenerator {
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, init: &mut Init, p: &mut Params) {
        let c = &self.config;
        for i in 0..c.mlp_layers {
            let inp = if i == 0 { c.latent_width } else { c.w_width };
            let gain = if i + 1 == c.mlp_layers { 1.0 } else { lrelu_gain() };
            init.linear(p, &format!("prior.mlp{i}"), c.w_width, inp, gain);
        }
        let top = c.width(c.depth);
        init.tensor(p, "prior.const", vec![1, top, c.base_size(), c.base_size()], 1.0);
        self.init_stage(init, p, "prior.base", top, top);
        for l in (0..c.depth).rev() {
            self.init_stage(init, p, &format!("prior.up{l}"), c.width(l + 1), c.width(l));
        }
        init.conv(p, "prior.to_img", c.out_channels, c.width(0), 1, 1.0);
    }

    fn init_stage(&self, init: &mut Init, p: &mut Params, prefix: &str, cin: usize, cout: usize) {
        init.conv(p, &format!("{prefix}.conv"), cout, cin, 3, lrelu_gain());
        init.linear(p, &format!("{prefix}.scale"), cout, self.config.w_width, 0.25);
        init.linear(p, &format!("{prefix}.shift"), cout, self.config.w_width, 0.25);
    }

    /// `W = MLP(F_latent)`.
    pub fn map_latent<T: Float>(&self, p: &Bound<T>, latent: Var) -> Result<Var> {
        let c = &self.config;
        let shape = p.graph().shape(latent);
        if shape.len() != 2 || shape[1] != c.latent_width {
            return Err(shape_err!("latent code {shape:?}, mapping expects N×{}", c.latent_width));
        }
        let mut h = latent;
        for i in 0..c.mlp_layers {
            h = p.linear(&format!("prior.mlp{i}"), h)?;
            if i + 1 < c.mlp_layers {
                h = p.lrelu(h);
            }
        }
        Ok(h)
    }

    fn modulate<T: Float>(&self, p: &Bound<T>, prefix: &str, h: Var, w: Var) -> Result<Var> {
        let g = p.graph();
        let h = p.conv(&format!("{prefix}.conv"), h, 1)?;
        let scale = g.add_scalar(p.linear(&format!("{prefix}.scale"), w)?, 1.0);
        let shift = p.linear(&format!("{prefix}.shift"), w)?;
        Ok(p.lrelu(g.channel_affine(h, scale, shift)?))
    }

    /// Features at the constant's level (`depth`), before any upsampling.
    pub fn base<T: Float>(&self, p: &Bound<T>, w: Var) -> Result<Var> {
        let n = p.graph().shape(w)[0];
        let c = p.graph().repeat_batch(p.get("prior.const")?, n)?;
        self.modulate(p, "prior.base", c, w)
    }

    /// One generator stage producing `F_GAN` at `level` from the features one level up.
    pub fn stage<T: Float>(&self, p: &Bound<T>, level: usize, h: Var, w: Var) -> Result<Var> {
        if level >= self.config.depth {
            return Err(shape_err!("prior has stages for levels 0..{}, got {level}", self.config.depth));
        }
        let up = p.graph().upsample_bilinear(h, 2)?;
        self.modulate(p, &format!("prior.up{level}"), up, w)
    }

    pub fn to_img<T: Float>(&self, p: &Bound<T>, h: Var) -> Result<Var> {
        p.conv("prior.to_img", h, 1)
    }

    /// Unmodulated prior features per level, coarsest first.
    pub fn prior_features<T: Float>(&self, p: &Bound<T>, w: Var) -> Result<Vec<Var>> {
        let mut h = self.base(p, w)?;
        let mut out = Vec::with_capacity(self.config.depth);
        for l in (0..self.config.depth).rev() {
            h = self.stage(p, l, h, w)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Image synthesized from a latent code.
    pub fn generate<T: Float>(&self, p: &Bound<T>, latent: Var) -> Result<Var> {
        let w = self.map_latent(p, latent)?;
        let feats = self.prior_features(p, w)?;
        self.to_img(p, *feats.last().unwrap())
    }
}

/// Encoder used only to pretrain the prior as an autoencoder decoder.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    pub config: PriorConfig,
}

impl LatentEncoder {
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, init: &mut Init, p: &mut Params) {
        let c = &self.config;
        init.conv(p, "penc.conv_in", c.width(0), c.out_channels, 3, lrelu_gain());
        for l in 1..=c.depth {
            init.conv(p, &format!("penc.down{l}"), c.width(l), c.width(l - 1), 3, lrelu_gain());
        }
        let flat = c.width(c.depth) * c.base_size().pow(2);
        init.linear(p, "penc.fc", c.latent_width, flat, 1.0);
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<Var> {
        let mut h = p.lrelu(p.conv("penc.conv_in", x, 1)?);
        for l in 1..=self.config.depth {
            h = p.lrelu(p.conv(&format!("penc.down{l}"), h, 2)?);
        }
        let flat = p.graph().flatten(h)?;
        p.linear("penc.fc", flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn setup(cfg: PriorConfig, seed: u64) -> (PriorGenerator, Params) {
        let gen = PriorGenerator::new(cfg).unwrap();
        let mut p = Params::new();
        gen.init(&mut Init::new(seed), &mut p);
        (gen, p)
    }

    #[test]
    fn identity_and_constant_mlp() {
        let cfg = PriorConfig { latent_width: 3, w_width: 3, mlp_layers: 1, ..Default::default() };
        let (gen, mut p) = setup(cfg, 1);
        p.insert("prior.mlp0.weight".into(), Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let g = Graph::<f64>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let z = g.constant(Tensor::new([2, 3], vec![0.1, -2.0, 3.5, 7.0, 0.0, -0.25]).unwrap());
        let w = gen.map_latent(&b, z).unwrap();
        assert_eq!(*g.value(w), *g.value(z));

        p.insert("prior.mlp0.weight".into(), Tensor::zeros([3, 3]));
        p.insert("prior.mlp0.bias".into(), Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = Graph::<f64>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let z = g.constant(Tensor::from_fn([2, 3], |i| i as f64 * 9.0 - 4.0));
        let w = gen.map_latent(&b, z).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let bad = g.constant(Tensor::zeros([1, 4]));
        assert!(gen.map_latent(&b, bad).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_loop_oracle() {
        let cfg = PriorConfig { latent_width: 5, w_width: 4, mlp_layers: 2, ..Default::default() };
        let (gen, p) = setup(cfg, 4);
        let z: Vec<f64> = (0..5).map(|i| (i as f64 - 2.0) * 0.7).collect();
        let g = Graph::<f64>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let zv = g.constant(Tensor::new([1, 5], z.clone()).unwrap());
        let w = gen.map_latent(&b, zv).unwrap();
        let layer = |name: &str, x: &[f64]| -> Vec<f64> {
            let wt = &p[&format!("{name}.weight")];
            let bias = &p[&format!("{name}.bias")];
            let (o, i) = (wt.shape()[0], wt.shape()[1]);
            (0..o).map(|r| bias.data()[r] as f64 + (0..i).map(|c| wt.data()[r * i + c] as f64 * x[c]).sum::<f64>()).collect()
        };
        let h: Vec<f64> = layer("prior.mlp0", &z).into_iter().map(|v| if v > 0.0 { v } else { 0.2 * v }).collect();
        let expect = layer("prior.mlp1", &h);
        for (a, e) in g.value(w).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_scales_and_determinism() {
        let (gen, p) = setup(PriorConfig::default(), 5);
        let run = || {
            let g = Graph::<f32>::new();
            let mut b = Bound::new(&g);
            b.bind(&p, false);
            let w = g.constant(Tensor::from_fn([2, 64], |i| ((i * 13) % 11) as f32 / 11.0 - 0.5));
            let feats = gen.prior_features(&b, w).unwrap();
            feats.iter().map(|&f| g.value(f).clone()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a[0].shape(), &[2, 32, 16, 16]);
        assert_eq!(a[1].shape(), &[2, 16, 32, 32]);
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, false);
        let w = g.constant(Tensor::zeros([1, 64]));
        let h = gen.base(&b, w).unwrap();
        assert!(gen.stage(&b, 2, h, w).is_err());
    }

    #[test]
    fn every_scale_depends_on_w() {
        let (gen, p) = setup(PriorConfig::default(), 6);
        let w0 = Tensor::<f64>::from_fn([1, 64], |i| (i as f64 * 0.37).sin());
        let dir = Tensor::<f64>::from_fn([1, 64], |i| (i as f64 * 1.3).cos());
        let eval = |eps: f64| {
            let g = Graph::<f64>::new();
            let mut b = Bound::new(&g);
            b.bind(&p, false);
            let w = g.constant(Tensor::from_fn([1, 64], |i| w0.data()[i] + eps * dir.data()[i]));
            let f = gen.prior_features(&b, w).unwrap();
            f.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (plus, minus) = (eval(1e-4), eval(-1e-4));
        for (a, b) in plus.iter().zip(&minus) {
            let jvp: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) / 2e-4).abs()).sum();
            assert!(jvp > 1e-3, "{jvp}");
        }
    }

    #[test]
    fn autoencoder_shapes() {
        let cfg = PriorConfig::default();
        let enc = LatentEncoder::new(cfg.clone()).unwrap();
        let (gen, mut p) = setup(cfg, 7);
        enc.init(&mut Init::new(8), &mut p);
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, true);
        let x = g.constant(Tensor::full([3, 1, 32, 32], 0.3));
        let z = enc.forward(&b, x).unwrap();
        assert_eq!(g.shape(z), vec![3, 64]);
        let y = gen.generate(&b, z).unwrap();
        assert_eq!(g.shape(y), vec![3, 1, 32, 32]);
    }
}
