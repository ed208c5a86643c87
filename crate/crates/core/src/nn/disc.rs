use serde::{Deserialize, Serialize};

use super::{lrelu_gain, Bound, Init};
use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::tensor::Float;
use crate::toyface::ComponentBoxes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn global(in_channels: usize, image_size: usize) -> Self {
        Self { in_channels, input_size: image_size, widths: vec![16, 32, 32], strides: vec![2, 2, 2] }
    }

    pub fn component(in_channels: usize, patch_size: usize) -> Self {
        Self { in_channels, input_size: patch_size, widths: vec![16, 32], strides: vec![1, 2] }
    }

    fn output_size(&self) -> Result<usize> {
        let mut s = self.input_size;
        for &st in &self.strides {
            if st == 0 || s == 0 {
                return Err(Error::Config(format!("invalid discriminator config {self:?}")));
            }
            s = (s - 1) / st + 1;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        self.output_size().map(|_| ())
    }
}

/// Strided conv stack ending in one logit per item. The post-activation
/// output of every conv is exposed as the feature list `ψ`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub prefix: String,
    pub config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(prefix: impl Into<String>, config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { prefix: prefix.into(), config })
    }

    pub fn init(&self, init: &mut Init, p: &mut Params) {
        let c = &self.config;
        let mut cin = c.in_channels;
        for (i, &w) in c.widths.iter().enumerate() {
            init.conv(p, &format!("{}.conv{i}", self.prefix), w, cin, 3, lrelu_gain());
            cin = w;
        }
        let s = c.output_size().expect("validated");
        init.linear(p, &format!("{}.fc", self.prefix), 1, cin * s * s, 1.0);
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let g = p.graph();
        let shape = g.shape(x);
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(shape_err!(
                "{}: expects N×{}×{s}×{s}, got {shape:?}",
                self.prefix,
                c.in_channels,
                s = c.input_size
            ));
        }
        let mut h = x;
        let mut feats = Vec::with_capacity(c.widths.len());
        for (i, &st) in c.strides.iter().enumerate() {
            h = p.lrelu(p.conv(&format!("{}.conv{i}", self.prefix), h, st)?);
            feats.push(h);
        }
        let flat = g.flatten(h)?;
        Ok((p.linear(&format!("{}.fc", self.prefix), flat)?, feats))
    }
}

/// One discriminator per facial component, in [`ComponentBoxes::NAMES`] order.
#[derive(Clone, Debug)]
pub struct ComponentDiscriminators {
    pub patch_size: usize,
    pub discs: Vec<Discriminator>,
}

impl ComponentDiscriminators {
    pub fn new(in_channels: usize, patch_size: usize) -> Result<Self> {
        let discs = ComponentBoxes::NAMES
            .iter()
            .map(|n| Discriminator::new(format!("dcomp.{n}"), DiscriminatorConfig::component(in_channels, patch_size)))
            .collect::<Result<_>>()?;
        Ok(Self { patch_size, discs })
    }

    pub fn init(&self, init: &mut Init, p: &mut Params) {
        for d in &self.discs {
            d.init(init, p);
        }
    }

    pub fn get(&self, k: usize) -> Result<&Discriminator> {
        self.discs.get(k).ok_or_else(|| Error::Missing(format!("component discriminator {k}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn shapes_and_features() {
        let d = Discriminator::new("d.global", DiscriminatorConfig::global(1, 32)).unwrap();
        let mut p = Params::new();
        d.init(&mut Init::new(1), &mut p);
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&p, true);
        let x = g.constant(Tensor::full([3, 1, 32, 32], 0.5));
        let (logit, feats) = d.forward(&b, x).unwrap();
        assert_eq!(g.shape(logit), vec![3, 1]);
        let sizes: Vec<usize> = feats.iter().map(|&f| g.shape(f)[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        let wrong = g.constant(Tensor::full([1, 1, 16, 16], 0.5));
        assert!(d.forward(&b, wrong).is_err());

        let comps = ComponentDiscriminators::new(1, 8).unwrap();
        comps.init(&mut Init::new(2), &mut p);
        assert!(p.contains_key("dcomp.mouth.fc.weight"));
        assert!(comps.get(3).is_err());
    }
}
