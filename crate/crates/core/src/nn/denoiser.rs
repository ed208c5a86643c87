use serde::{Deserialize, Serialize};

use super::{Bound, Init};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model_io::Params;
use crate::tensor::Float;

/// Three-layer denoiser: feature extraction (`conv1`, k×k), a 1×1 mapping
/// (`conv2`) and reconstruction (`conv3`, k×k), with a global residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub kernel: usize,
    pub width1: usize,
    pub width2: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { channels: 1, kernel: 9, width1: 32, width2: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

impl Denoiser {
    pub const ARCH: &'static str = "denoiser";
    pub const LAYERS: [&'static str; 3] = ["conv1", "conv2", "conv3"];

    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.kernel.is_multiple_of(2) || [config.channels, config.width1, config.width2].contains(&0) {
            return Err(Error::Config(format!("invalid denoiser config {config:?}")));
        }
        Ok(Self { config })
    }

    pub fn init(&self, init: &mut Init) -> Params {
        let c = &self.config;
        let mut p = Params::new();
        let relu_gain = 2f64.sqrt();
        init.conv(&mut p, "conv1", c.width1, c.channels, c.kernel, relu_gain);
        init.conv(&mut p, "conv2", c.width2, c.width1, 1, relu_gain);
        init.conv(&mut p, "conv3", c.channels, c.width2, c.kernel, 0.1);
        p
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<Var> {
        let g = p.graph();
        let h = g.leaky_relu(p.conv("conv1", x, 1)?, 0.0);
        let h = g.leaky_relu(p.conv("conv2", h, 1)?, 0.0);
        let r = p.conv("conv3", h, 1)?;
        g.add(x, r)
    }

    /// Denoise a batch; outputs are clamped to `[0, 1]`.
    pub fn run(&self, params: &Params, inputs: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let g = Graph::<f32>::new();
            let mut b = Bound::new(&g);
            b.bind(params, false);
            let x = g.constant(Image::batch_to_tensor(chunk)?);
            let y = self.forward(&b, x)?;
            let v = g.value(y);
            for n in 0..chunk.len() {
                out.push(Image::from_tensor(&v, n)?.clamped());
            }
        }
        Ok(out)
    }
}
