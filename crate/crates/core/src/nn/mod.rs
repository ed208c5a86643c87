//! Network building blocks and the toy restoration architecture.
//!
//! Parameters live in plain name → tensor maps ([`Params`]) so that they can
//! be serialized, interpolated and optimized without any model object. A
//! forward pass binds them into a [`Graph`] through [`Bound`].

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::degradation::BoxMuller;
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::resample::{AxisPlan, ResamplePlan};
use crate::tensor::{Float, Tensor};
use crate::toyface::{BoxRect, ComponentBoxes};

mod cssft;
mod denoiser;
mod disc;
mod prior;
mod restorer;
mod unet;

pub use cssft::{cs_sft, split_index, CsSft};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use disc::{ComponentDiscriminators, Discriminator, DiscriminatorConfig};
pub use prior::{LatentEncoder, PriorConfig, PriorGenerator};
pub use restorer::{RestoreOutput, Restorer, RestorerConfig};
pub use unet::{UNet, UNetConfig, UNetOutput};

/// Slope of every leaky ReLU in the networks.
pub const LRELU_SLOPE: f64 = 0.2;

/// Parameters bound into a graph, addressable by name.
pub struct Bound<'g, T: Float> {
    graph: &'g Graph<T>,
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn new(graph: &'g Graph<T>) -> Self {
        Self { graph, vars: BTreeMap::new(), trainable: Vec::new() }
    }

    /// Add `params` as leaves; trainable ones receive gradients.
    pub fn bind(&mut self, params: &Params, trainable: bool) -> &mut Self {
        for (name, t) in params {
            let v = self.graph.leaf(t.cast(), trainable);
            if trainable {
                self.trainable.push(name.clone());
            }
            self.vars.insert(name.clone(), v);
        }
        self
    }

    /// Bind existing graph variables, e.g. the inputs of a gradient check.
    pub fn bind_vars(&mut self, names: &[String], vars: &[Var]) -> &mut Self {
        for (n, &v) in names.iter().zip(vars) {
            self.vars.insert(n.clone(), v);
        }
        self
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Missing(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every trainable parameter, zero where none flowed.
    pub fn grads(&self) -> Params {
        self.trainable
            .iter()
            .map(|n| {
                let v = self.vars[n];
                let g = self.graph.grad(v).map(|g| g.cast()).unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
                (n.clone(), g)
            })
            .collect()
    }

    /// Convolution `{prefix}.weight` (+ optional `{prefix}.bias`) with "same" padding.
    pub fn conv(&self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.vars.get(&format!("{prefix}.bias")).copied();
        let k = self.graph.shape(w)[2];
        self.graph.conv2d(x, w, b, stride, k / 2)
    }

    pub fn linear(&self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.vars.get(&format!("{prefix}.bias")).copied();
        self.graph.linear(x, w, b)
    }

    pub fn lrelu(&self, x: Var) -> Var {
        self.graph.leaky_relu(x, LRELU_SLOPE)
    }
}

/// Seeded He-style initializer.
pub struct Init {
    gauss: BoxMuller<ChaCha8Rng>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { gauss: BoxMuller::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| (self.gauss.sample() * std) as f32)
    }

    /// Conv weight with std `gain/√fan_in` and a zero bias.
    pub fn conv(&mut self, p: &mut Params, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
        let std = gain / ((cin * k * k) as f64).sqrt();
        p.insert(format!("{name}.weight"), self.normal(vec![cout, cin, k, k], std));
        p.insert(format!("{name}.bias"), Tensor::zeros([cout]));
    }

    pub fn linear(&mut self, p: &mut Params, name: &str, out: usize, inp: usize, gain: f64) {
        let std = gain / (inp as f64).sqrt();
        p.insert(format!("{name}.weight"), self.normal(vec![out, inp], std));
        p.insert(format!("{name}.bias"), Tensor::zeros([out]));
    }

    pub fn tensor(&mut self, p: &mut Params, name: &str, shape: Vec<usize>, std: f64) {
        p.insert(name.to_string(), self.normal(shape, std));
    }
}

/// Gain for layers followed by a leaky ReLU.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt()
}

/// Width of level `l` when a width list is shorter than the level count.
pub fn level_width(widths: &[usize], l: usize) -> usize {
    widths[l.min(widths.len() - 1)]
}

/// Parameters whose name starts with `prefix`.
pub fn subset(params: &Params, prefix: &str) -> Params {
    params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(n, t)| (n.clone(), t.clone())).collect()
}

/// Plain spatial feature transform `α ⊙ F + β`.
pub fn sft<T: Float>(g: &Graph<T>, f: Var, alpha: Var, beta: Var) -> Result<Var> {
    let (sf, sa, sb) = (g.shape(f), g.shape(alpha), g.shape(beta));
    if sf != sa || sf != sb {
        return Err(shape_err!("sft: F {sf:?}, α {sa:?}, β {sb:?}"));
    }
    let m = g.mul(alpha, f)?;
    g.add(m, beta)
}

/// Resampling plan for one box of an `h×w` image onto `out×out`.
pub fn box_plan(b: &BoxRect, h: usize, w: usize, out: usize) -> Result<ResamplePlan> {
    if b.area() <= 0.0 {
        return Err(Error::InvalidArgument(format!("degenerate component box {b:?}")));
    }
    Ok(ResamplePlan::new(AxisPlan::crop(h, b.y0, b.y1, out)?, AxisPlan::crop(w, b.x0, b.x1, out)?))
}

/// Crop the left eye, right eye and mouth of every batch item (one box set per
/// item) with bilinear ROI sampling onto `out_size × out_size`.
pub fn crop_components<T: Float>(
    g: &Graph<T>,
    x: Var,
    boxes: &[ComponentBoxes],
    out_size: usize,
) -> Result<[Var; 3]> {
    let shape = g.shape(x);
    let [n, _, h, w] = shape[..] else {
        return Err(shape_err!("crop_components expects N×C×H×W, got {shape:?}"));
    };
    if boxes.len() != n {
        return Err(shape_err!("{} box sets for a batch of {n}", boxes.len()));
    }
    if out_size < 4 {
        return Err(Error::InvalidArgument(format!("component patch size {out_size} below 4")));
    }
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        let plans = boxes
            .iter()
            .map(|b| {
                b.validate()?;
                box_plan(&b.as_array()[k], h, w, out_size)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(g.resample(x, Rc::new(plans))?);
    }
    Ok([out[0], out[1], out[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sft_hand_case() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let b = g.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let y = sft(&g, f, a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 4.5, 6.5, 8.5]);
        let one = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let zero = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let id = sft(&g, f, one, zero).unwrap();
        assert_eq!(*g.value(id), *g.value(f));
        let zero_a = sft(&g, f, zero, b).unwrap();
        assert_eq!(*g.value(zero_a), *g.value(b));
        let bad = g.constant(Tensor::zeros([1, 1, 2, 1]));
        assert!(sft(&g, f, bad, b).is_err());
    }

    fn gradient_image(n: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 1, n, n], |i| (i / n) as f64 * 0.1 + (i % n) as f64 * 0.01)
    }

    #[test]
    fn full_box_crop_is_identity() {
        let g = Graph::<f64>::new();
        let t = gradient_image(8);
        let x = g.constant(t.clone());
        let full = ComponentBoxes { left_eye: BoxRect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 }, right_eye: BoxRect { x0: 0.5, y0: 0.0, x1: 1.0, y1: 1.0 }, mouth: BoxRect::full() };
        let [_, _, m] = crop_components(&g, x, &[full], 8).unwrap();
        assert_eq!(*g.value(m), t);
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 1, 16, 16], 0.25));
        for p in crop_components(&g, x, &[ComponentBoxes::canonical(); 2], 8).unwrap() {
            assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn half_box_matches_direct_bilinear_oracle() {
        let n = 16;
        let t = gradient_image(n);
        let g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let boxes = ComponentBoxes {
            left_eye: BoxRect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 },
            right_eye: BoxRect { x0: 0.5, y0: 0.0, x1: 1.0, y1: 1.0 },
            mouth: BoxRect { x0: 0.0, y0: 0.5, x1: 1.0, y1: 1.0 },
        };
        let [le, ..] = crop_components(&g, x, &[boxes], 8).unwrap();
        let out = g.value(le).clone();
        // direct ROI-align with one bilinear sample per bin
        let sample = |sy: f64, sx: f64| {
            let (sy, sx) = (sy.clamp(0.0, (n - 1) as f64), sx.clamp(0.0, (n - 1) as f64));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |y: usize, x: usize| t.data()[y * n + x];
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
        };
        for oy in 0..8 {
            for ox in 0..8 {
                let sy = (oy as f64 + 0.5) * (n as f64 / 8.0) - 0.5;
                let sx = (ox as f64 + 0.5) * (n as f64 * 0.5 / 8.0) - 0.5;
                assert!((out.data()[oy * 8 + ox] - sample(sy, sx)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 16, 16]));
        let mut b = ComponentBoxes::canonical();
        b.mouth.x1 = b.mouth.x0;
        assert!(crop_components(&g, x, &[b], 8).is_err());
        assert!(crop_components(&g, x, &[ComponentBoxes::canonical()], 3).is_err());
    }
}
