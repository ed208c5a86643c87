//! Finite-difference checks of every differentiable op, layer and loss.
//!
//! Each case builds a small 64-bit instance, reduces its output to a scalar
//! through a fixed random readout and compares analytic gradients for every
//! input and parameter against central differences.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradReport, DEFAULT_STEP};
use crate::losses::{self, FrozenExtractor, LossWeights, Term};
use crate::model_io::Params;
use crate::nn::{
    cs_sft, sft, Bound, ComponentDiscriminators, CsSft, Denoiser, DenoiserConfig, Discriminator, DiscriminatorConfig,
    Init, PriorConfig, PriorGenerator, Restorer, RestorerConfig, UNet, UNetConfig,
};
use crate::resample::{AxisPlan, ResamplePlan};
use crate::tensor::Tensor;
use crate::toyface::{BoxRect, ComponentBoxes};

/// Tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

const PROBES: usize = 8;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: &'static str,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

type Inputs = Vec<(String, Tensor<f64>)>;

struct Case {
    module: &'static str,
    name: &'static str,
    run: fn() -> Result<GradReport>,
}

pub const MODULES: [&str; 3] = ["autograd", "nn", "losses"];

fn cases() -> Vec<Case> {
    macro_rules! case {
        ($m:literal, $n:literal, $f:expr) => {
            Case { module: $m, name: $n, run: $f }
        };
    }
    vec![
        case!("autograd", "elementwise", elementwise),
        case!("autograd", "conv2d_stride1", || conv_case(1, 1)),
        case!("autograd", "conv2d_stride2", || conv_case(2, 1)),
        case!("autograd", "linear", linear_case),
        case!("autograd", "resample", resample_case),
        case!("autograd", "concat_slice", concat_slice),
        case!("autograd", "channel_affine", channel_affine),
        case!("autograd", "gram", gram_case),
        case!("autograd", "pool_normalize", pool_normalize),
        case!("autograd", "repeat_batch", repeat_batch),
        case!("nn", "unet", unet_case),
        case!("nn", "prior_generator", prior_case),
        case!("nn", "sft", sft_case),
        case!("nn", "cs_sft", cs_sft_case),
        case!("nn", "discriminator", disc_case),
        case!("nn", "crop_components", crop_case),
        case!("nn", "restorer", restorer_case),
        case!("nn", "denoiser", denoiser_case),
        case!("losses", "reconstruction", reconstruction_case),
        case!("losses", "adversarial_g", adversarial_g_case),
        case!("losses", "adversarial_d", adversarial_d_case),
        case!("losses", "component", component_case),
        case!("losses", "component_d", component_d_case),
        case!("losses", "identity", identity_case),
        case!("losses", "pyramid", pyramid_case),
        case!("losses", "total", total_case),
    ]
}

/// Run every case, or only those of one module (`autograd`, `nn`, `losses`).
pub fn run(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::InvalidArgument(format!("unknown module `{m}`; expected one of {MODULES:?}")));
        }
    }
    cases()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .map(|c| Ok(SuiteEntry { module: c.module, name: c.name, report: (c.run)()? }))
        .collect()
}

// ------------------------------------------------------------------ helpers

fn randn(shape: impl Into<Vec<usize>>, seed: u64, std: f64) -> Tensor<f64> {
    let mut p = Params::new();
    Init::new(seed).tensor(&mut p, "t", shape.into(), std);
    p.remove("t").unwrap().cast()
}

/// Scalar `Σ v ⊙ R` with a fixed random `R`.
fn readout(g: &Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.shape(v), seed, 1.0));
    Ok(g.sum(g.mul(v, r)?))
}

/// Parameters as gradcheck inputs. Zero-initialized biases are replaced by
/// random values so that no pre-activation sits exactly on a ReLU kink.
fn with_params(params: &Params, extra: Inputs) -> (Inputs, Vec<String>) {
    let mut inputs: Inputs = params
        .iter()
        .enumerate()
        .map(|(i, (n, t))| {
            let t: Tensor<f64> = t.cast();
            let t = if n.ends_with(".bias") && t.data().iter().all(|&v| v == 0.0) {
                randn(t.shape().to_vec(), 1000 + i as u64, 0.3)
            } else {
                t
            };
            (n.clone(), t)
        })
        .collect();
    inputs.extend(extra);
    let names = inputs.iter().map(|(n, _)| n.clone()).collect();
    (inputs, names)
}

fn check(inputs: &Inputs, f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    gradcheck(f, inputs, DEFAULT_STEP, PROBES)
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

// ------------------------------------------------------------------ autograd ops

fn elementwise() -> Result<GradReport> {
    let x = randn([2, 3, 2, 2], 1, 1.0);
    let y = randn([2, 3, 2, 2], 2, 1.0);
    // keep |x| away from the kinks of abs / leaky ReLU
    let x = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let s = Tensor::scalar(0.7);
    check(&vec![named("x", x), named("y", y), named("s", s)], |g, v| {
        let (x, y, s) = (v[0], v[1], v[2]);
        let a = g.mul(x, y)?;
        let a = g.add(a, g.sub(x, y)?)?;
        let a = g.add(a, g.mul(x, s)?)?;
        let b = g.leaky_relu(x, 0.2);
        let c = g.add(g.sigmoid(y), g.softplus(g.scale(x, 1.5)))?;
        let d = g.log(g.add_scalar(g.exp(g.neg(y)), 0.5));
        let e = g.abs(x);
        let all = g.add(g.add(a, b)?, g.add(g.add(c, d)?, e)?)?;
        let m = g.mean(all);
        g.add(readout(g, all, 3)?, m)
    })
}

fn conv_case(stride: usize, padding: usize) -> Result<GradReport> {
    let inputs = vec![
        named("x", randn([2, 2, 5, 5], 4, 1.0)),
        named("w", randn([3, 2, 3, 3], 5, 0.5)),
        named("b", randn([3], 6, 0.5)),
    ];
    check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
        readout(g, y, 7)
    })
}

fn linear_case() -> Result<GradReport> {
    let inputs = vec![named("x", randn([3, 4], 8, 1.0)), named("w", randn([2, 4], 9, 1.0)), named("b", randn([2], 10, 1.0))];
    check(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        readout(g, y, 11)
    })
}

fn resample_case() -> Result<GradReport> {
    let crop = ResamplePlan::new(AxisPlan::crop(6, 0.1, 0.7, 4)?, AxisPlan::crop(6, 0.3, 0.9, 4)?);
    let crop2 = ResamplePlan::new(AxisPlan::crop(6, 0.0, 0.5, 4)?, AxisPlan::crop(6, 0.2, 1.0, 4)?);
    let plans = Rc::new(vec![crop, crop2]);
    check(&vec![named("x", randn([2, 2, 6, 6], 12, 1.0))], move |g, v| {
        let a = g.upsample_bilinear(v[0], 2)?;
        let b = g.upsample_nearest(v[0], 2)?;
        let c = g.downsample_area(v[0], 3)?;
        let d = g.resample(v[0], plans.clone())?;
        let s = g.add(readout(g, a, 13)?, readout(g, b, 14)?)?;
        let s = g.add(s, readout(g, c, 15)?)?;
        g.add(s, readout(g, d, 16)?)
    })
}

fn concat_slice() -> Result<GradReport> {
    let inputs = vec![named("a", randn([2, 2, 3, 3], 17, 1.0)), named("b", randn([2, 3, 3, 3], 18, 1.0))];
    check(&inputs, |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 4)?;
        let r = g.reshape(s, &[2, 27])?;
        let f = g.flatten(c)?;
        g.add(readout(g, r, 19)?, readout(g, f, 20)?)
    })
}

fn channel_affine() -> Result<GradReport> {
    let inputs = vec![
        named("x", randn([2, 3, 2, 2], 21, 1.0)),
        named("scale", randn([2, 3], 22, 1.0)),
        named("shift", randn([2, 3], 23, 1.0)),
    ];
    check(&inputs, |g, v| {
        let y = g.channel_affine(v[0], v[1], v[2])?;
        readout(g, y, 24)
    })
}

fn gram_case() -> Result<GradReport> {
    check(&vec![named("f", randn([2, 3, 3, 2], 25, 1.0))], |g, v| {
        let y = g.gram(v[0])?;
        readout(g, y, 26)
    })
}

fn pool_normalize() -> Result<GradReport> {
    check(&vec![named("x", randn([2, 4, 3, 3], 27, 1.0))], |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let n = g.normalize_rows(p, 1e-12)?;
        readout(g, n, 28)
    })
}

fn repeat_batch() -> Result<GradReport> {
    check(&vec![named("c", randn([1, 2, 3, 3], 29, 1.0))], |g, v| {
        let r = g.repeat_batch(v[0], 3)?;
        readout(g, r, 30)
    })
}

// ------------------------------------------------------------------ layers

fn tiny_unet() -> UNetConfig {
    UNetConfig { in_channels: 1, image_size: 4, depth: 1, widths: vec![2, 3], latent_width: 3, res_blocks: 1 }
}

fn tiny_prior() -> PriorConfig {
    PriorConfig { out_channels: 1, image_size: 4, depth: 1, widths: vec![2, 3], latent_width: 3, w_width: 3, mlp_layers: 2 }
}

fn unet_case() -> Result<GradReport> {
    let net = UNet::new(tiny_unet())?;
    let mut p = Params::new();
    net.init(&mut Init::new(31), &mut p);
    let (inputs, names) = with_params(&p, vec![named("x", randn([2, 1, 4, 4], 32, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let out = net.forward(&b, *v.last().unwrap())?;
        let s = g.add(readout(g, out.latent, 33)?, readout(g, out.spatial[0], 34)?)?;
        g.add(s, readout(g, out.pyramid[0], 35)?)
    })
}

fn prior_case() -> Result<GradReport> {
    let gen = PriorGenerator::new(tiny_prior())?;
    let mut p = Params::new();
    gen.init(&mut Init::new(36), &mut p);
    let (inputs, names) = with_params(&p, vec![named("z", randn([2, 3], 37, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let w = gen.map_latent(&b, *v.last().unwrap())?;
        let feats = gen.prior_features(&b, w)?;
        let img = gen.to_img(&b, feats[0])?;
        g.add(readout(g, feats[0], 38)?, readout(g, img, 39)?)
    })
}

fn sft_case() -> Result<GradReport> {
    let inputs = vec![
        named("f", randn([1, 2, 3, 3], 40, 1.0)),
        named("alpha", randn([1, 2, 3, 3], 41, 1.0)),
        named("beta", randn([1, 2, 3, 3], 42, 1.0)),
    ];
    check(&inputs, |g, v| {
        let y = sft(g, v[0], v[1], v[2])?;
        readout(g, y, 43)
    })
}

fn cs_sft_case() -> Result<GradReport> {
    let layer = CsSft::new("sft", 4, 3, 0.5)?;
    let mut p = Params::new();
    layer.init(&mut Init::new(44), &mut p);
    let (inputs, names) = with_params(
        &p,
        vec![named("f_gan", randn([2, 4, 3, 3], 45, 1.0)), named("f_spatial", randn([2, 3, 3, 3], 46, 1.0))],
    );
    let n = inputs.len();
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let y = layer.forward(&b, v[n - 2], v[n - 1])?;
        // the ρ = 1 path of the raw op, with (α, β) covering all channels
        let (a, bt) = layer.condition(&b, v[n - 1])?;
        let z = cs_sft(g, v[n - 2], g.concat_channels(&[a, a])?, g.concat_channels(&[bt, bt])?, 0)?;
        g.add(readout(g, y, 47)?, readout(g, z, 48)?)
    })
}

fn disc_case() -> Result<GradReport> {
    let d = Discriminator::new("d", DiscriminatorConfig { in_channels: 1, input_size: 6, widths: vec![2, 3], strides: vec![1, 2] })?;
    let mut p = Params::new();
    d.init(&mut Init::new(49), &mut p);
    let (inputs, names) = with_params(&p, vec![named("x", randn([2, 1, 6, 6], 50, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let (logit, feats) = d.forward(&b, *v.last().unwrap())?;
        g.add(readout(g, logit, 51)?, readout(g, feats[1], 52)?)
    })
}

fn crop_case() -> Result<GradReport> {
    let boxes = [ComponentBoxes::canonical(), ComponentBoxes {
        left_eye: BoxRect { x0: 0.1, y0: 0.2, x1: 0.4, y1: 0.5 },
        right_eye: BoxRect { x0: 0.6, y0: 0.2, x1: 0.9, y1: 0.5 },
        mouth: BoxRect { x0: 0.3, y0: 0.6, x1: 0.7, y1: 0.9 },
    }];
    check(&vec![named("x", randn([2, 1, 8, 8], 53, 1.0))], move |g, v| {
        let [a, b, c] = crate::nn::crop_components(g, v[0], &boxes, 4)?;
        let s = g.add(readout(g, a, 54)?, readout(g, b, 55)?)?;
        g.add(s, readout(g, c, 56)?)
    })
}

fn tiny_restorer() -> Result<(Restorer, Params)> {
    let r = Restorer::new(RestorerConfig { unet: tiny_unet(), prior: tiny_prior(), rho: vec![0.5] })?;
    let mut p = Params::new();
    r.prior.init(&mut Init::new(57), &mut p);
    r.init_trainable(&mut Init::new(58), &mut p);
    Ok((r, p))
}

fn restorer_case() -> Result<GradReport> {
    let (r, p) = tiny_restorer()?;
    let (inputs, names) = with_params(&p, vec![named("x", randn([2, 1, 4, 4], 59, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let out = r.forward(&b, *v.last().unwrap())?;
        readout(g, out.image, 60)
    })
}

fn denoiser_case() -> Result<GradReport> {
    let net = Denoiser::new(DenoiserConfig { channels: 1, kernel: 3, width1: 3, width2: 2 })?;
    let p = net.init(&mut Init::new(61));
    let (inputs, names) = with_params(&p, vec![named("x", randn([1, 1, 5, 5], 62, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let y = net.forward(&b, *v.last().unwrap())?;
        readout(g, y, 63)
    })
}

// ------------------------------------------------------------------ losses

fn pair(seed: u64, shape: [usize; 4]) -> Inputs {
    let y = randn(shape, seed, 0.3).map(|v| v + 0.5);
    // well separated from y so no |·| term sits at its kink
    let yhat = randn(shape, seed + 1, 0.3).map(|v| v + 0.5);
    vec![named("yhat", yhat), named("y", y)]
}

fn reconstruction_case() -> Result<GradReport> {
    let phi = FrozenExtractor { prefix: "phi".into(), in_channels: 1, widths: vec![2, 3, 3, 3], seed: 64 };
    let pp = phi.params();
    let inputs = pair(65, [2, 1, 8, 8]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind(&pp, false);
        let (total, ..) = losses::reconstruction_loss(&b, &phi, v[0], v[1], &LossWeights::default())?;
        Ok(total)
    })
}

fn two_layer_disc() -> Result<(Discriminator, Params)> {
    let d = Discriminator::new("d", DiscriminatorConfig { in_channels: 1, input_size: 4, widths: vec![2, 2], strides: vec![2, 1] })?;
    let mut p = Params::new();
    d.init(&mut Init::new(66), &mut p);
    Ok((d, p))
}

fn adversarial_g_case() -> Result<GradReport> {
    let (d, p) = two_layer_disc()?;
    let (inputs, names) = with_params(&p, vec![named("yhat", randn([2, 1, 4, 4], 67, 1.0))]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let y = g.constant(randn([2, 1, 4, 4], 68, 1.0));
        let (gl, _) = losses::adversarial_losses(&b, &d, *v.last().unwrap(), y, 0.1)?;
        Ok(gl)
    })
}

fn adversarial_d_case() -> Result<GradReport> {
    let (d, p) = two_layer_disc()?;
    let (inputs, names) = with_params(&p, vec![]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let yhat = g.constant(randn([2, 1, 4, 4], 69, 1.0));
        let y = g.constant(randn([2, 1, 4, 4], 70, 1.0));
        let (_, dl) = losses::adversarial_losses(&b, &d, yhat, y, 0.1)?;
        Ok(dl)
    })
}

fn component_case() -> Result<GradReport> {
    let mut discs = ComponentDiscriminators::new(1, 4)?;
    for d in &mut discs.discs {
        d.config.widths = vec![2, 2];
    }
    let mut p = Params::new();
    discs.init(&mut Init::new(71), &mut p);
    let (inputs, names) = with_params(&p, pair(72, [2, 1, 8, 8]));
    let n = inputs.len();
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let t = losses::component_loss(&b, &discs, v[n - 2], v[n - 1], &[ComponentBoxes::canonical(); 2])?;
        g.add(t.local, g.scale(t.feature_style, 200.0))
    })
}

fn component_d_case() -> Result<GradReport> {
    let mut discs = ComponentDiscriminators::new(1, 4)?;
    for d in &mut discs.discs {
        d.config.widths = vec![2, 2];
    }
    let mut p = Params::new();
    discs.init(&mut Init::new(71), &mut p);
    let (inputs, names) = with_params(&p, vec![]);
    let io = pair(72, [2, 1, 8, 8]);
    check(&inputs, |g, v| {
        let mut b = Bound::new(g);
        b.bind_vars(&names, v);
        let (yhat, y) = (g.constant(io[0].1.clone()), g.constant(io[1].1.clone()));
        losses::component_d_loss(&b, &discs, yhat, y, &[ComponentBoxes::canonical(); 2])
    })
}

fn identity_case() -> Result<GradReport> {
    let eta = FrozenExtractor { prefix: "eta".into(), in_channels: 1, widths: vec![2, 3, 3, 4], seed: 73 };
    let pe = eta.params();
    check(&pair(74, [2, 1, 8, 8]), |g, v| {
        let mut b = Bound::new(g);
        b.bind(&pe, false);
        losses::identity_loss(&b, &eta, v[0], v[1])
    })
}

fn pyramid_case() -> Result<GradReport> {
    let mut inputs = pair(75, [1, 1, 8, 8]);
    inputs.push(named("coarse", randn([1, 1, 4, 4], 77, 0.3).map(|v| v + 0.5)));
    check(&inputs, |g, v| losses::pyramid_loss(g, &[v[2], v[0]], v[1]))
}

fn total_case() -> Result<GradReport> {
    let inputs = vec![named("a", randn([3], 78, 1.0)), named("b", randn([3], 79, 1.0))];
    check(&inputs, |g, v| {
        let t1 = g.sum(g.mul(v[0], v[0])?);
        let t2 = g.sum(g.exp(v[1]));
        let (total, _) = losses::total_loss(g, &[(Term::L1, t1), (Term::Identity, t2)], &LossWeights::default())?;
        Ok(total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run(Some("optim")).is_err());
    }

    #[test]
    fn every_case_passes() {
        let entries = run(None).unwrap();
        assert_eq!(entries.len(), cases().len());
        let failed: Vec<String> =
            entries.iter().filter(|e| !e.passed()).map(|e| format!("{}::{}\n{}", e.module, e.name, e.report)).collect();
        assert!(failed.is_empty(), "{}", failed.join("\n"));
    }
}
