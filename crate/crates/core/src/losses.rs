//! Restoration objectives and the frozen feature extractors they use.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::nn::{crop_components, lrelu_gain, Bound, ComponentDiscriminators, Discriminator, Init};
use crate::tensor::Float;
use crate::toyface::ComponentBoxes;

/// Added inside the logarithm of the local adversarial term.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub local: f64,
    pub feature_style: f64,
    pub identity: f64,
    pub pyramid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.1, perceptual: 1.0, adversarial: 0.1, local: 1.0, feature_style: 200.0, identity: 10.0, pyramid: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let w = t.weight(self);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {} = {w} must be finite and ≥ 0", t.name())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    L1,
    Perceptual,
    Adversarial,
    Local,
    FeatureStyle,
    Identity,
    Pyramid,
}

impl Term {
    pub const ALL: [Term; 7] =
        [Term::L1, Term::Perceptual, Term::Adversarial, Term::Local, Term::FeatureStyle, Term::Identity, Term::Pyramid];

    pub fn name(self) -> &'static str {
        match self {
            Term::L1 => "l1",
            Term::Perceptual => "perceptual",
            Term::Adversarial => "adversarial",
            Term::Local => "local",
            Term::FeatureStyle => "feature_style",
            Term::Identity => "identity",
            Term::Pyramid => "pyramid",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::L1 => w.l1,
            Term::Perceptual => w.perceptual,
            Term::Adversarial => w.adversarial,
            Term::Local => w.local,
            Term::FeatureStyle => w.feature_style,
            Term::Identity => w.identity,
            Term::Pyramid => w.pyramid,
        }
    }
}

/// Raw and weighted values of every term in a total loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub terms: Vec<(Term, f64, f64)>,
    pub total: f64,
}

impl Breakdown {
    pub fn raw(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, ..)| *t == term).map(|&(_, r, _)| r)
    }
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (t, raw, weighted) in &self.terms {
            write!(f, "{}={raw:.6} (×w → {weighted:.6}) ", t.name())?;
        }
        write!(f, "total={:.6}", self.total)
    }
}

/// Weighted sum of raw terms plus the bookkeeping used in training logs.
pub fn total_loss<T: Float>(g: &Graph<T>, terms: &[(Term, Var)], weights: &LossWeights) -> Result<(Var, Breakdown)> {
    let mut total: Option<Var> = None;
    let mut breakdown = Breakdown::default();
    for &(t, v) in terms {
        if g.value(v).numel() != 1 {
            return Err(shape_err!("loss term {} is not a scalar", t.name()));
        }
        let w = t.weight(weights);
        let weighted = g.scale(v, w);
        let raw = g.value(v).item().f64();
        breakdown.terms.push((t, raw, g.value(weighted).item().f64()));
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let total = match total {
        Some(v) => v,
        None => g.constant(crate::tensor::Tensor::scalar(T::zero())),
    };
    breakdown.total = g.value(total).item().f64();
    Ok((total, breakdown))
}

/// Frozen, seeded random conv pyramid used in place of pretrained feature
/// networks. Stage 0 keeps the resolution, later stages halve it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenExtractor {
    pub prefix: String,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl FrozenExtractor {
    pub fn perceptual(in_channels: usize, seed: u64) -> Self {
        Self { prefix: "phi".into(), in_channels, widths: vec![8, 16, 16, 16], seed }
    }

    pub fn embedder(in_channels: usize, seed: u64) -> Self {
        Self { prefix: "eta".into(), in_channels, widths: vec![8, 16, 32, 32], seed }
    }

    pub fn params(&self) -> Params {
        let mut p = Params::new();
        let mut init = Init::new(self.seed);
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            init.conv(&mut p, &format!("{}.stage{i}", self.prefix), w, cin, 3, lrelu_gain());
            cin = w;
        }
        p
    }

    /// Pre-activation feature map of every stage.
    pub fn features<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut h = x;
        for i in 0..self.widths.len() {
            let f = p.conv(&format!("{}.stage{i}", self.prefix), h, if i == 0 { 1 } else { 2 })?;
            out.push(f);
            h = p.lrelu(f);
        }
        Ok(out)
    }

    /// Unit-norm embedding: global average of the last stage, L2-normalized.
    pub fn embed<T: Float>(&self, p: &Bound<T>, x: Var) -> Result<Var> {
        let feats = self.features(p, x)?;
        let pooled = p.graph().global_avg_pool(*feats.last().unwrap())?;
        p.graph().normalize_rows(pooled, 1e-12)
    }
}

pub fn l1_loss<T: Float>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    g.l1(a, b)
}

fn sum_terms<T: Float>(g: &Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::InvalidArgument("empty loss sum".into()))?;
    it.try_fold(first, |acc, v| g.add(acc, v))
}

/// `Σ_stages mean|φ_s(ŷ) − φ_s(y)|`.
pub fn perceptual_loss<T: Float>(p: &Bound<T>, phi: &FrozenExtractor, yhat: Var, y: Var) -> Result<Var> {
    let g = p.graph();
    if g.shape(yhat) != g.shape(y) {
        return Err(shape_err!("perceptual loss between {:?} and {:?}", g.shape(yhat), g.shape(y)));
    }
    let fa = phi.features(p, yhat)?;
    let fb = phi.features(p, y)?;
    sum_terms(g, fa.into_iter().zip(fb).map(|(a, b)| g.l1(a, b)).collect::<Result<_>>()?)
}

/// `(λ_l1·L1 + λ_per·Perc, L1, Perc)`.
pub fn reconstruction_loss<T: Float>(
    p: &Bound<T>,
    phi: &FrozenExtractor,
    yhat: Var,
    y: Var,
    weights: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let g = p.graph();
    let l1 = g.l1(yhat, y)?;
    let per = perceptual_loss(p, phi, yhat, y)?;
    let total = g.add(g.scale(l1, weights.l1), g.scale(per, weights.perceptual))?;
    Ok((total, l1, per))
}

/// Non-saturating generator term `mean softplus(−logits)` (unweighted).
pub fn generator_adversarial<T: Float>(g: &Graph<T>, fake_logits: Var) -> Var {
    g.mean(g.softplus(g.neg(fake_logits)))
}

/// `mean softplus(D(fake)) + mean softplus(−D(real))`.
pub fn discriminator_loss<T: Float>(g: &Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let f = g.mean(g.softplus(fake_logits));
    let r = g.mean(g.softplus(g.neg(real_logits)));
    g.add(f, r)
}

/// `(λ_adv · mean softplus(−D(ŷ)), mean softplus(D(ŷ.detached)) + mean softplus(−D(y)))`.
pub fn adversarial_losses<T: Float>(
    p: &Bound<T>,
    d: &Discriminator,
    yhat: Var,
    y: Var,
    lambda_adv: f64,
) -> Result<(Var, Var)> {
    let g = p.graph();
    let (fake, _) = d.forward(p, yhat)?;
    let g_loss = g.scale(generator_adversarial(g, fake), lambda_adv);
    let (fake_d, _) = d.forward(p, g.detach(yhat))?;
    let (real, _) = d.forward(p, y)?;
    Ok((g_loss, discriminator_loss(g, real, fake_d)?))
}

pub fn gram<T: Float>(g: &Graph<T>, features: Var) -> Result<Var> {
    g.gram(features)
}

/// `Σ_layers mean|Gram(a_l) − Gram(b_l)|`.
pub fn feature_style_loss<T: Float>(g: &Graph<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() {
        return Err(shape_err!("feature style over {} vs {} layers", a.len(), b.len()));
    }
    let terms = a
        .iter()
        .zip(b)
        .map(|(&fa, &fb)| {
            let ga = g.gram(fa)?;
            let gb = g.gram(fb)?;
            g.l1(ga, gb)
        })
        .collect::<Result<_>>()?;
    sum_terms(g, terms)
}

/// Raw generator-side component terms summed over the three facial regions.
pub struct ComponentTerms {
    /// `Σ mean log(1 − σ(D_ROI(ŷ_ROI)) + ε)`.
    pub local: Var,
    /// `Σ Σ_layers mean|ΔGram|` over discriminator features.
    pub feature_style: Var,
}

pub fn component_loss<T: Float>(
    p: &Bound<T>,
    discs: &ComponentDiscriminators,
    yhat: Var,
    y: Var,
    boxes: &[ComponentBoxes],
) -> Result<ComponentTerms> {
    let g = p.graph();
    let fake = crop_components(g, yhat, boxes, discs.patch_size)?;
    let real = crop_components(g, y, boxes, discs.patch_size)?;
    let (mut local, mut fs) = (Vec::new(), Vec::new());
    for k in 0..3 {
        let d = discs.get(k)?;
        let (logit, feats_fake) = d.forward(p, fake[k])?;
        let (_, feats_real) = d.forward(p, real[k])?;
        // 1 − σ(l) = σ(−l); computing it directly keeps ε from being absorbed in f32.
        let one_minus = g.add_scalar(g.sigmoid(g.neg(logit)), LOG_EPS);
        local.push(g.mean(g.log(one_minus)));
        fs.push(feature_style_loss(g, &feats_fake, &feats_real)?);
    }
    Ok(ComponentTerms { local: sum_terms(g, local)?, feature_style: sum_terms(g, fs)? })
}

/// Discriminator loss of the three component discriminators on detached restorations.
pub fn component_d_loss<T: Float>(
    p: &Bound<T>,
    discs: &ComponentDiscriminators,
    yhat: Var,
    y: Var,
    boxes: &[ComponentBoxes],
) -> Result<Var> {
    let g = p.graph();
    let fake = crop_components(g, g.detach(yhat), boxes, discs.patch_size)?;
    let real = crop_components(g, y, boxes, discs.patch_size)?;
    let terms = (0..3)
        .map(|k| {
            let d = discs.get(k)?;
            let (f, _) = d.forward(p, fake[k])?;
            let (r, _) = d.forward(p, real[k])?;
            discriminator_loss(g, r, f)
        })
        .collect::<Result<_>>()?;
    sum_terms(g, terms)
}

/// `mean|η(ŷ) − η(y)|` between unit-normalized embeddings (unweighted).
pub fn identity_loss<T: Float>(p: &Bound<T>, eta: &FrozenExtractor, yhat: Var, y: Var) -> Result<Var> {
    let a = eta.embed(p, yhat)?;
    let b = eta.embed(p, y)?;
    p.graph().l1(a, b)
}

/// `Σ_s mean|out_s − area↓(y, 2^level_s)|` for side outputs listed coarsest
/// first, the last one at full resolution.
pub fn pyramid_loss<T: Float>(g: &Graph<T>, outputs: &[Var], y: Var) -> Result<Var> {
    let n = outputs.len();
    let terms = outputs
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let level = n - 1 - i;
            let target = if level == 0 { y } else { g.downsample_area(y, 1 << level)? };
            g.l1(o, target)
        })
        .collect::<Result<_>>()?;
    sum_terms(g, terms)
}

/// Whether the pyramid term is still active at `iteration`.
pub fn pyramid_active(iteration: usize, cutoff: usize) -> bool {
    iteration < cutoff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DiscriminatorConfig;
    use crate::tensor::Tensor;

    fn bound_with<'g>(g: &'g Graph<f64>, params: &[&Params]) -> Bound<'g, f64> {
        let mut b = Bound::new(g);
        for p in params {
            b.bind(p, false);
        }
        b
    }

    fn img(seed: usize) -> Tensor<f64> {
        Tensor::from_fn([2, 1, 16, 16], |i| (((i + seed) * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn reconstruction_cases() {
        let phi = FrozenExtractor::perceptual(1, 5);
        let pp = phi.params();
        let g = Graph::<f64>::new();
        let b = bound_with(&g, &[&pp]);
        let y = g.constant(img(0));
        let (tot, l1, per) = reconstruction_loss(&b, &phi, y, y, &LossWeights::default()).unwrap();
        assert_eq!(g.value(tot).item(), 0.0);
        assert_eq!(g.value(l1).item(), 0.0);
        assert_eq!(g.value(per).item(), 0.0);
        let shifted = g.add_scalar(y, 0.5);
        assert!((g.value(l1_loss(&g, shifted, y).unwrap()).item() - 0.5).abs() < 1e-12);
        let (tot, l1, per) = reconstruction_loss(&b, &phi, shifted, y, &LossWeights::default()).unwrap();
        let expect = 0.1 * g.value(l1).item() + g.value(per).item();
        assert!((g.value(tot).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let g = Graph::<f64>::new();
        let zero = g.constant(Tensor::zeros([4, 1]));
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(g.scale(generator_adversarial(&g, zero), 0.1)).item() - 0.1 * ln2).abs() < 1e-12);
        assert!((g.value(discriminator_loss(&g, zero, zero).unwrap()).item() - 2.0 * ln2).abs() < 1e-12);
        let big = g.constant(Tensor::full([4, 1], 60.0));
        assert!(g.value(generator_adversarial(&g, big)).item() < 1e-20);
    }

    #[test]
    fn adversarial_losses_with_zero_discriminator() {
        let d = Discriminator::new("d", DiscriminatorConfig::global(1, 16)).unwrap();
        let mut p = Params::new();
        d.init(&mut Init::new(1), &mut p);
        for t in p.values_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let g = Graph::<f64>::new();
        let b = bound_with(&g, &[&p]);
        let (gl, dl) = adversarial_losses(&b, &d, g.constant(img(1)), g.constant(img(2)), 0.1).unwrap();
        assert!((g.value(gl).item() - 0.1 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(dl).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gram_cases() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 3, 2, 2]));
        assert!(g.value(gram(&g, z).unwrap()).data().iter().all(|&v| v == 0.0));
        let f = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert!((g.value(gram(&g, f).unwrap()).item() - 30.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn component_terms_vanish_on_equal_input() {
        let discs = ComponentDiscriminators::new(1, 8).unwrap();
        let mut p = Params::new();
        discs.init(&mut Init::new(2), &mut p);
        let g = Graph::<f64>::new();
        let b = bound_with(&g, &[&p]);
        let y = g.constant(img(3));
        let t = component_loss(&b, &discs, y, y, &[ComponentBoxes::canonical(); 2]).unwrap();
        assert_eq!(g.value(t.feature_style).item(), 0.0);
        assert!(g.value(t.local).item() < 0.0);
        let missing = ComponentDiscriminators { patch_size: 8, discs: vec![] };
        assert!(component_loss(&b, &missing, y, y, &[ComponentBoxes::canonical(); 2]).is_err());
    }

    #[test]
    fn identity_and_embedding_norm() {
        let eta = FrozenExtractor::embedder(1, 9);
        let pe = eta.params();
        let g = Graph::<f64>::new();
        let b = bound_with(&g, &[&pe]);
        let y = g.constant(img(4));
        assert_eq!(g.value(identity_loss(&b, &eta, y, y).unwrap()).item(), 0.0);
        let e = eta.embed(&b, g.constant(img(5))).unwrap();
        let ev = g.value(e).clone();
        for row in ev.data().chunks(32) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pyramid_cases() {
        let g = Graph::<f64>::new();
        let y = g.constant(img(6));
        let half = g.downsample_area(y, 2).unwrap();
        assert_eq!(g.value(pyramid_loss(&g, &[half, y], y).unwrap()).item(), 0.0);
        let off = g.add_scalar(y, 0.25);
        let single = pyramid_loss(&g, &[off], y).unwrap();
        let plain = g.l1(off, y).unwrap();
        assert_eq!(g.value(single).item(), g.value(plain).item());
        assert!(pyramid_active(9, 10) && !pyramid_active(10, 10));
    }

    #[test]
    fn total_bookkeeping() {
        let g = Graph::<f64>::new();
        let w = LossWeights::default();
        let zero = g.constant(Tensor::scalar(0.0));
        let terms: Vec<(Term, Var)> = Term::ALL.iter().map(|&t| (t, zero)).collect();
        let (t, _) = total_loss(&g, &terms, &w).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let two = g.constant(Tensor::scalar(2.0));
        let mut terms = terms;
        terms[0] = (Term::L1, two);
        let (t, bd) = total_loss(&g, &terms, &w).unwrap();
        assert!((g.value(t).item() - 0.2).abs() < 1e-12);
        let terms: Vec<(Term, Var)> =
            Term::ALL.iter().enumerate().map(|(i, &t)| (t, g.constant(Tensor::scalar(0.37 * i as f64 + 0.1)))).collect();
        let (_, bd2) = total_loss(&g, &terms, &w).unwrap();
        let sum: f64 = bd2.terms.iter().map(|&(_, _, w)| w).sum();
        assert!((sum - bd2.total).abs() < 1e-6);
        assert_eq!(bd.raw(Term::L1), Some(2.0));
        let mut bad = w;
        bad.identity = -1.0;
        assert!(bad.validate().is_err());
    }
}
