use super::{sft, Bound, Init};
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::model_io::Params;
use crate::tensor::{Float, Tensor};

/// Number of pass-through channels: `floor((1 − ρ)·C)`.
pub fn split_index(channels: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction ρ = {rho} outside (0, 1]")));
    }
    let k = ((1.0 - rho) * channels as f64).floor() as usize;
    Ok(k.min(channels.saturating_sub(1)))
}

/// Channel-split SFT: channels `[0, k)` of `f_gan` pass through untouched,
/// channels `[k, C)` become `α ⊙ F + β`.
pub fn cs_sft<T: Float>(g: &Graph<T>, f_gan: Var, alpha: Var, beta: Var, k: usize) -> Result<Var> {
    let c = g.shape(f_gan)[1];
    if k >= c {
        return Err(shape_err!("split index {k} must be below the channel count {c}"));
    }
    if k == 0 {
        return sft(g, f_gan, alpha, beta);
    }
    let keep = g.slice_channels(f_gan, 0, k)?;
    let modulated = g.slice_channels(f_gan, k, c)?;
    let m = sft(g, modulated, alpha, beta)?;
    g.concat_channels(&[keep, m])
}

/// One CS-SFT layer: two 3×3 condition convolutions map `F_spatial` to the
/// `(α, β)` of the modulated channels.
#[derive(Clone, Debug)]
pub struct CsSft {
    pub prefix: String,
    pub gan_channels: usize,
    pub spatial_channels: usize,
    pub rho: f64,
}

impl CsSft {
    pub fn new(prefix: impl Into<String>, gan_channels: usize, spatial_channels: usize, rho: f64) -> Result<Self> {
        split_index(gan_channels, rho)?;
        Ok(Self { prefix: prefix.into(), gan_channels, spatial_channels, rho })
    }

    pub fn split(&self) -> usize {
        split_index(self.gan_channels, self.rho).expect("validated in new")
    }

    pub fn modulated(&self) -> usize {
        self.gan_channels - self.split()
    }

    /// Small random condition weights with α biased to 1 and β to 0.
    pub fn init(&self, init: &mut Init, p: &mut Params) {
        let m = self.modulated();
        for (head, bias) in [("alpha", 1.0f32), ("beta", 0.0)] {
            let name = format!("{}.{head}", self.prefix);
            init.conv(p, &name, m, self.spatial_channels, 3, 0.1);
            p.insert(format!("{name}.bias"), Tensor::full([m], bias));
        }
    }

    /// Overwrite the condition convs so that `α ≡ 1` and `β ≡ 0`.
    pub fn set_identity(&self, p: &mut Params) {
        for (head, bias) in [("alpha", 1.0f32), ("beta", 0.0)] {
            let w = format!("{}.{head}.weight", self.prefix);
            let shape = p[&w].shape().to_vec();
            p.insert(w, Tensor::zeros(shape));
            p.insert(format!("{}.{head}.bias", self.prefix), Tensor::full([self.modulated()], bias));
        }
    }

    pub fn condition<T: Float>(&self, p: &Bound<T>, f_spatial: Var) -> Result<(Var, Var)> {
        let alpha = p.conv(&format!("{}.alpha", self.prefix), f_spatial, 1)?;
        let beta = p.conv(&format!("{}.beta", self.prefix), f_spatial, 1)?;
        Ok((alpha, beta))
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, f_gan: Var, f_spatial: Var) -> Result<Var> {
        let g = p.graph();
        if g.shape(f_gan)[1] != self.gan_channels {
            return Err(shape_err!("{}: F_GAN has {} channels, layer built for {}", self.prefix, g.shape(f_gan)[1], self.gan_channels));
        }
        let (alpha, beta) = self.condition(p, f_spatial)?;
        cs_sft(g, f_gan, alpha, beta, self.split())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_index(4, 0.5).unwrap(), 2);
        assert_eq!(split_index(4, 1.0).unwrap(), 0);
        assert_eq!(split_index(16, 0.3).unwrap(), 11);
        assert_eq!(split_index(4, 1e-9).unwrap(), 3);
        assert!(split_index(4, 0.0).is_err());
        assert!(split_index(4, 1.5).is_err());
        assert!(split_index(4, f64::NAN).is_err());
    }

    #[test]
    fn hand_case_c4_half() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn([1, 4, 2, 2], |i| i as f64 - 5.0));
        let a = g.constant(Tensor::full([1, 2, 2, 2], 2.0));
        let b = g.constant(Tensor::full([1, 2, 2, 2], 1.0));
        let y = cs_sft(&g, f, a, b, split_index(4, 0.5).unwrap()).unwrap();
        let (fv, yv) = (g.value(f).clone(), g.value(y).clone());
        assert_eq!(&yv.data()[..8], &fv.data()[..8]);
        for i in 8..16 {
            assert_eq!(yv.data()[i], 2.0 * fv.data()[i] + 1.0);
        }
    }

    #[test]
    fn identity_condition_is_pass_through() {
        for rho in [0.25, 0.5, 1.0] {
            let layer = CsSft::new("sft0", 8, 4, rho).unwrap();
            let mut p = Params::new();
            layer.init(&mut Init::new(3), &mut p);
            layer.set_identity(&mut p);
            let g = Graph::<f32>::new();
            let mut b = Bound::new(&g);
            b.bind(&p, false);
            let f = g.constant(Tensor::from_fn([2, 8, 4, 4], |i| (i as f32 * 0.37).sin()));
            let s = g.constant(Tensor::from_fn([2, 4, 4, 4], |i| (i as f32 * 0.11).cos()));
            let y = layer.forward(&b, f, s).unwrap();
            assert_eq!(*g.value(y), *g.value(f));
        }
    }
}
