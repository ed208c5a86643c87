//! Training loops: prior pretraining, the restorer's alternating G/D
//! optimization, and the toy denoiser with its finetuning path.
//!
//! Every loop is single-threaded and driven only by the seeds in
//! [`RunConfig`], so a rerun reproduces checkpoints and logs bit for bit.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::degradation::{add_noise_level, degrade_keep_size, DegradationRanges};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    adversarial_losses, component_d_loss, component_loss, identity_loss, perceptual_loss, pyramid_active,
    pyramid_loss, total_loss, Breakdown, FrozenExtractor, Term,
};
use crate::metrics::psnr;
use crate::model_io::{config_hash, Checkpoint, CheckpointMeta, Params};
use crate::nn::{
    subset, Bound, ComponentDiscriminators, Denoiser, Discriminator, DiscriminatorConfig, Init, LatentEncoder,
    PriorGenerator, Restorer,
};
use crate::optim::{halving_schedule, AdamConfig, AdamState};
use crate::toyface::{gen_toyfaces, read_corpus, split_seed, ToyFace};

pub const RESTORER_ARCH: &str = "restorer";
pub const PRIOR_ARCH: &str = "prior";

/// Index reserved for deriving validation streams from a master seed.
const VAL_INDEX: u64 = u64::MAX;

/// Called with `(iterations_done, checkpoint)` at every checkpoint interval.
pub type CheckpointSink<'a> = &'a mut dyn FnMut(usize, &Checkpoint) -> Result<()>;

/// One degraded/clean pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: Image,
    pub target: Image,
}

pub fn mean_psnr(outputs: &[Image], targets: &[Image]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} outputs for {} targets", outputs.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        sum += psnr(o, t)?;
    }
    Ok(sum / outputs.len() as f64)
}

/// Training and validation faces.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<ToyFace>,
    pub val: Vec<ToyFace>,
}

impl Corpus {
    /// Read the configured directories, generating whatever is absent.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let c = &cfg.corpus;
        let train = match &c.train_dir {
            Some(dir) => read_corpus(dir)?,
            None => gen_toyfaces(c.train_count, c.size, cfg.seeds.data)?,
        };
        let val = match &c.val_dir {
            Some(dir) => read_corpus(dir)?,
            None => gen_toyfaces(c.val_count, c.size, split_seed(cfg.seeds.data, VAL_INDEX))?,
        };
        if train.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        for f in train.iter().chain(&val) {
            if f.image.dims() != (c.size, c.size, cfg.architecture.unet.in_channels) {
                return Err(Error::Config(format!(
                    "corpus image {:?} does not match {}×{}×{}",
                    f.image.dims(),
                    c.size,
                    c.size,
                    cfg.architecture.unet.in_channels
                )));
            }
        }
        Ok(Self { train, val })
    }
}

/// Degrade every face with a spec drawn from `ranges` by its own seed.
pub fn degraded_pairs(faces: &[ToyFace], ranges: &DegradationRanges, seed: u64) -> Result<Vec<Pair>> {
    faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let spec = ranges.sample(&mut ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64)));
            Ok(Pair { input: degrade_keep_size(&f.image, &spec)?, target: f.image.clone() })
        })
        .collect()
}

/// Add AWGN of level `delta` (0–255 scale) to every face.
pub fn noisy_pairs(faces: &[ToyFace], delta: f64, seed: u64) -> Vec<Pair> {
    faces
        .iter()
        .enumerate()
        .map(|(i, f)| Pair { input: add_noise_level(&f.image, delta, split_seed(seed, i as u64)), target: f.image.clone() })
        .collect()
}

/// Held-out restoration pairs for `cfg`.
pub fn restoration_val_pairs(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Pair>> {
    degraded_pairs(&corpus.val, &cfg.degradation, split_seed(cfg.seeds.noise, VAL_INDEX))
}

/// Held-out denoising pairs at `delta`.
pub fn denoise_val_pairs(cfg: &RunConfig, corpus: &Corpus, delta: f64) -> Vec<Pair> {
    noisy_pairs(&corpus.val, delta, split_seed(cfg.seeds.noise, VAL_INDEX))
}

// ------------------------------------------------------------------ logging

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Raw value per [`Term::ALL`] entry; `None` when the term was inactive.
    pub terms: [Option<f64>; 7],
    pub d_loss: Option<f64>,
    pub total: f64,
    pub val_psnr: Option<f64>,
}

impl LogRow {
    fn new(iter: usize, breakdown: &Breakdown, d_loss: Option<f64>) -> Self {
        Self { iter, terms: Term::ALL.map(|t| breakdown.raw(t)), d_loss, total: breakdown.total, val_psnr: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn header() -> String {
        let mut cols = vec!["iter"];
        cols.extend(Term::ALL.map(Term::name));
        cols.extend(["d_loss", "total", "val_psnr"]);
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        let mut out = Self::header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.iter);
            for t in r.terms {
                let _ = write!(out, ",{}", cell(t));
            }
            let _ = writeln!(out, ",{},{},{}", cell(r.d_loss), cell(Some(r.total)), cell(r.val_psnr));
        }
        out
    }

    /// `(iter, val_psnr)` for every validated row.
    pub fn validations(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.val_psnr.map(|p| (r.iter, p))).collect()
    }
}

// ------------------------------------------------------------------ helpers

/// Seeded epoch-wise shuffling over `n` items.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_finite(iteration: usize, breakdown: &Breakdown, extra: Option<f64>) -> Result<()> {
    let ok = breakdown.total.is_finite() && extra.is_none_or(f64::is_finite);
    if ok {
        Ok(())
    } else {
        let mut text = breakdown.to_string();
        if let Some(d) = extra {
            let _ = write!(text, " d_loss={d}");
        }
        Err(Error::NonFiniteLoss { iteration, breakdown: text })
    }
}

fn only(grads: Params, keep: impl Fn(&str) -> bool) -> Params {
    grads.into_iter().filter(|(n, _)| keep(n)).collect()
}

fn adam(cfg: &RunConfig, lr: f64) -> AdamState {
    AdamState::new(AdamConfig { beta1: cfg.optimizer.beta1, beta2: cfg.optimizer.beta2, ..AdamConfig::with_lr(lr) })
}

fn meta(cfg: &RunConfig, arch: &str, arch_config: serde_json::Value, provenance: String) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        arch: arch.into(),
        arch_config,
        seed: cfg.seeds.model,
        provenance,
        lineage: Vec::new(),
        config_hash: config_hash(cfg)?,
        experimental: Vec::new(),
    })
}

fn should_checkpoint(cfg: &RunConfig, done: usize) -> bool {
    done.is_multiple_of(cfg.checkpoint_every) && done < cfg.iterations
}

fn should_validate(cfg: &RunConfig, done: usize) -> bool {
    done.is_multiple_of(cfg.val_every) || done == cfg.iterations
}

// ------------------------------------------------------------------ prior

/// Pretrain the prior generator as the decoder of an autoencoder on clean
/// faces. The checkpoint holds both the generator (`prior.*`) and the
/// throwaway encoder (`penc.*`).
pub fn pretrain_prior(cfg: &RunConfig, faces: &[ToyFace]) -> Result<(Checkpoint, TrainLog)> {
    let pc = cfg.architecture.prior.clone();
    let gen = PriorGenerator::new(pc.clone())?;
    let enc = LatentEncoder::new(pc.clone())?;
    let mut params = Params::new();
    let mut init = Init::new(split_seed(cfg.seeds.model, 2));
    gen.init(&mut init, &mut params);
    enc.init(&mut init, &mut params);
    if faces.is_empty() {
        return Err(Error::Config("no faces to pretrain the prior on".into()));
    }
    let pp = cfg.prior_pretrain;
    let mut opt = adam(cfg, pp.lr);
    let mut sampler = Sampler::new(faces.len(), split_seed(cfg.seeds.data, 2));
    let mut log = TrainLog::default();
    for it in 0..pp.iterations {
        let batch: Vec<Image> = sampler.next_batch(pp.batch_size).into_iter().map(|i| faces[i].image.clone()).collect();
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&params, true);
        let x = g.constant(Image::batch_to_tensor(&batch)?);
        let latent = enc.forward(&b, x)?;
        let y = gen.generate(&b, latent)?;
        let l1 = g.l1(y, x)?;
        let (total, breakdown) = total_loss(&g, &[(Term::L1, l1)], &crate::losses::LossWeights { l1: 1.0, ..Default::default() })?;
        check_finite(it, &breakdown, None)?;
        g.backward(total)?;
        opt.set_lr(halving_schedule(pp.lr, &cfg.optimizer.milestones, it));
        opt.step(&mut params, &b.grads())?;
        log.rows.push(LogRow::new(it + 1, &breakdown, None));
    }
    let m = meta(cfg, PRIOR_ARCH, serde_json::to_value(&pc)?, "prior".into())?;
    Ok((Checkpoint::new(m, params), log))
}

// ------------------------------------------------------------------ restorer

/// Everything the restorer's G/D loop needs besides the parameters.
pub struct RestorerSetup {
    pub restorer: Restorer,
    pub global: Discriminator,
    pub components: ComponentDiscriminators,
    pub phi: FrozenExtractor,
    pub eta: FrozenExtractor,
}

impl RestorerSetup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let a = &cfg.architecture;
        let c = a.unet.in_channels;
        Ok(Self {
            restorer: Restorer::new(a.clone())?,
            global: Discriminator::new("disc", DiscriminatorConfig::global(c, a.unet.image_size))?,
            components: ComponentDiscriminators::new(c, cfg.component_patch)?,
            phi: FrozenExtractor::perceptual(c, cfg.seeds.extractor),
            eta: FrozenExtractor::embedder(c, split_seed(cfg.seeds.extractor, 1)),
        })
    }

    fn is_discriminator(name: &str) -> bool {
        name.starts_with("disc.") || name.starts_with("dcomp.")
    }

    /// Whether `name` is optimized in the generator step.
    pub fn is_generator_param(name: &str) -> bool {
        !Restorer::is_prior_param(name) && !Self::is_discriminator(name)
    }

    /// Fresh restorer checkpoint around a pretrained prior.
    pub fn initial_checkpoint(&self, cfg: &RunConfig, prior: &Checkpoint) -> Result<Checkpoint> {
        if prior.meta.arch != PRIOR_ARCH {
            return Err(Error::Config(format!("expected a `{PRIOR_ARCH}` checkpoint, got `{}`", prior.meta.arch)));
        }
        let mut params = subset(&prior.params, "prior.");
        let mut expected = Params::new();
        self.restorer.prior.init(&mut Init::new(0), &mut expected);
        crate::model_io::compat_check(&params, &expected).into_result()?;
        self.restorer.init_trainable(&mut Init::new(cfg.seeds.model), &mut params);
        let mut d_init = Init::new(split_seed(cfg.seeds.model, 1));
        self.global.init(&mut d_init, &mut params);
        self.components.init(&mut d_init, &mut params);
        let mut m = meta(cfg, RESTORER_ARCH, serde_json::to_value(&cfg.architecture)?, "restore".into())?;
        m.lineage = prior.meta.lineage.iter().cloned().chain([prior.meta.provenance.clone()]).collect();
        Ok(Checkpoint::new(m, params))
    }

    /// Restore `inputs` with the generator part of `params`.
    pub fn restore(&self, params: &Params, inputs: &[Image]) -> Result<Vec<Image>> {
        self.restorer.restore(&only(params.clone(), |n| !Self::is_discriminator(n)), inputs)
    }

    pub fn validate(&self, params: &Params, pairs: &[Pair]) -> Result<f64> {
        let inputs: Vec<Image> = pairs.iter().map(|p| p.input.clone()).collect();
        let targets: Vec<Image> = pairs.iter().map(|p| p.target.clone()).collect();
        mean_psnr(&self.restore(params, &inputs)?, &targets)
    }
}

/// Restore images with a restorer checkpoint.
pub fn restore_with(ckpt: &Checkpoint, inputs: &[Image]) -> Result<Vec<Image>> {
    if ckpt.meta.arch != RESTORER_ARCH {
        return Err(Error::Config(format!("expected a `{RESTORER_ARCH}` checkpoint, got `{}`", ckpt.meta.arch)));
    }
    let cfg: crate::nn::RestorerConfig = serde_json::from_value(ckpt.meta.arch_config.clone())?;
    let r = Restorer::new(cfg)?;
    let g_params = only(ckpt.params.clone(), |n| !RestorerSetup::is_discriminator(n));
    r.restore(&g_params, inputs)
}

/// Alternating G-step / D-step training starting from `start`.
///
/// `lr_scale` multiplies the configured learning rate (finetuning uses the
/// configured `finetune_lr_scale`). Zero iterations return `start`'s
/// parameters unchanged.
pub fn train_restorer(
    cfg: &RunConfig,
    start: &Checkpoint,
    corpus: &Corpus,
    lr_scale: f64,
    sink: CheckpointSink,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let setup = RestorerSetup::new(cfg)?;
    let mut params = start.params.clone();
    let mut frozen = setup.phi.params();
    frozen.extend(setup.eta.params());
    let val = restoration_val_pairs(cfg, corpus)?;
    let w = cfg.loss_weights;
    let use_global_d = w.adversarial > 0.0;
    let use_comp_d = w.local > 0.0 || w.feature_style > 0.0;
    let cutoff = cfg.pyramid_cutoff();
    let base_lr = cfg.optimizer.lr * lr_scale;
    let mut g_opt = adam(cfg, base_lr);
    let mut d_opt = adam(cfg, base_lr);
    let mut sampler = Sampler::new(corpus.train.len(), cfg.seeds.data);
    let mut log = TrainLog::default();
    let mut ckpt = Checkpoint::new(start.meta.clone(), params.clone());
    ckpt.meta.config_hash = config_hash(cfg)?;

    for it in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        let mut boxes = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let face = &corpus.train[i];
            let seed = split_seed(cfg.seeds.noise, (it * cfg.batch_size + j) as u64);
            let spec = cfg.degradation.sample(&mut ChaCha8Rng::seed_from_u64(seed));
            inputs.push(degrade_keep_size(&face.image, &spec)?);
            targets.push(face.image.clone());
            boxes.push(face.boxes);
        }

        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&params, true);
        b.bind(&frozen, false);
        let x = g.constant(Image::batch_to_tensor(&inputs)?);
        let y = g.constant(Image::batch_to_tensor(&targets)?);
        let out = setup.restorer.forward(&b, x)?;
        let yhat = out.image;

        let mut terms = vec![(Term::L1, g.l1(yhat, y)?)];
        if w.perceptual > 0.0 {
            terms.push((Term::Perceptual, perceptual_loss(&b, &setup.phi, yhat, y)?));
        }
        let mut d_terms = Vec::new();
        if use_global_d {
            let (g_adv, d_loss) = adversarial_losses(&b, &setup.global, yhat, y, 1.0)?;
            terms.push((Term::Adversarial, g_adv));
            d_terms.push(d_loss);
        }
        if use_comp_d {
            let comp = component_loss(&b, &setup.components, yhat, y, &boxes)?;
            terms.push((Term::Local, comp.local));
            terms.push((Term::FeatureStyle, comp.feature_style));
            d_terms.push(component_d_loss(&b, &setup.components, yhat, y, &boxes)?);
        }
        if w.identity > 0.0 {
            terms.push((Term::Identity, identity_loss(&b, &setup.eta, yhat, y)?));
        }
        if w.pyramid > 0.0 && pyramid_active(it, cutoff) {
            terms.push((Term::Pyramid, pyramid_loss(&g, &out.pyramid, y)?));
        }
        let (total, breakdown) = total_loss(&g, &terms, &w)?;
        let d_total = match d_terms.split_first() {
            None => None,
            Some((&first, rest)) => Some(rest.iter().try_fold(first, |acc, &v| g.add(acc, v))?),
        };
        let d_value = d_total.map(|v| g.value(v).item() as f64);
        check_finite(it, &breakdown, d_value)?;

        let lr = halving_schedule(base_lr, &cfg.optimizer.milestones, it);
        g.backward(total)?;
        g_opt.set_lr(lr);
        g_opt.step(&mut params, &only(b.grads(), RestorerSetup::is_generator_param))?;
        if let Some(d_total) = d_total {
            g.zero_grad();
            g.backward(d_total)?;
            d_opt.set_lr(lr);
            d_opt.step(&mut params, &only(b.grads(), RestorerSetup::is_discriminator))?;
        }

        let done = it + 1;
        let mut row = LogRow::new(done, &breakdown, d_value);
        if should_validate(cfg, done) && !val.is_empty() {
            row.val_psnr = Some(setup.validate(&params, &val)?);
        }
        log.rows.push(row);
        if should_checkpoint(cfg, done) {
            ckpt.params = params.clone();
            sink(done, &ckpt)?;
        }
    }
    ckpt.params = params;
    Ok((ckpt, log))
}

/// Continue training a restorer checkpoint on `corpus` at the finetuning rate.
pub fn finetune_restorer(
    cfg: &RunConfig,
    base: &Checkpoint,
    corpus: &Corpus,
    provenance: &str,
    sink: CheckpointSink,
) -> Result<(Checkpoint, TrainLog)> {
    let (mut ckpt, log) = train_restorer(cfg, base, corpus, cfg.optimizer.finetune_lr_scale, sink)?;
    extend_lineage(&mut ckpt.meta, &base.meta, provenance);
    Ok((ckpt, log))
}

fn extend_lineage(meta: &mut CheckpointMeta, base: &CheckpointMeta, provenance: &str) {
    meta.lineage = base.lineage.iter().cloned().chain([base.provenance.clone()]).collect();
    meta.provenance = provenance.to_string();
}

// ------------------------------------------------------------------ denoiser

pub fn denoiser_initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let net = Denoiser::new(cfg.denoise.arch.clone())?;
    let params = net.init(&mut Init::new(cfg.seeds.model));
    let m = meta(cfg, Denoiser::ARCH, serde_json::to_value(&cfg.denoise.arch)?, cfg.denoise.tag())?;
    Ok(Checkpoint::new(m, params))
}

/// Denoise images with a denoiser checkpoint.
pub fn denoise_with(ckpt: &Checkpoint, inputs: &[Image]) -> Result<Vec<Image>> {
    if ckpt.meta.arch != Denoiser::ARCH {
        return Err(Error::Config(format!("expected a `{}` checkpoint, got `{}`", Denoiser::ARCH, ckpt.meta.arch)));
    }
    let net = Denoiser::new(serde_json::from_value(ckpt.meta.arch_config.clone())?)?;
    net.run(&ckpt.params, inputs)
}

/// Run whichever network `ckpt` describes.
pub fn apply_checkpoint(ckpt: &Checkpoint, inputs: &[Image]) -> Result<Vec<Image>> {
    match ckpt.meta.arch.as_str() {
        RESTORER_ARCH => restore_with(ckpt, inputs),
        a if a == Denoiser::ARCH => denoise_with(ckpt, inputs),
        other => Err(Error::Config(format!("checkpoint architecture `{other}` cannot process images"))),
    }
}

/// Mean PSNR of `ckpt` over `pairs`.
pub fn evaluate_pairs(ckpt: &Checkpoint, pairs: &[Pair]) -> Result<f64> {
    let inputs: Vec<Image> = pairs.iter().map(|p| p.input.clone()).collect();
    let targets: Vec<Image> = pairs.iter().map(|p| p.target.clone()).collect();
    mean_psnr(&apply_checkpoint(ckpt, &inputs)?, &targets)
}

/// L1 training of the denoiser at `cfg.denoise.noise_level`.
pub fn train_denoiser(
    cfg: &RunConfig,
    start: &Checkpoint,
    corpus: &Corpus,
    lr_scale: f64,
    sink: CheckpointSink,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let net = Denoiser::new(serde_json::from_value(start.meta.arch_config.clone())?)?;
    let delta = cfg.denoise.noise_level;
    let val = denoise_val_pairs(cfg, corpus, delta);
    let mut params = start.params.clone();
    let base_lr = cfg.optimizer.lr * lr_scale;
    let mut opt = adam(cfg, base_lr);
    let mut sampler = Sampler::new(corpus.train.len(), cfg.seeds.data);
    let mut log = TrainLog::default();
    let mut ckpt = Checkpoint::new(start.meta.clone(), params.clone());
    ckpt.meta.config_hash = config_hash(cfg)?;
    let weights = crate::losses::LossWeights { l1: 1.0, ..Default::default() };
    for it in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let clean = &corpus.train[i].image;
            let seed = split_seed(cfg.seeds.noise, (it * cfg.batch_size + j) as u64);
            inputs.push(add_noise_level(clean, delta, seed));
            targets.push(clean.clone());
        }
        let g = Graph::<f32>::new();
        let mut b = Bound::new(&g);
        b.bind(&params, true);
        let x = g.constant(Image::batch_to_tensor(&inputs)?);
        let y = g.constant(Image::batch_to_tensor(&targets)?);
        let yhat = net.forward(&b, x)?;
        let (total, breakdown) = total_loss(&g, &[(Term::L1, g.l1(yhat, y)?)], &weights)?;
        check_finite(it, &breakdown, None)?;
        g.backward(total)?;
        opt.set_lr(halving_schedule(base_lr, &cfg.optimizer.milestones, it));
        opt.step(&mut params, &b.grads())?;
        let done = it + 1;
        let mut row = LogRow::new(done, &breakdown, None);
        if should_validate(cfg, done) && !val.is_empty() {
            let outs = net.run(&params, &val.iter().map(|p| p.input.clone()).collect::<Vec<_>>())?;
            row.val_psnr = Some(mean_psnr(&outs, &val.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?);
        }
        log.rows.push(row);
        if should_checkpoint(cfg, done) {
            ckpt.params = params.clone();
            sink(done, &ckpt)?;
        }
    }
    ckpt.params = params;
    Ok((ckpt, log))
}

/// Continue a denoiser at the configured noise level, tagging the result.
pub fn finetune_denoiser(cfg: &RunConfig, base: &Checkpoint, corpus: &Corpus, sink: CheckpointSink) -> Result<(Checkpoint, TrainLog)> {
    let (mut ckpt, log) = train_denoiser(cfg, base, corpus, cfg.optimizer.finetune_lr_scale, sink)?;
    extend_lineage(&mut ckpt.meta, &base.meta, &cfg.denoise.tag());
    Ok((ckpt, log))
}

/// Dispatch finetuning on the base checkpoint's architecture.
pub fn finetune(cfg: &RunConfig, base: &Checkpoint, corpus: &Corpus, sink: CheckpointSink) -> Result<(Checkpoint, TrainLog)> {
    match base.meta.arch.as_str() {
        RESTORER_ARCH => finetune_restorer(cfg, base, corpus, "restore-ft", sink),
        a if a == Denoiser::ARCH => finetune_denoiser(cfg, base, corpus, sink),
        other => Err(Error::Config(format!("cannot finetune a `{other}` checkpoint"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.train_count = 8;
        cfg.corpus.val_count = 2;
        cfg.iterations = 3;
        cfg.batch_size = 2;
        cfg.checkpoint_every = 2;
        cfg.val_every = 2;
        cfg.prior_pretrain.iterations = 2;
        cfg
    }

    fn no_sink() -> impl FnMut(usize, &Checkpoint) -> Result<()> {
        |_, _| Ok(())
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, 9);
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut second = s.next_batch(5);
        second.sort();
        assert_eq!(second, first);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mut log = TrainLog::default();
        let bd = Breakdown { terms: vec![(Term::L1, 0.5, 0.05)], total: 0.05 };
        log.rows.push(LogRow::new(1, &bd, Some(1.25)));
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,l1,perceptual,adversarial,local,feature_style,identity,pyramid,d_loss,total,val_psnr");
        assert_eq!(lines[1], "1,0.50000000,,,,,,,1.25000000,0.05000000,");
    }

    #[test]
    fn restorer_loop_is_deterministic_and_checkpoints() {
        let cfg = small_cfg();
        let corpus = Corpus::from_config(&cfg).unwrap();
        let (prior, _) = pretrain_prior(&cfg, &corpus.train).unwrap();
        let setup = RestorerSetup::new(&cfg).unwrap();
        let start = setup.initial_checkpoint(&cfg, &prior).unwrap();
        let mut seen = Vec::new();
        let (a, log_a) = train_restorer(&cfg, &start, &corpus, 1.0, &mut |i, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2]);
        let (b, log_b) = train_restorer(&cfg, &start, &corpus, 1.0, &mut no_sink()).unwrap();
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
        assert_eq!(log_a.to_csv(), log_b.to_csv());
        assert_eq!(log_a.validations().iter().map(|v| v.0).collect::<Vec<_>>(), vec![2, 3]);
        for (name, t) in &a.params {
            if Restorer::is_prior_param(name) {
                assert_eq!(t, &start.params[name], "{name} moved");
            }
        }
        assert!(a.params.iter().any(|(n, t)| n.starts_with("unet.") && t != &start.params[n]));
        assert!(a.params.iter().any(|(n, t)| n.starts_with("dcomp.") && t != &start.params[n]));
        assert_eq!(a.meta.lineage, vec!["prior".to_string()]);
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let mut cfg = small_cfg();
        cfg.iterations = 0;
        let corpus = Corpus::from_config(&cfg).unwrap();
        let (prior, _) = pretrain_prior(&cfg, &corpus.train).unwrap();
        let start = RestorerSetup::new(&cfg).unwrap().initial_checkpoint(&cfg, &prior).unwrap();
        let (out, log) = train_restorer(&cfg, &start, &corpus, 1.0, &mut no_sink()).unwrap();
        assert_eq!(out.params, start.params);
        assert!(log.rows.is_empty());
        cfg.task = Task::Denoise;
        let d0 = denoiser_initial_checkpoint(&cfg).unwrap();
        let (d1, _) = finetune_denoiser(&cfg, &d0, &corpus, &mut no_sink()).unwrap();
        assert_eq!(d1.params, d0.params);
    }

    #[test]
    fn nan_loss_aborts_with_iteration() {
        let mut cfg = small_cfg();
        cfg.task = Task::Denoise;
        let corpus = Corpus::from_config(&cfg).unwrap();
        let mut start = denoiser_initial_checkpoint(&cfg).unwrap();
        start.params.get_mut("conv3.bias").unwrap().data_mut()[0] = f32::NAN;
        match train_denoiser(&cfg, &start, &corpus, 1.0, &mut no_sink()) {
            Err(Error::NonFiniteLoss { iteration, breakdown }) => {
                assert_eq!(iteration, 0);
                assert!(breakdown.contains("l1="), "{breakdown}");
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn denoiser_finetune_records_lineage() {
        let mut cfg = small_cfg();
        cfg.task = Task::Denoise;
        cfg.iterations = 4;
        let corpus = Corpus::from_config(&cfg).unwrap();
        let base = denoiser_initial_checkpoint(&cfg).unwrap();
        let (n20, log) = train_denoiser(&cfg, &base, &corpus, 1.0, &mut no_sink()).unwrap();
        assert!(log.rows.iter().all(|r| r.total.is_finite()));
        cfg.denoise.noise_level = 60.0;
        let (n60, _) = finetune(&cfg, &n20, &corpus, &mut no_sink()).unwrap();
        assert_eq!(n60.meta.provenance, "N60");
        assert_eq!(n60.meta.lineage, vec!["N20".to_string()]);
        assert_ne!(n60.params, n20.params);
    }
}
