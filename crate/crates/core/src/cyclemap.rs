//! Cycle-consistent translation between the two image domains and
//! construction of the adapted (translated, still labeled) dataset.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidapt_autodiff::{Adam, Bound, ParamId, ParamSet, Sgd, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignednet::checkpoint::{self, CheckpointMeta};
use crate::error::{ReidError, Result};
use crate::synthgen::{Dataset, DomainTag, Image, ImageSample, CHANNELS};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

fn add_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
    let fan_in = cin * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = ps.insert(format!("{name}.w"), Tensor::new([cout, cin, k, k], data).expect("finite init"));
    let b = ps.insert(format!("{name}.b"), Tensor::zeros([cout]));
    Conv { w, b, stride, pad: k / 2 }
}

fn apply(tape: &mut Tape, bound: &Bound, x: Var, c: Conv) -> Result<Var> {
    let y = tape.conv2d(x, bound.var(c.w), c.stride, c.pad)?;
    Ok(tape.add_bias(y, bound.var(c.b))?)
}

fn conv_at(ps: &ParamSet, name: &str, stride: usize) -> Result<Conv> {
    let w = ps.id_of(&format!("{name}.w")).ok_or_else(|| ReidError::InvalidArgument(format!("missing {name}.w")))?;
    let b = ps.id_of(&format!("{name}.b")).ok_or_else(|| ReidError::InvalidArgument(format!("missing {name}.b")))?;
    let k = ps.get(w).shape()[2];
    Ok(Conv { w, b, stride, pad: k / 2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 8, res_blocks: 2 }
    }
}

/// Image-to-image network: stem, two stride-2 downsamples, residual blocks,
/// two nearest-neighbour upsamples and a tanh output mapped to `[0, 1]`. A
/// 1x1 convolution of the input is added before the output nonlinearity.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(ReidError::InvalidArgument("generator needs at least one channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (c1, c2) = (config.base_channels, 2 * config.base_channels);
        add_conv(&mut ps, &mut rng, "stem", CHANNELS, c1, 3, 1);
        add_conv(&mut ps, &mut rng, "down0", c1, c2, 3, 2);
        add_conv(&mut ps, &mut rng, "down1", c2, c2, 3, 2);
        for r in 0..config.res_blocks {
            add_conv(&mut ps, &mut rng, &format!("res{r}a"), c2, c2, 3, 1);
            add_conv(&mut ps, &mut rng, &format!("res{r}b"), c2, c2, 3, 1);
        }
        add_conv(&mut ps, &mut rng, "up0", c2, c2, 3, 1);
        add_conv(&mut ps, &mut rng, "up1", c2, c1, 3, 1);
        add_conv(&mut ps, &mut rng, "out", c1, CHANNELS, 3, 1);
        let skip = add_conv(&mut ps, &mut rng, "skip", CHANNELS, CHANNELS, 1, 1);
        let eye = ps.get_mut(skip.w).data_mut();
        eye.fill(0.0);
        (0..CHANNELS).for_each(|c| eye[c * CHANNELS + c] = 1.0);
        Ok(Self { config, params: ps })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `x` is `[N, 3, H, W]` in `[0, 1]`; so is the output.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let ps = &self.params;
        let centered = tape.scale(x, 2.0)?;
        let centered = tape.add_scalar(centered, -1.0)?;
        let mut h = apply(tape, bound, centered, conv_at(ps, "stem", 1)?)?;
        h = tape.relu(h)?;
        for name in ["down0", "down1"] {
            h = apply(tape, bound, h, conv_at(ps, name, 2)?)?;
            h = tape.relu(h)?;
        }
        for r in 0..self.config.res_blocks {
            let a = apply(tape, bound, h, conv_at(ps, &format!("res{r}a"), 1)?)?;
            let a = tape.relu(a)?;
            let b = apply(tape, bound, a, conv_at(ps, &format!("res{r}b"), 1)?)?;
            h = tape.add(h, b)?;
        }
        for name in ["up0", "up1"] {
            h = tape.upsample2x(h)?;
            h = apply(tape, bound, h, conv_at(ps, name, 1)?)?;
            h = tape.relu(h)?;
        }
        let out = apply(tape, bound, h, conv_at(ps, "out", 1)?)?;
        let skip = apply(tape, bound, centered, conv_at(ps, "skip", 1)?)?;
        let out = tape.add(out, skip)?;
        let out = tape.tanh(out)?;
        let out = tape.add_scalar(out, 1.0)?;
        Ok(tape.scale(out, 0.5)?)
    }

    pub fn translate(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = batch_var(&mut tape, chunk)?;
            let y = self.forward(&mut tape, &bound, x)?;
            out.extend(unbatch(&tape, y, chunk[0].height(), chunk[0].width()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, mut meta: CheckpointMeta) -> Result<()> {
        meta.kind = "generator".into();
        meta.config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = checkpoint::load(path)?;
        if meta.kind != "generator" {
            return Err(ReidError::corrupt(path, format!("checkpoint holds a {:?}, not a generator", meta.kind)));
        }
        let config: GeneratorConfig =
            serde_json::from_value(meta.config.clone()).map_err(|e| ReidError::corrupt(path, format!("config: {e}")))?;
        let fresh = Generator::new(config.clone(), 0)?;
        if fresh.params.names() != params.names() {
            return Err(ReidError::corrupt(path, "generator parameter names do not match its config"));
        }
        for ((_, a), (_, b)) in fresh.params.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(ReidError::Shape { expected: a.shape().to_vec(), got: b.shape().to_vec() });
            }
        }
        Ok((Self { config, params }, meta))
    }
}

/// Patch discriminator: two stride-2 leaky convolutions and a one-channel
/// scoring convolution. One score per patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamSet,
    base: usize,
}

impl Discriminator {
    pub fn new(base_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        add_conv(&mut ps, &mut rng, "d0", CHANNELS, base_channels, 3, 2);
        add_conv(&mut ps, &mut rng, "d1", base_channels, 2 * base_channels, 3, 2);
        add_conv(&mut ps, &mut rng, "score", 2 * base_channels, 1, 3, 1);
        Self { params: ps, base: base_channels }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn base_channels(&self) -> usize {
        self.base
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let ps = &self.params;
        let centered = tape.scale(x, 2.0)?;
        let centered = tape.add_scalar(centered, -1.0)?;
        let mut h = apply(tape, bound, centered, conv_at(ps, "d0", 2)?)?;
        h = tape.leaky_relu(h, 0.2)?;
        h = apply(tape, bound, h, conv_at(ps, "d1", 2)?)?;
        h = tape.leaky_relu(h, 0.2)?;
        apply(tape, bound, h, conv_at(ps, "score", 1)?)
    }
}

pub fn batch_var(tape: &mut Tape, images: &[&Image]) -> Result<Var> {
    let first = images.first().ok_or_else(|| ReidError::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(ReidError::Shape { expected: vec![h, w, CHANNELS], got: vec![img.height(), img.width(), CHANNELS] });
        }
        data.extend(img.to_chw());
    }
    Ok(tape.constant([images.len(), CHANNELS, h, w], data)?)
}

fn unbatch(tape: &Tape, y: Var, h: usize, w: usize) -> Vec<Image> {
    let plane = CHANNELS * h * w;
    tape.value(y)
        .chunks(plane)
        .map(|c| {
            let mut img = Image::from_chw(h, w, c).expect("generator keeps the image shape");
            img.clamp_unit();
            img
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanObjective {
    LeastSquares,
    /// Sigmoid cross-entropy on patch scores.
    CrossEntropy,
}

/// `0.5 * (mean((D(real) - 1)^2) + mean(D(fake)^2))` and `mean((D(fake) - 1)^2)`
/// for raw discriminator outputs.
pub fn lsgan_losses(real_scores: &[f64], fake_scores: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], t: f64| v.iter().map(|s| (s - t) * (s - t)).sum::<f64>() / v.len() as f64;
    (0.5 * (mean(real_scores, 1.0) + mean(fake_scores, 0.0)), mean(fake_scores, 1.0))
}

/// Discriminator and generator losses on the tape for the chosen objective.
pub fn tape_gan_terms(tape: &mut Tape, real: Option<Var>, fake: Var, objective: GanObjective) -> Result<(Option<Var>, Var)> {
    let toward = |tape: &mut Tape, s: Var, target: f64| -> Result<Var> {
        match objective {
            GanObjective::LeastSquares => {
                let d = tape.add_scalar(s, -target)?;
                let d = tape.square(d)?;
                Ok(tape.mean(d)?)
            }
            GanObjective::CrossEntropy => {
                // -ln sigmoid(s) = softplus(-s); -ln(1 - sigmoid(s)) = softplus(s).
                let signed = if target > 0.5 { tape.scale(s, -1.0)? } else { s };
                let l = tape.softplus(signed)?;
                Ok(tape.mean(l)?)
            }
        }
    };
    let g = toward(tape, fake, 1.0)?;
    let d = match real {
        Some(r) => {
            let a = toward(tape, r, 1.0)?;
            let b = toward(tape, fake, 0.0)?;
            let s = tape.add(a, b)?;
            Some(tape.scale(s, 0.5)?)
        }
        None => None,
    };
    Ok((d, g))
}

/// Mean absolute difference, as a tape scalar.
pub fn tape_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    Ok(tape.mean(d)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleLossBreakdown {
    pub gan_s_to_t: f64,
    pub gan_t_to_s: f64,
    pub cycle: f64,
    pub lambda: f64,
    pub total: f64,
}

impl CycleLossBreakdown {
    pub fn new(gan_s_to_t: f64, gan_t_to_s: f64, cycle: f64, lambda: f64) -> Self {
        Self { gan_s_to_t, gan_t_to_s, cycle, lambda, total: gan_s_to_t + gan_t_to_s + lambda * cycle }
    }
}

/// The two generators: `g` maps source to target, `f` target to source.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub g: Generator,
    pub f: Generator,
}

/// Mean L1 error of `F(G(x_s))` against `x_s` plus that of `G(F(x_t))` against `x_t`.
pub fn cycle_loss(pair: &GeneratorPair, batch_s: &[&Image], batch_t: &[&Image]) -> Result<f64> {
    let mut tape = Tape::new();
    let gb = pair.g.params.bind(&mut tape, false);
    let fb = pair.f.params.bind(&mut tape, false);
    let xs = batch_var(&mut tape, batch_s)?;
    let xt = batch_var(&mut tape, batch_t)?;
    let fake_t = pair.g.forward(&mut tape, &gb, xs)?;
    let rec_s = pair.f.forward(&mut tape, &fb, fake_t)?;
    let fake_s = pair.f.forward(&mut tape, &fb, xt)?;
    let rec_t = pair.g.forward(&mut tape, &gb, fake_s)?;
    let a = tape_l1(&mut tape, rec_s, xs)?;
    let b = tape_l1(&mut tape, rec_t, xt)?;
    Ok(tape.scalar(a) + tape.scalar(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanOptimizer {
    /// SGD with momentum `momentum`.
    Sgd,
    /// Adam with `beta1 = momentum`, `beta2 = 0.999`.
    Adam,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

impl Opt {
    fn new(kind: GanOptimizer, lr: f64, momentum: f64) -> Self {
        match kind {
            GanOptimizer::Sgd => Opt::Sgd(Sgd::new(lr, momentum)),
            GanOptimizer::Adam => Opt::Adam(Adam::new(lr, momentum, 0.999)),
        }
    }

    fn step(&mut self, ps: &mut ParamSet) -> Result<()> {
        match self {
            Opt::Sgd(o) => o.step_set(ps)?,
            Opt::Adam(o) => o.step_set(ps)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleGanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: GanOptimizer,
    pub objective: GanObjective,
    pub generator: GeneratorConfig,
    pub disc_channels: usize,
    pub seed: u64,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 2,
            lambda: 10.0,
            lr: 2e-4,
            momentum: 0.5,
            optimizer: GanOptimizer::Adam,
            objective: GanObjective::LeastSquares,
            generator: GeneratorConfig::default(),
            disc_channels: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStep {
    pub step: usize,
    pub d_loss: f64,
    pub losses: CycleLossBreakdown,
}

#[derive(Debug, Clone)]
pub struct CycleGanOutcome {
    pub pair: GeneratorPair,
    pub d_s: Discriminator,
    pub d_t: Discriminator,
    pub trace: Vec<CycleStep>,
}

fn draw<'a>(images: &[&'a Image], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Image> {
    images.choose_multiple(rng, n.min(images.len())).copied().collect()
}

/// Alternates one discriminator update with one generator update per step.
/// Only pixels of `target` are read, never its labels.
pub fn train_cyclegan(source: &Dataset, target: &Dataset, cfg: &CycleGanConfig) -> Result<CycleGanOutcome> {
    train_cyclegan_with(source, target, cfg, |_| {})
}

pub fn train_cyclegan_with(
    source: &Dataset,
    target: &Dataset,
    cfg: &CycleGanConfig,
    mut observe: impl FnMut(&CycleStep),
) -> Result<CycleGanOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(ReidError::InvalidArgument("cycle training needs non-empty source and target".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lambda >= 0.0) {
        return Err(ReidError::InvalidArgument("batch_size must be positive and lambda non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pair = GeneratorPair {
        g: Generator::new(cfg.generator.clone(), rng.gen())?,
        f: Generator::new(cfg.generator.clone(), rng.gen())?,
    };
    let mut d_s = Discriminator::new(cfg.disc_channels, rng.gen());
    let mut d_t = Discriminator::new(cfg.disc_channels, rng.gen());
    let (src_imgs, tgt_imgs) = (source.images(), target.images());
    let mut opt = [(); 4].map(|_| Opt::new(cfg.optimizer, cfg.lr, cfg.momentum));
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let bs = draw(&src_imgs, cfg.batch_size, &mut rng);
        let bt = draw(&tgt_imgs, cfg.batch_size, &mut rng);

        // Discriminators against frozen generators.
        let mut tape = Tape::new();
        let gb = pair.g.params.bind(&mut tape, false);
        let fb = pair.f.params.bind(&mut tape, false);
        let dsb = d_s.params.bind(&mut tape, true);
        let dtb = d_t.params.bind(&mut tape, true);
        let xs = batch_var(&mut tape, &bs)?;
        let xt = batch_var(&mut tape, &bt)?;
        let fake_t = pair.g.forward(&mut tape, &gb, xs)?;
        let fake_s = pair.f.forward(&mut tape, &fb, xt)?;
        let (rt, ft) = (d_t.forward(&mut tape, &dtb, xt)?, d_t.forward(&mut tape, &dtb, fake_t)?);
        let (rs, fs) = (d_s.forward(&mut tape, &dsb, xs)?, d_s.forward(&mut tape, &dsb, fake_s)?);
        let (dt_loss, _) = tape_gan_terms(&mut tape, Some(rt), ft, cfg.objective)?;
        let (ds_loss, _) = tape_gan_terms(&mut tape, Some(rs), fs, cfg.objective)?;
        let d_total = tape.add(dt_loss.expect("real given"), ds_loss.expect("real given"))?;
        let d_value = tape.scalar(d_total);
        if !d_value.is_finite() {
            return Err(ReidError::NonFiniteLoss { step, detail: format!("discriminator loss {d_value}") });
        }
        let grads = tape.backward(d_total)?;
        d_s.params.accumulate(&dsb, &grads)?;
        d_t.params.accumulate(&dtb, &grads)?;
        opt[2].step(&mut d_s.params)?;
        opt[3].step(&mut d_t.params)?;

        // Generators against frozen discriminators.
        let mut tape = Tape::new();
        let gb = pair.g.params.bind(&mut tape, true);
        let fb = pair.f.params.bind(&mut tape, true);
        let dsb = d_s.params.bind(&mut tape, false);
        let dtb = d_t.params.bind(&mut tape, false);
        let xs = batch_var(&mut tape, &bs)?;
        let xt = batch_var(&mut tape, &bt)?;
        let fake_t = pair.g.forward(&mut tape, &gb, xs)?;
        let rec_s = pair.f.forward(&mut tape, &fb, fake_t)?;
        let fake_s = pair.f.forward(&mut tape, &fb, xt)?;
        let rec_t = pair.g.forward(&mut tape, &gb, fake_s)?;
        let st = d_t.forward(&mut tape, &dtb, fake_t)?;
        let ss = d_s.forward(&mut tape, &dsb, fake_s)?;
        let (_, gan_st) = tape_gan_terms(&mut tape, None, st, cfg.objective)?;
        let (_, gan_ts) = tape_gan_terms(&mut tape, None, ss, cfg.objective)?;
        let cyc_s = tape_l1(&mut tape, rec_s, xs)?;
        let cyc_t = tape_l1(&mut tape, rec_t, xt)?;
        let cycle = tape.add(cyc_s, cyc_t)?;
        let weighted = tape.scale(cycle, cfg.lambda)?;
        let adv = tape.add(gan_st, gan_ts)?;
        let total = tape.add(adv, weighted)?;
        let losses = CycleLossBreakdown::new(tape.scalar(gan_st), tape.scalar(gan_ts), tape.scalar(cycle), cfg.lambda);
        if !losses.total.is_finite() {
            return Err(ReidError::NonFiniteLoss { step, detail: format!("{losses:?}") });
        }
        let grads = tape.backward(total)?;
        pair.g.params.accumulate(&gb, &grads)?;
        pair.f.params.accumulate(&fb, &grads)?;
        opt[0].step(&mut pair.g.params)?;
        opt[1].step(&mut pair.f.params)?;

        let record = CycleStep { step, d_loss: d_value, losses };
        observe(&record);
        trace.push(record);
    }
    Ok(CycleGanOutcome { pair, d_s, d_t, trace })
}

/// Runs every source image through `g`. Identities and cameras are kept; the
/// domain becomes `adapted`. Target-domain input is refused.
pub fn translate_dataset(g: &Generator, source: &Dataset) -> Result<Dataset> {
    if let Some(s) = source.samples().iter().find(|s| s.domain == DomainTag::Target) {
        return Err(ReidError::HiddenLabels(format!("{} (sample {})", s.domain, s.sample_id)));
    }
    let out = g.translate(&source.images())?;
    let samples: Vec<ImageSample> =
        source.samples().iter().zip(out).map(|(s, px)| s.with_pixels(px, DomainTag::Adapted)).collect();
    Ok(Dataset::new(samples))
}
