//! Two-branch embedding network: a small conv backbone feeding a global
//! (average pooled) branch, a local (horizontal stripe) branch and a linear
//! identity head on the global vector.

pub mod checkpoint;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidapt_autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::synthgen::{Image, CHANNELS};
pub use checkpoint::{CheckpointMeta, CHECKPOINT_VERSION};

/// Stripe rows with a norm below this are scaled by `1/STRIPE_EPS` instead.
pub const STRIPE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub img_height: usize,
    pub img_width: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { img_height: 64, img_width: 32, channels: vec![16, 32, 64], num_classes: 1 }
    }
}

impl NetConfig {
    fn downsample(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// Height `H` of the feature map, i.e. the number of stripes.
    pub fn stripes(&self) -> usize {
        self.img_height / self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsample();
        if self.channels.is_empty() || self.channels.contains(&0) || self.num_classes == 0 {
            return Err(ReidError::InvalidArgument(format!("invalid network config {self:?}")));
        }
        if self.img_height % d != 0 || self.img_width % d != 0 || self.img_height < d || self.img_width < d {
            return Err(ReidError::InvalidArgument(format!(
                "image {}x{} is not divisible by {d}",
                self.img_height, self.img_width
            )));
        }
        Ok(())
    }
}

/// Output of one image: a global vector of length `C` and `H` stripe rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub global: Vec<f64>,
    stripes: Vec<f64>,
    h: usize,
    pub logits: Option<Vec<f64>>,
}

impl Embedding {
    pub fn new(global: Vec<f64>, stripes: Vec<f64>, h: usize, logits: Option<Vec<f64>>) -> Self {
        assert!(h > 0 && stripes.len() % h == 0, "stripe matrix must have {h} rows");
        Self { global, stripes, h, logits }
    }

    pub fn num_stripes(&self) -> usize {
        self.h
    }

    pub fn stripe_dim(&self) -> usize {
        self.stripes.len() / self.h
    }

    /// Flat row-major `H x C` stripe matrix.
    pub fn stripes(&self) -> &[f64] {
        &self.stripes
    }

    pub fn stripe(&self, i: usize) -> &[f64] {
        let c = self.stripe_dim();
        &self.stripes[i * c..(i + 1) * c]
    }

    pub fn global_norm(&self) -> f64 {
        self.global.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Tape handles for one batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    /// `[N, C]`
    pub global: Var,
    /// `[N * H, C]`, rows L2-normalized, image-major.
    pub stripes: Var,
    /// `[N, num_classes]`
    pub logits: Var,
}

/// Global average pooling of a `[N, C, H, W]` map into `[N, C]`.
pub fn global_pool(tape: &mut Tape, fmap: Var) -> Result<Var> {
    let s = tape.shape(fmap).to_vec();
    let flat = tape.reshape(fmap, [s[0], s[1], s[2] * s[3]])?;
    Ok(tape.mean_axis(flat, 2)?)
}

/// Horizontal max pooling of `[N, C, H, W]` into stripes `[N * H, C]`,
/// optionally L2-normalizing every row.
pub fn local_pool(tape: &mut Tape, fmap: Var, normalize: bool) -> Result<Var> {
    let s = tape.shape(fmap).to_vec();
    let rows = tape.max_axis(fmap, 3)?;
    let rows = tape.permute(rows, &[0, 2, 1])?;
    let rows = tape.reshape(rows, [s[0] * s[2], s[1]])?;
    if normalize {
        Ok(tape.l2_normalize_rows(rows, STRIPE_EPS)?)
    } else {
        Ok(rows)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("finite init")
}

#[derive(Debug, Clone)]
pub struct AlignedNet {
    config: NetConfig,
    params: ParamSet,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl AlignedNet {
    /// He-uniform weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = CHANNELS;
        for (i, &cout) in config.channels.iter().enumerate() {
            params.insert(format!("conv{i}.w"), he_uniform(&mut rng, &[cout, cin, 3, 3], cin * 9));
            params.insert(format!("conv{i}.b"), Tensor::zeros([cout]));
            cin = cout;
        }
        let c = config.feature_dim();
        params.insert("head.w", he_uniform(&mut rng, &[c, config.num_classes], c));
        params.insert("head.b", Tensor::zeros([config.num_classes]));
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let find = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = params.id_of(&name).ok_or_else(|| ReidError::InvalidArgument(format!("missing parameter {name}")))?;
            let got = params.get(id).shape().to_vec();
            if got != shape {
                return Err(ReidError::Shape { expected: shape, got });
            }
            Ok(id)
        };
        let mut convs = Vec::new();
        let mut cin = CHANNELS;
        for (i, &cout) in config.channels.iter().enumerate() {
            convs.push((find(format!("conv{i}.w"), vec![cout, cin, 3, 3])?, find(format!("conv{i}.b"), vec![cout])?));
            cin = cout;
        }
        let c = config.feature_dim();
        let head = (
            find("head.w".into(), vec![c, config.num_classes])?,
            find("head.b".into(), vec![config.num_classes])?,
        );
        Ok(Self { config, params, convs, head })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Same backbone with a freshly initialised identity head of `num_classes` outputs.
    pub fn with_new_head(&self, num_classes: usize, seed: u64) -> Result<Self> {
        let config = NetConfig { num_classes, ..self.config.clone() };
        let fresh = AlignedNet::new(config.clone(), seed)?;
        let mut params = ParamSet::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !n.starts_with("head.")) {
            params.insert(name, Tensor::new(t.shape().to_vec(), t.data().to_vec())?);
        }
        for (name, t) in fresh.params.iter().filter(|(n, _)| n.starts_with("head.")) {
            params.insert(name, t.clone());
        }
        Self::from_params(config, params)
    }

    fn input(&self, tape: &mut Tape, images: &[&Image]) -> Result<Var> {
        let (h, w) = (self.config.img_height, self.config.img_width);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(ReidError::Shape { expected: vec![h, w, CHANNELS], got: vec![img.height(), img.width(), CHANNELS] });
            }
            data.extend(img.to_chw());
        }
        Ok(tape.constant([images.len(), CHANNELS, h, w], data)?)
    }

    /// Backbone feature map `[N, C, H, W]`.
    pub fn feature_map(&self, tape: &mut Tape, bound: &Bound, images: &[&Image]) -> Result<Var> {
        if images.is_empty() {
            return Err(ReidError::InvalidArgument("empty image batch".into()));
        }
        let mut x = self.input(tape, images)?;
        for &(w, b) in &self.convs {
            x = tape.conv2d(x, bound.var(w), 1, 1)?;
            x = tape.add_bias(x, bound.var(b))?;
            x = tape.relu(x)?;
            x = tape.max_pool2d(x, 2)?;
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: &[&Image]) -> Result<BranchVars> {
        let fmap = self.feature_map(tape, bound, images)?;
        let global = global_pool(tape, fmap)?;
        let stripes = local_pool(tape, fmap, true)?;
        let logits = tape.matmul(global, bound.var(self.head.0))?;
        let logits = tape.add_bias(logits, bound.var(self.head.1))?;
        Ok(BranchVars { global, stripes, logits })
    }

    /// Inference on a frozen model, in chunks so the tape stays small.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let (c, h) = (self.config.feature_dim(), self.config.stripes());
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let vars = self.forward(&mut tape, &bound, chunk)?;
            let (g, s, l) = (tape.value(vars.global), tape.value(vars.stripes), tape.value(vars.logits));
            for i in 0..chunk.len() {
                out.push(Embedding::new(
                    g[i * c..(i + 1) * c].to_vec(),
                    s[i * h * c..(i + 1) * h * c].to_vec(),
                    h,
                    Some(l[i * k..(i + 1) * k].to_vec()),
                ));
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path, mut meta: CheckpointMeta) -> Result<()> {
        meta.kind = "alignednet".into();
        meta.config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = checkpoint::load(path)?;
        if meta.kind != "alignednet" {
            return Err(ReidError::corrupt(path, format!("checkpoint holds a {:?}, not an alignednet", meta.kind)));
        }
        let config: NetConfig =
            serde_json::from_value(meta.config.clone()).map_err(|e| ReidError::corrupt(path, format!("config: {e}")))?;
        Ok((Self::from_params(config, params)?, meta))
    }

    pub fn params_hash(&self) -> String {
        checkpoint::params_hash(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let net = AlignedNet::new(NetConfig { num_classes: 5, ..NetConfig::default() }, 0).unwrap();
        let img = Image::filled(64, 32, [0.3, 0.6, 0.9]);
        let e = &net.embed(&[&img]).unwrap()[0];
        assert_eq!(e.global.len(), 64);
        assert_eq!((e.num_stripes(), e.stripe_dim()), (8, 64));
        assert_eq!(e.logits.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn zero_image_gives_equal_stripes() {
        let net = AlignedNet::new(NetConfig::default(), 4).unwrap();
        let e = &net.embed(&[&Image::filled(64, 32, [0.0; 3])]).unwrap()[0];
        for i in 1..e.num_stripes() {
            assert_eq!(e.stripe(i), e.stripe(0));
        }
    }

    #[test]
    fn pooling_by_hand() {
        let (c, h, w) = (2, 3, 4);
        let data: Vec<f64> = (0..c * h * w).map(|i| ((i / w) % h) as f64).collect();
        let mut tape = Tape::new();
        let fmap = tape.constant([1, c, h, w], data).unwrap();
        let g = global_pool(&mut tape, fmap).unwrap();
        let s = local_pool(&mut tape, fmap, false).unwrap();
        assert_eq!(tape.value(g), &[1.0, 1.0]);
        assert_eq!(tape.value(s), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let net = AlignedNet::new(NetConfig::default(), 0).unwrap();
        let err = net.embed(&[&Image::filled(32, 32, [0.0; 3])]).unwrap_err();
        assert!(matches!(err, ReidError::Shape { .. }));
    }

    #[test]
    fn new_head_keeps_backbone() {
        let net = AlignedNet::new(NetConfig::default(), 1).unwrap();
        let tuned = net.with_new_head(7, 2).unwrap();
        assert_eq!(tuned.config().num_classes, 7);
        assert_eq!(tuned.params().by_name("conv1.w"), net.params().by_name("conv1.w"));
        let img = Image::filled(64, 32, [0.5; 3]);
        assert_eq!(net.embed(&[&img]).unwrap()[0].global, tuned.embed(&[&img]).unwrap()[0].global);
    }
}
