//! The two adversaries: a convolutional encoder with a linear projection
//! head, and a U-Net masking network with one 1x1 head per mask slot.
//!
//! Parameters live in a [`ParamStore`] keyed by layer path (for example
//! `stage2.bn.weight` or `dec0.reduce.bias`). Forward passes bind the store
//! into a [`Graph`], so the same definitions serve training (f32) and
//! finite-difference checks (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seqmask_autograd::{BatchStats, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::losses::{EmbeddingBatch, Mask};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Hex SHA-256 of the canonical JSON form of a config value.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four stride-2 conv/BN/ReLU stages.
    SmallConv,
    /// Basic-block ResNet-18 layout (stages of 2 blocks each).
    Resnet18Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    /// Channels of the first stage; each later stage doubles it.
    pub width: usize,
    pub projection_dim: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::SmallConv,
            width: 8,
            projection_dim: 64,
            input_channels: 3,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.projection_dim >= 2, "projection_dim must be >= 2");
        ensure!(self.width >= 1, "encoder width must be positive");
        ensure!(self.input_channels >= 1, "input_channels must be positive");
        ensure!(
            self.input_size >= 8 && self.input_size % 8 == 0,
            "input_size must be a positive multiple of 8, got {}",
            self.input_size
        );
        Ok(())
    }

    /// Dimension of the pooled backbone features (pre-projection).
    pub fn feature_dim(&self) -> usize {
        self.width << 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Pixelwise sum of prior masks appended as one extra input channel.
    ChannelConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskerConfig {
    pub n_masks: usize,
    pub base_channels: usize,
    /// Number of U-Net resolution levels.
    pub depth: usize,
    pub conditioning: Conditioning,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self {
            n_masks: 3,
            base_channels: 4,
            depth: 3,
            conditioning: Conditioning::ChannelConcat,
        }
    }
}

impl MaskerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_masks >= 1, "n_masks must be >= 1");
        ensure!(self.depth >= 2, "U-Net depth must be >= 2");
        ensure!(self.base_channels >= 1, "base_channels must be positive");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are reported back.
    Train,
    /// Running statistics.
    Eval,
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer: layer.to_string() })
    }
}

fn check_images<T: Scalar>(images: &Tensor<T>, channels: usize, size: Option<usize>) -> Result<[usize; 4]> {
    ensure!(images.ndim() == 4, "images must be [B, C, H, W], got {:?}", images.shape());
    let s = images.shape();
    ensure!(s[0] >= 1, "empty image batch");
    ensure!(s[1] == channels, "expected {channels} image channels, got {}", s[1]);
    if let Some(size) = size {
        ensure!(s[2] == size && s[3] == size, "expected {size}x{size} images, got {}x{}", s[2], s[3]);
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Output of one encoder forward pass.
pub struct EncoderPass<T> {
    /// Pooled backbone features `[B, F]`.
    pub features: Var,
    /// Projection head output `[B, d]`.
    pub projection: Var,
    /// Batch statistics per normalization layer (train mode only).
    pub stats: Vec<(String, BatchStats<T>)>,
}

/// Convolutional encoder with a single linear projection head.
#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    config: EncoderConfig,
    params: ParamStore<T>,
    pub step: u64,
    pub seed: u64,
}

/// Checkpointable encoder state.
pub type EncoderState = Encoder<f32>;

impl<T: Scalar> Encoder<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_636f_6465_7200);
        let mut params = ParamStore::new();
        let conv_bn = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize| {
            params.insert_param(format!("{name}.conv.weight"), kaiming(rng, &[cout, cin, k, k], cin * k * k));
            params.insert_param(format!("{name}.bn.weight"), Tensor::full([cout], T::one()));
            params.insert_param(format!("{name}.bn.bias"), Tensor::zeros([cout]));
            params.insert_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([cout]));
            params.insert_buffer(format!("{name}.bn.running_var"), Tensor::full([cout], T::one()));
        };
        let w = config.width;
        match config.backbone {
            Backbone::SmallConv => {
                let mut cin = config.input_channels;
                for s in 0..4 {
                    let cout = w << s;
                    conv_bn(&mut params, &mut rng, &format!("stage{s}"), cin, cout, 3);
                    cin = cout;
                }
            }
            Backbone::Resnet18Style => {
                conv_bn(&mut params, &mut rng, "stem", config.input_channels, w, 3);
                let mut cin = w;
                for l in 0..4 {
                    let cout = w << l;
                    for blk in 0..2 {
                        let name = format!("layer{}.{blk}", l + 1);
                        let stride = if l > 0 && blk == 0 { 2 } else { 1 };
                        conv_bn(&mut params, &mut rng, &format!("{name}.a"), cin, cout, 3);
                        conv_bn(&mut params, &mut rng, &format!("{name}.b"), cout, cout, 3);
                        if stride != 1 || cin != cout {
                            conv_bn(&mut params, &mut rng, &format!("{name}.down"), cin, cout, 1);
                        }
                        cin = cout;
                    }
                }
            }
        }
        let f = config.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        params.insert_param("proj.weight", uniform(&mut rng, &[config.projection_dim, f], bound));
        params.insert_param("proj.bias", uniform(&mut rng, &[config.projection_dim], bound));
        Ok(Self {
            config,
            params,
            step: 0,
            seed,
        })
    }

    /// Rebuild from stored tensors; every expected tensor must be present with the right shape.
    pub fn from_params(config: EncoderConfig, params: ParamStore<T>, step: u64, seed: u64) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            config,
            params,
            step,
            seed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
            seed: self.seed,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        name: &str,
        x: Var,
        stride: usize,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Var {
        let w = b.var(&format!("{name}.conv.weight"));
        let k = self.params.param(&format!("{name}.conv.weight")).expect("conv weight").shape()[2];
        let y = g.conv2d(x, w, None, stride, k / 2);
        let gamma = b.var(&format!("{name}.bn.weight"));
        let beta = b.var(&format!("{name}.bn.bias"));
        match mode {
            Mode::Train => {
                let (out, s) = g.batch_norm_train(y, gamma, beta, BN_EPS);
                stats.push((name.to_string(), s));
                out
            }
            Mode::Eval => {
                let rm = self.params.buffer(&format!("{name}.bn.running_mean")).expect("running mean");
                let rv = self.params.buffer(&format!("{name}.bn.running_var")).expect("running var");
                g.batch_norm_eval(y, gamma, beta, rm.data(), rv.data(), BN_EPS)
            }
        }
    }

    /// Forward pass over `x: [B, C, H, W]` with parameters bound by `b`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, mode: Mode) -> Result<EncoderPass<T>> {
        check_images(g.value(x), self.config.input_channels, Some(self.config.input_size))?;
        if mode == Mode::Train {
            ensure!(g.value(x).shape()[0] >= 2, "train-mode batch norm needs B >= 2");
        }
        let mut stats = Vec::new();
        let mut h = x;
        match self.config.backbone {
            Backbone::SmallConv => {
                for s in 0..4 {
                    let name = format!("stage{s}");
                    let y = self.conv_bn(g, b, &name, h, 2, mode, &mut stats);
                    h = g.relu(y);
                    check_finite(g, h, &name)?;
                }
            }
            Backbone::Resnet18Style => {
                let y = self.conv_bn(g, b, "stem", h, 1, mode, &mut stats);
                h = g.relu(y);
                check_finite(g, h, "stem")?;
                for l in 0..4 {
                    for blk in 0..2 {
                        let name = format!("layer{}.{blk}", l + 1);
                        let stride = if l > 0 && blk == 0 { 2 } else { 1 };
                        let a = self.conv_bn(g, b, &format!("{name}.a"), h, stride, mode, &mut stats);
                        let a = g.relu(a);
                        let bb = self.conv_bn(g, b, &format!("{name}.b"), a, 1, mode, &mut stats);
                        let shortcut = if self.params.param(&format!("{name}.down.conv.weight")).is_some() {
                            self.conv_bn(g, b, &format!("{name}.down"), h, stride, mode, &mut stats)
                        } else {
                            h
                        };
                        let sum = g.add(bb, shortcut);
                        h = g.relu(sum);
                        check_finite(g, h, &name)?;
                    }
                }
            }
        }
        let features = g.global_avg_pool(h);
        let z = g.matmul_nt(features, b.var("proj.weight"));
        let projection = g.add_row_bias(z, b.var("proj.bias"));
        check_finite(g, projection, "proj")?;
        Ok(EncoderPass {
            features,
            projection,
            stats,
        })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::from_f64(BN_MOMENTUM);
        for (name, s) in stats {
            let unbias = T::from_f64(s.count as f64 / (s.count as f64 - 1.0));
            if let Some(rm) = self.params.buffer_mut(&format!("{name}.bn.running_mean")) {
                for (r, &v) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
            if let Some(rv) = self.params.buffer_mut(&format!("{name}.bn.running_var")) {
                for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = (T::one() - m) * *r + m * v * unbias;
                }
            }
        }
    }

    fn eval_pass(&self, images: &Tensor<T>) -> Result<(Graph<T>, EncoderPass<T>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, &b, x, Mode::Eval)?;
        Ok((g, pass))
    }

    /// Evaluation-mode projection embeddings `[B, d]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, pass) = self.eval_pass(images)?;
        Ok(g.value(pass.projection).clone())
    }

    /// Evaluation-mode projection embeddings as a contrastive batch (`B >= 2`).
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<EmbeddingBatch<T>> {
        EmbeddingBatch::new(self.encode(images)?)
    }

    /// Evaluation-mode backbone features `[B, F]`, before the projection head.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, pass) = self.eval_pass(images)?;
        Ok(g.value(pass.features).clone())
    }
}

fn check_layout<T: Scalar>(template: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    for (kind, want, have) in [
        ("parameter", template.params(), got.params()),
        ("buffer", template.buffers(), got.buffers()),
    ] {
        for (name, t) in want {
            let Some(h) = have.get(name) else {
                return Err(Error::Contract(format!("missing {kind} `{name}`")));
            };
            ensure!(
                h.shape() == t.shape(),
                "{kind} `{name}` has shape {:?}, expected {:?}",
                h.shape(),
                t.shape()
            );
        }
        if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Contract(format!("unexpected {kind} `{extra}`")));
        }
    }
    if let Some(bad) = got.first_non_finite() {
        return Err(Error::Numeric(format!("tensor `{bad}` holds non-finite values")));
    }
    Ok(())
}

/// An ordered sequence of N mask batches, each `[B, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T = f32> {
    masks: Vec<Tensor<T>>,
}

impl<T: Scalar> MaskSet<T> {
    pub fn new(masks: Vec<Tensor<T>>) -> Result<Self> {
        ensure!(!masks.is_empty(), "a mask set needs at least one mask");
        let shape = masks[0].shape().to_vec();
        ensure!(shape.len() == 3, "mask batches must be [B, H, W], got {shape:?}");
        for m in &masks {
            ensure!(m.shape() == shape.as_slice(), "mask batches differ in shape");
            ensure!(
                m.data().iter().all(|&v| v >= T::zero() && v <= T::one()),
                "mask values must lie in [0, 1]"
            );
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.masks[0].shape()[0]
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.masks[0].shape()[1], self.masks[0].shape()[2])
    }

    /// Mask batch for generation slot `k`.
    pub fn slot(&self, k: usize) -> &Tensor<T> {
        &self.masks[k]
    }

    pub fn slots(&self) -> &[Tensor<T>] {
        &self.masks
    }

    /// Single mask of `item` in slot `k`.
    pub fn mask(&self, k: usize, item: usize) -> Mask {
        let (h, w) = self.dims();
        let values = self.masks[k].item_slice(item).iter().map(|v| v.as_f64()).collect();
        Mask::new(h, w, values).expect("mask set values are validated")
    }

    /// Reorder the batch axis of every slot.
    pub fn select_items(&self, idx: &[usize]) -> Self {
        Self {
            masks: self.masks.iter().map(|m| m.select_items(idx)).collect(),
        }
    }
}

/// Anything that emits N masks per image; implemented by [`Masker`] and by
/// fixed or random generators used for baselines and tests.
pub trait MaskGenerator {
    fn n_masks(&self) -> usize;

    fn generate(&self, images: &Tensor<f32>) -> Result<MaskSet<f32>>;
}

/// Random binary masks, each removing exactly `round(b * H * W)` pixels
/// chosen uniformly without replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomMasker {
    pub n_masks: usize,
    pub budget_b: f64,
    pub seed: u64,
}

impl RandomMasker {
    /// Masks for a `[batch, height, width]` grid drawn from stream `stream`.
    pub fn sample(&self, batch: usize, height: usize, width: usize, stream: u64) -> MaskSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::mix_seed(self.seed, stream));
        let hw = height * width;
        let k = ((self.budget_b * hw as f64).round() as usize).min(hw);
        let masks = (0..self.n_masks)
            .map(|_| {
                let mut data = vec![0f32; batch * hw];
                for item in data.chunks_mut(hw) {
                    for i in rand::seq::index::sample(&mut rng, hw, k) {
                        item[i] = 1.0;
                    }
                }
                Tensor::new([batch, height, width], data)
            })
            .collect();
        MaskSet::new(masks).expect("binary masks are valid")
    }
}

impl MaskGenerator for RandomMasker {
    fn n_masks(&self) -> usize {
        self.n_masks
    }

    fn generate(&self, images: &Tensor<f32>) -> Result<MaskSet<f32>> {
        let [b, _, h, w] = check_images(images, images.shape().get(1).copied().unwrap_or(0), None)?;
        ensure!(self.n_masks >= 1, "n_masks must be >= 1");
        ensure!(self.budget_b > 0.0 && self.budget_b < 1.0, "budget must lie in (0, 1)");
        Ok(self.sample(b, h, w, 0))
    }
}

/// U-Net masking network shared across N slot heads, conditioned on the sum
/// of previously generated masks.
#[derive(Clone, Debug)]
pub struct Masker<T = f32> {
    config: MaskerConfig,
    image_channels: usize,
    params: ParamStore<T>,
    pub step: u64,
    pub seed: u64,
}

/// Checkpointable masker state.
pub type MaskerState = Masker<f32>;

impl<T: Scalar> Masker<T> {
    pub fn init(config: MaskerConfig, image_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(image_channels >= 1, "image_channels must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b_6572_0000);
        let mut params = ParamStore::new();
        let ch = |l: usize| config.base_channels << l;
        let conv = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize| {
            params.insert_param(format!("{name}.weight"), kaiming(rng, &[cout, cin, k, k], cin * k * k));
            params.insert_param(format!("{name}.bias"), Tensor::zeros([cout]));
        };
        let mut cin = image_channels + 1;
        for l in 0..config.depth {
            conv(&mut params, &mut rng, &format!("enc{l}"), cin, ch(l), 3);
            cin = ch(l);
        }
        for l in (0..config.depth - 1).rev() {
            conv(&mut params, &mut rng, &format!("dec{l}.reduce"), ch(l + 1), ch(l), 1);
            conv(&mut params, &mut rng, &format!("dec{l}"), 2 * ch(l), ch(l), 3);
        }
        for k in 0..config.n_masks {
            let bound = 1.0 / (ch(0) as f64).sqrt();
            params.insert_param(format!("head{k}.weight"), uniform(&mut rng, &[1, ch(0), 1, 1], bound));
            params.insert_param(format!("head{k}.bias"), Tensor::zeros([1]));
        }
        Ok(Self {
            config,
            image_channels,
            params,
            step: 0,
            seed,
        })
    }

    pub fn from_params(
        config: MaskerConfig,
        image_channels: usize,
        params: ParamStore<T>,
        step: u64,
        seed: u64,
    ) -> Result<Self> {
        let template = Self::init(config.clone(), image_channels, 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            config,
            image_channels,
            params,
            step,
            seed,
        })
    }

    pub fn config(&self) -> &MaskerConfig {
        &self.config
    }

    pub fn config_hash(&self) -> String {
        config_hash(&(&self.config, self.image_channels))
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn n_masks(&self) -> usize {
        self.config.n_masks
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Masker<U> {
        Masker {
            config: self.config.clone(),
            image_channels: self.image_channels,
            params: self.params.cast(),
            step: self.step,
            seed: self.seed,
        }
    }

    fn conv(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Var {
        let w = b.var(&format!("{name}.weight"));
        let bias = b.var(&format!("{name}.bias"));
        let k = self.params.param(&format!("{name}.weight")).expect("conv weight").shape()[2];
        g.conv2d(x, w, Some(bias), 1, k / 2)
    }

    /// Shared U-Net trunk: `[B, C + 1, H, W] -> [B, base, H, W]`.
    fn trunk(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Var {
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = input;
        for l in 0..self.config.depth {
            if l > 0 {
                h = g.max_pool2(h);
            }
            let y = self.conv(g, b, &format!("enc{l}"), h);
            h = g.relu(y);
            skips.push(h);
        }
        for l in (0..self.config.depth - 1).rev() {
            let reduced = self.conv(g, b, &format!("dec{l}.reduce"), h);
            let up = g.upsample2(reduced);
            let cat = g.concat_channels(&[up, skips[l]]);
            let y = self.conv(g, b, &format!("dec{l}"), cat);
            h = g.relu(y);
        }
        h
    }

    /// Mask for `slot` given the pixelwise sum of prior masks (`None` for the
    /// first slot). `images: [B, C, H, W]`; returns `[B, H, W]` in `(0, 1)`.
    pub fn generate_var(&self, g: &mut Graph<T>, b: &Bound, images: Var, prior_sum: Option<Var>, slot: usize) -> Var {
        let [bn, _, h, w] = <[usize; 4]>::try_from(g.value(images).shape()).expect("4d images");
        let prior = match prior_sum {
            Some(p) => g.reshape(p, &[bn, 1, h, w]),
            None => g.constant(Tensor::zeros([bn, 1, h, w])),
        };
        let input = g.concat_channels(&[images, prior]);
        let feats = self.trunk(g, b, input);
        let logits = self.conv(g, b, &format!("head{slot}"), feats);
        let m = g.sigmoid(logits);
        g.reshape(m, &[bn, h, w])
    }

    /// All N masks in generation order, each conditioned on the previous ones.
    pub fn generate_sequence_var(&self, g: &mut Graph<T>, b: &Bound, images: Var) -> Vec<Var> {
        let mut masks = Vec::with_capacity(self.config.n_masks);
        let mut prior_sum: Option<Var> = None;
        for slot in 0..self.config.n_masks {
            let m = self.generate_var(g, b, images, prior_sum, slot);
            prior_sum = Some(match prior_sum {
                None => m,
                Some(p) => g.add(p, m),
            });
            masks.push(m);
        }
        masks
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = check_images(images, self.image_channels, None)?;
        let f = 1usize << (self.config.depth - 1);
        ensure!(
            dims[2] % f == 0 && dims[3] % f == 0,
            "image size {}x{} is not divisible by {f} (U-Net depth {})",
            dims[2],
            dims[3],
            self.config.depth
        );
        Ok(dims)
    }

    /// Mask batch for `slot`, conditioned on `prior` (exactly `slot` mask batches).
    pub fn generate_mask(&self, images: &Tensor<T>, prior: &[Tensor<T>], slot: usize) -> Result<Tensor<T>> {
        let [bn, _, h, w] = self.check_input(images)?;
        ensure!(slot < self.config.n_masks, "slot {slot} out of range for N = {}", self.config.n_masks);
        ensure!(
            prior.len() == slot,
            "slot {slot} needs exactly {slot} prior masks, got {}",
            prior.len()
        );
        for p in prior {
            ensure!(p.shape() == [bn, h, w], "prior mask shape {:?} != [{bn}, {h}, {w}]", p.shape());
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let prior_sum = if prior.is_empty() {
            None
        } else {
            let vars: Vec<Var> = prior.iter().map(|p| g.constant(p.clone())).collect();
            Some(g.add_n(&vars))
        };
        let m = self.generate_var(&mut g, &b, x, prior_sum, slot);
        check_finite(&g, m, &format!("head{slot}"))?;
        Ok(g.value(m).clone())
    }

    /// All N masks for `images`.
    pub fn generate_mask_sequence(&self, images: &Tensor<T>) -> Result<MaskSet<T>> {
        self.check_input(images)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let vars = self.generate_sequence_var(&mut g, &b, x);
        let mut masks = Vec::with_capacity(vars.len());
        for (k, v) in vars.into_iter().enumerate() {
            check_finite(&g, v, &format!("head{k}"))?;
            masks.push(g.value(v).clone());
        }
        MaskSet::new(masks)
    }
}

impl MaskGenerator for Masker<f32> {
    fn n_masks(&self) -> usize {
        self.config.n_masks
    }

    fn generate(&self, images: &Tensor<f32>) -> Result<MaskSet<f32>> {
        self.generate_mask_sequence(images)
    }
}

/// `x * (1 - m)`: removes the masked fraction of every pixel, broadcast over channels.
pub fn apply_mask<T: Scalar>(images: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    let [bn, _, h, w] = check_images(images, images.shape().get(1).copied().unwrap_or(0), None)?;
    ensure!(
        masks.shape() == [bn, h, w],
        "mask batch shape {:?} does not match images {:?}",
        masks.shape(),
        images.shape()
    );
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let m = g.constant(masks.clone());
    let y = g.apply_mask(x, m);
    Ok(g.value(y).clone())
}
