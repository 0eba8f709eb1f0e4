//! Alternating min-max optimization, the warmup-cosine schedule, run
//! configuration and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use seqmask_autograd::{clip_global_norm, Bound, Graph, ParamStore, Scalar, Sgd, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, load_image_dataset, mix_seed, synthetic_shapes, AugmentationConfig, Dataset};
use crate::error::{ensure, Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::{
    budget_penalty_var, consistency_penalty_var, nt_xent_var, overlap_penalty_var, LossBreakdown, PenaltyWeights,
};
use crate::models::{
    config_hash, Conditioning, Encoder, EncoderConfig, MaskSet, Masker, MaskerConfig, Mode, RandomMasker,
};

/// Telemetry for one optimization step. Serializes as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    pub mask_mean: f64,
    pub mask_pairwise_overlap: f64,
    pub lr_encoder: f64,
    pub lr_masker: f64,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        let b = &self.breakdown;
        [
            b.contrastive,
            b.budget,
            b.overlap,
            b.consistency,
            b.adversary_objective,
            b.encoder_objective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    ensure!(step <= total_steps, "step {step} beyond total_steps {total_steps}");
    ensure!(
        warmup_steps < total_steps,
        "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
    );
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Learned masks, generated one after another.
    Sequential,
    /// Fixed-budget random binary masks; the masker is not trained.
    Random,
    /// Plain SimCLR: no masks.
    None,
}

impl std::str::FromStr for MaskingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            other => Err(format!("unknown masking mode `{other}` (sequential, random, none)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Training items (synthetic only).
    pub count: usize,
    /// Held-out evaluation items (synthetic only).
    pub test_count: usize,
    pub classes: usize,
    /// Image root for manifest datasets; falls back to `SEQMASK_DATA_DIR`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            seed: 0,
            count: 2000,
            test_count: 500,
            classes: 4,
            root: None,
            manifest: None,
            test_manifest: None,
        }
    }
}

/// Environment variable naming the fallback dataset root.
pub const DATA_DIR_ENV: &str = "SEQMASK_DATA_DIR";

impl DatasetSpec {
    fn root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Training split.
    pub fn load_train(&self, size: usize) -> Result<Dataset> {
        match self.kind {
            DatasetKind::Synthetic => synthetic_shapes(self.seed, self.count, size, self.classes),
            DatasetKind::Manifest => {
                let Some(manifest) = &self.manifest else {
                    return Err(Error::Config("dataset.manifest is required for kind = \"manifest\"".into()));
                };
                let root = self.root();
                load_image_dataset(&root, &root.join(manifest), size, self.classes)
            }
        }
    }

    /// Held-out split, if one is configured.
    pub fn load_test(&self, size: usize) -> Result<Option<Dataset>> {
        match self.kind {
            DatasetKind::Synthetic if self.test_count == 0 => Ok(None),
            DatasetKind::Synthetic => {
                synthetic_shapes(mix_seed(self.seed, 0x7e57), self.test_count, size, self.classes).map(Some)
            }
            DatasetKind::Manifest => match &self.test_manifest {
                None => Ok(None),
                Some(m) => {
                    let root = self.root();
                    load_image_dataset(&root, &root.join(m), size, self.classes).map(Some)
                }
            },
        }
    }
}

/// Masker settings other than the slot count, which lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskerSection {
    pub base_channels: usize,
    pub depth: usize,
    pub conditioning: Conditioning,
}

impl Default for MaskerSection {
    fn default() -> Self {
        let m = MaskerConfig::default();
        Self {
            base_channels: m.base_channels,
            depth: m.depth,
            conditioning: m.conditioning,
        }
    }
}

fn default_finetune() -> ProbeConfig {
    ProbeConfig::finetune()
}

/// Keys missing from `[finetune]` fall back to the fine-tuning defaults,
/// not to the linear-probe ones.
fn finetune_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ProbeConfig, D::Error> {
    use serde::de::Error as _;
    let patch = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(ProbeConfig::finetune()).map_err(D::Error::custom)?;
    table.extend(patch);
    table.try_into().map_err(D::Error::custom)
}

/// Full run specification. Every field has a default, so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_masks: usize,
    pub budget_b: f64,
    pub temperature: f64,
    pub budget_weight: f64,
    pub overlap_weight: f64,
    pub consistency_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub masker_lr: f64,
    /// Joint L2 cap on masker gradients; 0 disables clipping.
    pub masker_grad_clip: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub masking: MaskingMode,
    pub dataset: DatasetSpec,
    pub encoder: EncoderConfig,
    pub masker: MaskerSection,
    pub augment: AugmentationConfig,
    pub probe: ProbeConfig,
    #[serde(default = "default_finetune", deserialize_with = "finetune_section")]
    pub finetune: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = PenaltyWeights::default();
        // Penalty weights are tuned for the desk-scale synthetic run: the
        // kernel defaults leave the masker free to cover the whole image or
        // to stack every slot on the same pixels.
        Self {
            n_masks: 3,
            budget_b: w.budget_b,
            temperature: w.temperature_tau,
            budget_weight: 60.0,
            overlap_weight: 10.0,
            consistency_weight: 0.01,
            epochs: 30,
            batch_size: 32,
            encoder_lr: 0.11,
            masker_lr: 0.11,
            masker_grad_clip: 0.1,
            momentum: 0.9,
            warmup_epochs: 10,
            seed: 0,
            masking: MaskingMode::Sequential,
            dataset: DatasetSpec::default(),
            encoder: EncoderConfig::default(),
            masker: MaskerSection::default(),
            augment: AugmentationConfig::default(),
            probe: ProbeConfig::default(),
            finetune: ProbeConfig::finetune(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Effective configuration, every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn penalty_weights(&self) -> PenaltyWeights {
        PenaltyWeights {
            budget_weight: self.budget_weight,
            overlap_weight: self.overlap_weight,
            consistency_weight: self.consistency_weight,
            budget_b: self.budget_b,
            temperature_tau: self.temperature,
        }
    }

    pub fn masker_config(&self) -> MaskerConfig {
        MaskerConfig {
            n_masks: self.n_masks,
            base_channels: self.masker.base_channels,
            depth: self.masker.depth,
            conditioning: self.masker.conditioning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        self.penalty_weights().validate().map_err(invalid)?;
        self.encoder.validate().map_err(invalid)?;
        self.masker_config().validate().map_err(invalid)?;
        self.augment.validate().map_err(invalid)?;
        self.probe.validate().map_err(invalid)?;
        self.finetune.validate().map_err(invalid)?;
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.batch_size >= 2, format!("batch_size must be >= 2, got {}", self.batch_size))?;
        check(self.epochs >= 1, "epochs must be >= 1".into())?;
        check(
            self.warmup_epochs < self.epochs,
            format!("warmup_epochs ({}) must be < epochs ({})", self.warmup_epochs, self.epochs),
        )?;
        check(self.encoder_lr > 0.0, "encoder_lr must be > 0".into())?;
        check(self.masker_lr >= 0.0, "masker_lr must be >= 0".into())?;
        check(self.masker_grad_clip >= 0.0, "masker_grad_clip must be >= 0".into())?;
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)".into())?;
        let f = 1usize << (self.masker.depth - 1);
        check(
            self.encoder.input_size % f == 0,
            format!("input_size {} not divisible by {f} for masker depth {}", self.encoder.input_size, self.masker.depth),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// the loop

/// Where a step's masks come from.
enum MaskSource<'a> {
    Learned,
    Fixed(&'a MaskSet<f32>),
    Unmasked,
}

/// Owns both adversaries and their optimizers; one call to
/// [`Trainer::train_step`] performs one encoder and one masker update.
pub struct Trainer {
    cfg: TrainConfig,
    encoder: Encoder<f32>,
    masker: Masker<f32>,
    enc_opt: Sgd<f32>,
    mask_opt: Sgd<f32>,
    aug: AugmentationConfig,
    random: RandomMasker,
    steps_per_epoch: usize,
    step: u64,
}

impl Trainer {
    /// Fresh seeded states for a training set of `train_len` items.
    pub fn new(cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        ensure!(
            train_len >= cfg.batch_size,
            "dataset of {train_len} items is smaller than batch_size {}",
            cfg.batch_size
        );
        let encoder = Encoder::init(cfg.encoder.clone(), mix_seed(cfg.seed, 1))?;
        let masker = Masker::init(cfg.masker_config(), cfg.encoder.input_channels, mix_seed(cfg.seed, 2))?;
        let aug = AugmentationConfig {
            seed: mix_seed(cfg.seed, cfg.augment.seed),
            ..cfg.augment.clone()
        };
        let random = RandomMasker {
            n_masks: cfg.n_masks,
            budget_b: cfg.budget_b,
            seed: mix_seed(cfg.seed, 3),
        };
        Ok(Self {
            enc_opt: Sgd::new(cfg.momentum),
            mask_opt: Sgd::new(cfg.momentum),
            steps_per_epoch: train_len / cfg.batch_size,
            step: 0,
            cfg,
            encoder,
            masker,
            aug,
            random,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    pub fn masker(&self) -> &Masker<f32> {
        &self.masker
    }

    pub fn into_states(self) -> (Encoder<f32>, Masker<f32>) {
        (self.encoder, self.masker)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    /// `(encoder, masker)` learning rates for `step`.
    pub fn learning_rates(&self, step: u64) -> (f64, f64) {
        let total = self.total_steps();
        let warmup = self.steps_per_epoch * self.cfg.warmup_epochs;
        let s = (step as usize).min(total);
        (
            lr_schedule(s, total, warmup, self.cfg.encoder_lr).expect("validated schedule"),
            lr_schedule(s, total, warmup, self.cfg.masker_lr).expect("validated schedule"),
        )
    }

    /// Shuffled item order for `epoch` (incomplete final batches are dropped).
    pub fn epoch_batches(&self, epoch: usize, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed ^ 0x5eed, epoch as u64)));
        order
            .chunks_exact(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Augmented view pairs `[B, C, H, W]` for the items `idx` in `epoch`.
    pub fn views(&self, ds: &Dataset, idx: &[usize], epoch: usize) -> (Tensor<f32>, Tensor<f32>) {
        let (a, b): (Vec<_>, Vec<_>) = idx
            .iter()
            .map(|&i| augment_pair(&ds.items[i], &self.aug, mix_seed(epoch as u64, i as u64)))
            .unzip();
        (Tensor::stack(&a), Tensor::stack(&b))
    }

    /// Train for the configured number of epochs, reporting each step.
    pub fn run(&mut self, ds: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        ensure!(
            ds.len() >= self.cfg.batch_size,
            "dataset of {} items is smaller than batch_size {}",
            ds.len(),
            self.cfg.batch_size
        );
        let size = self.cfg.encoder.input_size;
        for (i, item) in ds.items.iter().enumerate() {
            ensure!(
                item.pixels.shape() == [self.cfg.encoder.input_channels, size, size],
                "item {i} has shape {:?}, encoder expects [{}, {size}, {size}]",
                item.pixels.shape(),
                self.cfg.encoder.input_channels
            );
        }
        let mut records = Vec::with_capacity(self.total_steps());
        for epoch in 0..self.cfg.epochs {
            for idx in self.epoch_batches(epoch, ds.len()) {
                let (xa, xb) = self.views(ds, &idx, epoch);
                let rec = self.train_step(&xa, &xb)?;
                on_step(&rec);
                records.push(rec);
            }
        }
        Ok(records)
    }

    /// One encoder update and (in sequential mode) one masker update on the
    /// view batches `xa` (unmasked branch) and `xb` (masked branch).
    pub fn train_step(&mut self, xa: &Tensor<f32>, xb: &Tensor<f32>) -> Result<StepRecord> {
        match self.cfg.masking {
            MaskingMode::Sequential => self.step_inner(xa, xb, MaskSource::Learned),
            MaskingMode::Random => {
                let s = xb.shape();
                let masks = self.random.sample(s[0], s[2], s[3], self.step);
                self.step_inner(xa, xb, MaskSource::Fixed(&masks))
            }
            MaskingMode::None => self.step_inner(xa, xb, MaskSource::Unmasked),
        }
    }

    /// Encoder update against externally supplied masks; the masker is left untouched.
    pub fn train_step_with_masks(&mut self, xa: &Tensor<f32>, xb: &Tensor<f32>, masks: &MaskSet<f32>) -> Result<StepRecord> {
        let s = xb.shape();
        ensure!(
            masks.batch_size() == s[0] && masks.dims() == (s[2], s[3]),
            "mask set does not match the view batch"
        );
        self.step_inner(xa, xb, MaskSource::Fixed(masks))
    }

    fn step_inner(&mut self, xa: &Tensor<f32>, xb: &Tensor<f32>, source: MaskSource) -> Result<StepRecord> {
        ensure!(xa.shape() == xb.shape(), "view batches differ in shape");
        let w = self.cfg.penalty_weights();
        let (lr_e, lr_m) = self.learning_rates(self.step);
        let train_masker = matches!(source, MaskSource::Learned) && self.cfg.masker_lr > 0.0;

        let mut g = Graph::<f32>::new();
        let xa_v = g.constant(xa.clone());
        let xb_v = g.constant(xb.clone());

        let mut masker_bound = None;
        let masks: Vec<Var> = match source {
            MaskSource::Learned => {
                let mb = self.masker.params().bind(&mut g, train_masker);
                let m = self.masker.generate_sequence_var(&mut g, &mb, xb_v);
                masker_bound = Some(mb);
                m
            }
            MaskSource::Fixed(set) => set.slots().iter().map(|m| g.constant(m.clone())).collect(),
            MaskSource::Unmasked => Vec::new(),
        };

        let penalties = slot_penalties_var(&mut g, &masks, &w);

        // Encoder step: masks are constants.
        let eb = self.encoder.params().bind(&mut g, true);
        let pa = self.encoder.forward(&mut g, &eb, xa_v, Mode::Train)?;
        let mut stats = pa.stats;
        let mut contrastive = Vec::with_capacity(masks.len().max(1));
        if masks.is_empty() {
            let pb = self.encoder.forward(&mut g, &eb, xb_v, Mode::Train)?;
            stats.extend(pb.stats);
            contrastive.push(nt_xent_var(&mut g, pa.projection, pb.projection, w.temperature_tau));
        }
        for &m in &masks {
            let frozen = g.detach(m);
            let view = g.apply_mask(xb_v, frozen);
            let pb = self.encoder.forward(&mut g, &eb, view, Mode::Train)?;
            stats.extend(pb.stats);
            contrastive.push(nt_xent_var(&mut g, pa.projection, pb.projection, w.temperature_tau));
        }
        let n = contrastive.len() as f64;
        let total = g.add_n(&contrastive);
        let enc_loss = g.scale(total, 1.0 / n);

        let record = self.record(&g, &masks, &contrastive, &penalties, &w, lr_e, if train_masker { lr_m } else { 0.0 });
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                record: Box::new(record),
            });
        }

        let grads = g.backward(enc_loss);
        let enc_grads = self.encoder.params().gradients(&eb, &grads);
        drop(grads);
        self.enc_opt.step(self.encoder.params_mut(), &enc_grads, lr_e);
        self.encoder.update_running_stats(&stats);
        self.encoder.step += 1;

        // Masker step: fresh encoder forward with the updated, frozen encoder.
        if let (true, Some(mb)) = (train_masker, masker_bound) {
            let eb2 = self.encoder.params().bind(&mut g, false);
            let objective = adversary_objective_var(&mut g, &self.encoder, &eb2, xa_v, xb_v, &masks, &penalties, &w)?;
            // Ascent on the adversary objective is descent on its negation.
            let loss = g.scale(objective, -1.0);
            ensure_finite_scalar(&g, loss, &record)?;
            let grads = g.backward(loss);
            let mut mask_grads = self.masker.params().gradients(&mb, &grads);
            if self.cfg.masker_grad_clip > 0.0 {
                clip_global_norm(&mut mask_grads, self.cfg.masker_grad_clip);
            }
            self.mask_opt.step(self.masker.params_mut(), &mask_grads, lr_m);
            self.masker.step += 1;
        }
        self.step += 1;
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        g: &Graph<f32>,
        masks: &[Var],
        contrastive: &[Var],
        penalties: &[(Var, Var, Var)],
        w: &PenaltyWeights,
        lr_encoder: f64,
        lr_masker: f64,
    ) -> StepRecord {
        let val = |v: Var| g.value(v).item() as f64;
        let n = contrastive.len() as f64;
        let c_mean = contrastive.iter().map(|&v| val(v)).sum::<f64>() / n;
        let (mut budget, mut overlap, mut consistency) = (0.0, 0.0, 0.0);
        for &(b, o, c) in penalties {
            budget += val(b) / n;
            overlap += val(o) / n;
            consistency += val(c) / n;
        }
        let adversary_objective =
            c_mean - w.budget_weight * budget - w.overlap_weight * overlap - w.consistency_weight * consistency;
        let tensors: Vec<&Tensor<f32>> = masks.iter().map(|&m| g.value(m)).collect();
        let (mask_mean, mask_pairwise_overlap) = mask_summary(&tensors);
        StepRecord {
            step: self.step,
            breakdown: LossBreakdown {
                contrastive: c_mean,
                budget,
                overlap,
                consistency,
                adversary_objective,
                encoder_objective: c_mean,
            },
            mask_mean,
            mask_pairwise_overlap,
            lr_encoder,
            lr_masker,
        }
    }
}

/// Budget, overlap and consistency terms per slot, in generation order.
/// The overlap term of each slot sees the sum of the slots before it.
pub fn slot_penalties_var<T: Scalar>(g: &mut Graph<T>, masks: &[Var], w: &PenaltyWeights) -> Vec<(Var, Var, Var)> {
    let mut penalties = Vec::with_capacity(masks.len());
    let mut prior: Option<Var> = None;
    for &m in masks {
        let budget = budget_penalty_var(g, m, w.budget_b);
        let overlap = overlap_penalty_var(g, m, prior);
        let consistency = consistency_penalty_var(g, m);
        penalties.push((budget, overlap, consistency));
        prior = Some(match prior {
            None => m,
            Some(p) => g.add(p, m),
        });
    }
    penalties
}

/// The masker's maximized objective as a scalar node: mean over slots of the
/// masked contrastive loss minus the weighted penalties. The encoder runs in
/// train mode under `eb`; gradients reach whatever `masks` depend on.
#[allow(clippy::too_many_arguments)]
pub fn adversary_objective_var<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    eb: &Bound,
    xa: Var,
    xb: Var,
    masks: &[Var],
    penalties: &[(Var, Var, Var)],
    w: &PenaltyWeights,
) -> Result<Var> {
    ensure!(!masks.is_empty(), "adversary objective needs at least one mask");
    ensure!(masks.len() == penalties.len(), "one penalty triple per mask");
    let pa = encoder.forward(g, eb, xa, Mode::Train)?;
    let mut terms = Vec::with_capacity(masks.len());
    for (&m, &(budget, overlap, consistency)) in masks.iter().zip(penalties) {
        let view = g.apply_mask(xb, m);
        let pb = encoder.forward(g, eb, view, Mode::Train)?;
        let c = nt_xent_var(g, pa.projection, pb.projection, w.temperature_tau);
        let wb = g.scale(budget, w.budget_weight);
        let wo = g.scale(overlap, w.overlap_weight);
        let wc = g.scale(consistency, w.consistency_weight);
        let pen = g.add_n(&[wb, wo, wc]);
        terms.push(g.sub(c, pen));
    }
    let sum = g.add_n(&terms);
    Ok(g.scale(sum, 1.0 / masks.len() as f64))
}

fn ensure_finite_scalar(g: &Graph<f32>, v: Var, record: &StepRecord) -> Result<()> {
    if g.value(v).item().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            record: Box::new(record.clone()),
        })
    }
}

/// Mean mask value, and mean over distinct slot pairs of the per-pixel
/// normalized dot product. Both are 0 without masks.
fn mask_summary(masks: &[&Tensor<f32>]) -> (f64, f64) {
    if masks.is_empty() {
        return (0.0, 0.0);
    }
    let mean = masks.iter().map(|m| m.mean() as f64).sum::<f64>() / masks.len() as f64;
    let mut pairs = 0usize;
    let mut total = 0.0;
    for j in 0..masks.len() {
        for k in j + 1..masks.len() {
            let dot: f64 = masks[j]
                .data()
                .iter()
                .zip(masks[k].data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            total += dot / masks[j].numel() as f64;
            pairs += 1;
        }
    }
    (mean, if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Build the training set from `cfg.dataset` and run [`Trainer::run`].
pub fn pretrain(cfg: &TrainConfig) -> Result<(Encoder<f32>, Masker<f32>, Vec<StepRecord>)> {
    let ds = cfg.dataset.load_train(cfg.encoder.input_size)?;
    pretrain_on(cfg, &ds, |_| {})
}

/// [`pretrain`] on an already materialized dataset.
pub fn pretrain_on(
    cfg: &TrainConfig,
    ds: &Dataset,
    on_step: impl FnMut(&StepRecord),
) -> Result<(Encoder<f32>, Masker<f32>, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(cfg.clone(), ds.len())?;
    let records = trainer.run(ds, on_step)?;
    let (enc, masker) = trainer.into_states();
    Ok((enc, masker, records))
}

/// One JSON object per line, fields in the fixed telemetry order.
pub fn telemetry_line(r: &StepRecord) -> String {
    serde_json::to_string(r).expect("step records serialize")
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

/// Both adversaries plus the configuration that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: Encoder<f32>,
    pub masker: Masker<f32>,
    pub step: u64,
}

impl Checkpoint {
    /// Fails with a hash mismatch unless `cfg` is the config stored in the checkpoint.
    pub fn ensure_config(&self, cfg: &TrainConfig) -> Result<()> {
        let (found, expected) = (self.config.hash(), cfg.hash());
        if found == expected {
            Ok(())
        } else {
            Err(Error::HashMismatch { found, expected })
        }
    }
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes a safetensors file. Tensor names are `encoder/param/<path>`,
/// `encoder/buffer/<path>` and `masker/param/<path>`; the header metadata
/// carries `format_version`, `config` (TOML), `config_hash`, `step`, `seed`,
/// `encoder_config_hash`, `masker_config_hash`, `encoder_step` and `masker_step`.
pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    encoder: &Encoder<f32>,
    masker: &Masker<f32>,
    step: u64,
) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, store) in [("encoder", encoder.params()), ("masker", masker.params())] {
        for (name, t) in store.params() {
            named.push((format!("{prefix}/param/{name}"), t.shape().to_vec(), le_bytes(t)));
        }
        for (name, t) in store.buffers() {
            named.push((format!("{prefix}/buffer/{name}"), t.shape().to_vec(), le_bytes(t)));
        }
    }
    let views = named
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Numeric(format!("cannot lay out checkpoint tensors: {e}")))?;
    let meta = HashMap::from([
        ("format_version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), cfg.to_toml()),
        ("config_hash".to_string(), cfg.hash()),
        ("step".to_string(), step.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("encoder_config_hash".to_string(), encoder.config_hash()),
        ("masker_config_hash".to_string(), masker.config_hash()),
        ("encoder_step".to_string(), encoder.step.to_string()),
        ("masker_step".to_string(), masker.step.to_string()),
    ]);
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Numeric(format!("cannot serialize checkpoint: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        message,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).ok_or_else(|| corrupt(format!("missing metadata `{k}`")));
    let number = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| corrupt(format!("metadata `{k}` is not an integer")))
    };

    let version = field("format_version")?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version.clone(),
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: TrainConfig = toml::from_str(field("config")?).map_err(|e| corrupt(format!("bad config: {e}")))?;
    let stored = field("config_hash")?.clone();
    if stored != config.hash() {
        return Err(Error::HashMismatch {
            found: stored,
            expected: config.hash(),
        });
    }

    let mut stores = [ParamStore::<f32>::new(), ParamStore::<f32>::new()];
    for (name, view) in st.iter() {
        if view.dtype() != Dtype::F32 {
            return Err(corrupt(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(view.shape().to_vec(), data);
        let (which, rest) = if let Some(r) = name.strip_prefix("encoder/") {
            (0, r)
        } else if let Some(r) = name.strip_prefix("masker/") {
            (1, r)
        } else {
            return Err(corrupt(format!("unexpected tensor `{name}`")));
        };
        if let Some(p) = rest.strip_prefix("param/") {
            stores[which].insert_param(p, t);
        } else if let Some(b) = rest.strip_prefix("buffer/") {
            stores[which].insert_buffer(b, t);
        } else {
            return Err(corrupt(format!("unexpected tensor `{name}`")));
        }
    }
    let [enc_store, mask_store] = stores;
    let seed = number("seed")?;
    let encoder = Encoder::from_params(config.encoder.clone(), enc_store, number("encoder_step")?, mix_seed(seed, 1))
        .map_err(|e| corrupt(e.to_string()))?;
    let masker = Masker::from_params(
        config.masker_config(),
        config.encoder.input_channels,
        mask_store,
        number("masker_step")?,
        mix_seed(seed, 2),
    )
    .map_err(|e| corrupt(e.to_string()))?;
    for (key, actual) in [
        ("encoder_config_hash", encoder.config_hash()),
        ("masker_config_hash", masker.config_hash()),
    ] {
        let found = field(key)?.clone();
        if found != actual {
            return Err(Error::HashMismatch { found, expected: actual });
        }
    }
    Ok(Checkpoint {
        config,
        encoder,
        masker,
        step: number("step")?,
    })
}
