//! Downstream evaluation, mask-quality metrics and mask-grid export.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqmask_autograd::{Graph, ParamStore, Sgd, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset};
use crate::error::{ensure, Error, Result};
use crate::models::{Encoder, MaskGenerator, MaskSet, Mode, RandomMasker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Affine head on frozen backbone features.
    Linear,
    /// Head and backbone trained together.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub mode: ProbeMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 256,
            epochs: 30,
            weight_decay: 0.0,
            momentum: 0.9,
            mode: ProbeMode::Linear,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Fine-tuning defaults: as the linear probe but with learning rate 0.5.
    pub fn finetune() -> Self {
        Self {
            lr: 0.5,
            mode: ProbeMode::Finetune,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0, "probe lr must be > 0");
        ensure!(self.batch_size >= 1, "probe batch_size must be >= 1");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        ensure!((0.0..1.0).contains(&self.momentum), "probe momentum must be in [0, 1)");
        Ok(())
    }
}

fn check_label_sets(train: &Dataset, test: &Dataset) -> Result<()> {
    ensure!(!train.is_empty() && !test.is_empty(), "probe datasets must be nonempty");
    ensure!(
        train.classes == test.classes,
        "train declares {} classes, test declares {}",
        train.classes,
        test.classes
    );
    for (name, ds) in [("train", train), ("test", test)] {
        if let Some(bad) = ds.items.iter().find(|it| it.label >= ds.classes) {
            return Err(Error::Contract(format!(
                "{name} label {} outside {} classes",
                bad.label, ds.classes
            )));
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the first.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const FEATURE_CHUNK: usize = 128;

/// Evaluation-mode backbone features for every item, `[n, F]`.
pub fn extract_features(enc: &Encoder<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    let f = enc.config().feature_dim();
    let mut data = Vec::with_capacity(ds.len() * f);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(FEATURE_CHUNK) {
        data.extend_from_slice(enc.features(&ds.images(chunk))?.data());
    }
    Ok(Tensor::new([ds.len(), f], data))
}

fn head_store(classes: usize, features: usize) -> ParamStore<f32> {
    let mut head = ParamStore::new();
    head.insert_param("head.weight", Tensor::zeros([classes, features]));
    head.insert_param("head.bias", Tensor::zeros([classes]));
    head
}

fn add_weight_decay(grads: &mut std::collections::BTreeMap<String, Tensor<f32>>, store: &ParamStore<f32>, wd: f64) {
    if wd == 0.0 {
        return;
    }
    for (name, g) in grads.iter_mut() {
        if name.ends_with("weight") {
            let p = store.param(name).expect("gradient for a known parameter");
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv += wd as f32 * pv;
            }
        }
    }
}

fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn predict_with_head(head: &ParamStore<f32>, features: &Tensor<f32>) -> Vec<usize> {
    let w = head.param("head.weight").expect("head weight");
    let b = head.param("head.bias").expect("head bias");
    let (k, f) = (w.shape()[0], w.shape()[1]);
    features
        .data()
        .chunks(f)
        .map(|x| {
            let logits: Vec<f32> = (0..k)
                .map(|c| b.data()[c] + w.data()[c * f..(c + 1) * f].iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
                .collect();
            argmax(&logits)
        })
        .collect()
}

/// Top-1 test accuracy of an affine classifier trained on frozen
/// pre-projection features. The head starts at zero.
pub fn linear_probe(enc: &Encoder<f32>, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    ensure!(cfg.mode == ProbeMode::Linear, "linear_probe needs mode = linear");
    cfg.validate()?;
    check_label_sets(train, test)?;
    let train_x = extract_features(enc, train)?;
    let test_x = extract_features(enc, test)?;
    let head = train_head(&train_x, &train.labels(), train.classes, cfg)?;
    Ok(accuracy(&predict_with_head(&head, &test_x), &test.labels()))
}

/// Minibatch SGD on softmax cross-entropy over fixed features.
pub fn train_head(x: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ParamStore<f32>> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    ensure!(labels.len() == n, "{} labels for {n} feature rows", labels.len());
    let mut head = head_store(classes, f);
    let mut opt = Sgd::new(cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = head.bind(&mut g, true);
            let xb = g.constant(x.select_items(chunk));
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = g.matmul_nt(xb, bound.var("head.weight"));
            let logits = g.add_row_bias(logits, bound.var("head.bias"));
            let ce = g.cross_entropy_rows(logits, &targets, false);
            let loss = g.mean(ce);
            if !g.value(loss).is_finite() {
                return Err(Error::Numeric(format!("probe loss became non-finite in epoch {epoch}")));
            }
            let grads = g.backward(loss);
            let mut grads = head.gradients(&bound, &grads);
            add_weight_decay(&mut grads, &head, cfg.weight_decay);
            opt.step(&mut head, &grads, cfg.lr);
        }
    }
    Ok(head)
}

/// Top-1 test accuracy after training the encoder backbone and an affine
/// head jointly. The encoder passed in is not modified.
pub fn fine_tune(enc: &Encoder<f32>, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let (tuned, head) = fine_tune_model(enc, train, test, cfg)?;
    let test_x = extract_features(&tuned, test)?;
    Ok(accuracy(&predict_with_head(&head, &test_x), &test.labels()))
}

/// Fine-tuned copy of `enc` and its classifier head.
pub fn fine_tune_model(
    enc: &Encoder<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<(Encoder<f32>, ParamStore<f32>)> {
    ensure!(cfg.mode == ProbeMode::Finetune, "fine_tune needs mode = finetune");
    cfg.validate()?;
    check_label_sets(train, test)?;
    ensure!(train.len() >= 2, "fine-tuning needs at least 2 training items");
    let mut enc = enc.clone();
    let mut head = head_store(train.classes, enc.config().feature_dim());
    let (mut enc_opt, mut head_opt) = (Sgd::new(cfg.momentum), Sgd::new(cfg.momentum));
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size.max(2)).collect();
        // Batch norm needs two items per batch; fold a lone trailing item into its neighbour.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
            let n = batches.len();
            let start = (n - 1) * cfg.batch_size.max(2);
            batches[n - 1] = &order[start..];
        }
        for chunk in batches {
            let mut g = Graph::new();
            let eb = enc.params().bind(&mut g, true);
            let hb = head.bind(&mut g, true);
            let x = g.constant(train.images(chunk));
            let pass = enc.forward(&mut g, &eb, x, Mode::Train)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = g.matmul_nt(pass.features, hb.var("head.weight"));
            let logits = g.add_row_bias(logits, hb.var("head.bias"));
            let ce = g.cross_entropy_rows(logits, &targets, false);
            let loss = g.mean(ce);
            if !g.value(loss).is_finite() {
                return Err(Error::Numeric(format!("fine-tune loss became non-finite in epoch {epoch}")));
            }
            let grads = g.backward(loss);
            let mut eg = enc.params().gradients(&eb, &grads);
            let mut hg = head.gradients(&hb, &grads);
            add_weight_decay(&mut eg, enc.params(), cfg.weight_decay);
            add_weight_decay(&mut hg, &head, cfg.weight_decay);
            enc_opt.step(enc.params_mut(), &eg, cfg.lr);
            head_opt.step(&mut head, &hg, cfg.lr);
            enc.update_running_stats(&pass.stats);
        }
    }
    Ok((enc, head))
}

// ---------------------------------------------------------------------------
// mask quality

/// Mask statistics over a dataset with ground-truth object masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub budget_b: f64,
    /// Mean mask value per slot.
    pub slot_means: Vec<f64>,
    /// `|slot mean - b|` per slot.
    pub mean_budget_error: Vec<f64>,
    /// `[j][k]`: mean over images of `(1/HW) sum(m_j * m_k)`; the diagonal is the mean of `m^2`.
    pub pairwise_overlap: Vec<Vec<f64>>,
    /// For every ground-truth object (image-major order), the best IoU over
    /// slots of the 0.5-thresholded mask.
    pub best_match_iou: Vec<f64>,
    /// Per slot: mean over images of the best thresholded IoU against that image's objects.
    pub slot_iou: Vec<f64>,
    /// As `slot_iou` with soft IoU `sum(min) / sum(max)` on the raw mask.
    pub slot_soft_iou: Vec<f64>,
    /// Slots whose mean is below 0.01.
    pub empty_slots: usize,
}

impl MaskReport {
    pub fn n_masks(&self) -> usize {
        self.slot_means.len()
    }

    /// Largest per-slot IoU.
    pub fn best_slot_iou(&self) -> f64 {
        self.slot_iou.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_best_match_iou(&self) -> f64 {
        if self.best_match_iou.is_empty() {
            0.0
        } else {
            self.best_match_iou.iter().sum::<f64>() / self.best_match_iou.len() as f64
        }
    }

    /// Mean of the off-diagonal overlap entries (0 for a single slot).
    pub fn mean_pairwise_overlap(&self) -> f64 {
        let n = self.n_masks();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    total += self.pairwise_overlap[j][k];
                }
            }
        }
        total / (n * (n - 1)) as f64
    }
}

const EMPTY_SLOT_MEAN: f64 = 0.01;
const IOU_THRESHOLD: f32 = 0.5;
const METRIC_CHUNK: usize = 64;

fn hard_iou(mask: &[f32], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &g) in mask.iter().zip(gt) {
        let on = m > IOU_THRESHOLD;
        inter += usize::from(on && g);
        union += usize::from(on || g);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn soft_iou(mask: &[f32], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0.0f64, 0.0f64);
    for (&m, &g) in mask.iter().zip(gt) {
        let g = if g { 1.0 } else { 0.0 };
        inter += (m as f64).min(g);
        union += (m as f64).max(g);
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Score the masks `gen` produces for the unaugmented images of `ds`.
pub fn mask_metrics(gen: &dyn MaskGenerator, ds: &Dataset, b: f64) -> Result<MaskReport> {
    ensure!(!ds.is_empty(), "mask metrics need a nonempty dataset");
    ensure!(b > 0.0 && b < 1.0, "budget must lie in (0, 1), got {b}");
    if let Some(i) = ds.items.iter().position(|it| it.gt_masks.is_none()) {
        return Err(Error::Contract(format!("item {i} carries no ground-truth masks")));
    }
    let n = gen.n_masks();
    let count = ds.len() as f64;
    let mut slot_means = vec![0.0; n];
    let mut overlap = vec![vec![0.0; n]; n];
    let mut best_match = Vec::new();
    let mut slot_iou = vec![0.0; n];
    let mut slot_soft = vec![0.0; n];

    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(METRIC_CHUNK) {
        let set: MaskSet<f32> = gen.generate(&ds.images(chunk))?;
        ensure!(set.len() == n, "generator produced {} masks, declared {n}", set.len());
        let (h, w) = set.dims();
        let hw = (h * w) as f64;
        for (row, &item) in chunk.iter().enumerate() {
            let gts = ds.items[item].gt_masks.as_ref().expect("checked above");
            let slots: Vec<&[f32]> = (0..n).map(|k| set.slot(k).item_slice(row)).collect();
            for gt in gts {
                ensure!(gt.len() == h * w, "ground-truth mask size does not match the mask grid");
            }
            for j in 0..n {
                slot_means[j] += slots[j].iter().map(|&v| v as f64).sum::<f64>() / hw / count;
                for k in j..n {
                    let dot: f64 = slots[j].iter().zip(slots[k]).map(|(&a, &b)| a as f64 * b as f64).sum();
                    overlap[j][k] += dot / hw / count;
                }
                let best = gts.iter().map(|gt| hard_iou(slots[j], gt)).fold(0.0, f64::max);
                slot_iou[j] += best / count;
                let best_soft = gts.iter().map(|gt| soft_iou(slots[j], gt)).fold(0.0, f64::max);
                slot_soft[j] += best_soft / count;
            }
            for gt in gts {
                best_match.push(slots.iter().map(|m| hard_iou(m, gt)).fold(0.0, f64::max));
            }
        }
    }
    for j in 0..n {
        for k in 0..j {
            overlap[j][k] = overlap[k][j];
        }
    }
    Ok(MaskReport {
        budget_b: b,
        mean_budget_error: slot_means.iter().map(|m| (m - b).abs()).collect(),
        empty_slots: slot_means.iter().filter(|&&m| m < EMPTY_SLOT_MEAN).count(),
        slot_means,
        pairwise_overlap: overlap,
        best_match_iou: best_match,
        slot_iou,
        slot_soft_iou: slot_soft,
    })
}

/// Mean per-slot IoU of random binary masks at budget `b`: the chance level
/// a learned slot has to beat.
pub fn random_baseline_iou(ds: &Dataset, n_masks: usize, b: f64, seed: u64) -> Result<f64> {
    let gen = RandomMasker {
        n_masks,
        budget_b: b,
        seed,
    };
    let report = mask_metrics(&gen, ds, b)?;
    Ok(report.slot_iou.iter().sum::<f64>() / n_masks as f64)
}

// ---------------------------------------------------------------------------
// visualization

pub const MAX_GRID_ROWS: usize = 16;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One row per image: the image itself, then each slot's mask in grayscale,
/// panels abutting with no padding.
pub fn render_mask_grid(images: &Tensor<f32>, masks: &MaskSet<f32>) -> Result<RgbImage> {
    ensure!(images.ndim() == 4, "images must be [B, C, H, W]");
    let [b, c, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    ensure!(c == 1 || c == 3, "images must have 1 or 3 channels, got {c}");
    ensure!(b <= MAX_GRID_ROWS, "at most {MAX_GRID_ROWS} images per grid, got {b}");
    ensure!(masks.batch_size() == b && masks.dims() == (h, w), "masks do not match the images");
    let n = masks.len();
    let mut grid = RgbImage::new(((n + 1) * w) as u32, (b * h) as u32);
    for row in 0..b {
        let px = images.item_slice(row);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let rgb = if c == 3 {
                    [to_u8(px[i]), to_u8(px[h * w + i]), to_u8(px[2 * h * w + i])]
                } else {
                    [to_u8(px[i]); 3]
                };
                grid.put_pixel(x as u32, (row * h + y) as u32, Rgb(rgb));
                for k in 0..n {
                    let v = to_u8(masks.slot(k).item_slice(row)[i]);
                    grid.put_pixel(((k + 1) * w + x) as u32, (row * h + y) as u32, Rgb([v; 3]));
                }
            }
        }
    }
    Ok(grid)
}

/// Generate masks for `images` and write the grid as a PNG at `out`.
pub fn visualize_masks(gen: &dyn MaskGenerator, images: &Tensor<f32>, out: &Path) -> Result<RgbImage> {
    ensure!(images.ndim() == 4 && images.shape()[0] <= MAX_GRID_ROWS, "at most {MAX_GRID_ROWS} images per grid");
    let masks = gen.generate(images)?;
    let grid = render_mask_grid(images, &masks)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    grid.save_with_format(out, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out, io),
        other => Error::Image {
            path: out.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    Ok(grid)
}

/// One metric value, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub checkpoint: String,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}
