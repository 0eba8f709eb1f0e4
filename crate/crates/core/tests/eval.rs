//! Probes, mask metrics and the mask grid.

use seqmask::data::{synthetic_shapes, Dataset};
use seqmask::eval::{
    extract_features, fine_tune, fine_tune_model, linear_probe, mask_metrics, random_baseline_iou, render_mask_grid,
    visualize_masks, ProbeConfig,
};
use seqmask::models::{Encoder, EncoderConfig, MaskGenerator, MaskSet, Masker, MaskerConfig, RandomMasker};
use seqmask::{Error, Result};
use seqmask_autograd::Tensor;

fn tiny_encoder(seed: u64) -> Encoder<f32> {
    let cfg = EncoderConfig {
        width: 4,
        projection_dim: 8,
        input_size: 32,
        ..EncoderConfig::default()
    };
    Encoder::init(cfg, seed).unwrap()
}

fn majority_fraction(ds: &Dataset) -> f64 {
    let mut counts = vec![0usize; ds.classes];
    for l in ds.labels() {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap() as f64 / ds.len() as f64
}

#[test]
fn probe_memorizes_a_single_example() {
    let ds = synthetic_shapes(1, 1, 32, 2).unwrap();
    let cfg = ProbeConfig { epochs: 50, ..ProbeConfig::default() };
    assert_eq!(linear_probe(&tiny_encoder(0), &ds, &ds, &cfg).unwrap(), 1.0);
}

#[test]
fn constant_encoder_predicts_the_majority_class() {
    let mut enc = tiny_encoder(0);
    let names: Vec<String> = enc.params().params().keys().cloned().collect();
    for n in names {
        enc.params_mut().param_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let ds = synthetic_shapes(2, 40, 32, 3).unwrap();
    let feats = extract_features(&enc, &ds).unwrap();
    assert!(feats.data().iter().all(|&v| v == 0.0));
    let cfg = ProbeConfig { epochs: 20, ..ProbeConfig::default() };
    let acc = linear_probe(&enc, &ds, &ds, &cfg).unwrap();
    assert!((acc - majority_fraction(&ds)).abs() < 1e-12, "acc {acc}");
}

#[test]
fn probe_leaves_the_encoder_untouched() {
    let enc = tiny_encoder(3);
    let copy = enc.clone();
    let ds = synthetic_shapes(3, 20, 32, 2).unwrap();
    let cfg = ProbeConfig { epochs: 3, ..ProbeConfig::default() };
    linear_probe(&enc, &ds, &ds, &cfg).unwrap();
    fine_tune(&enc, &ds, &ds, &ProbeConfig { epochs: 2, ..ProbeConfig::finetune() }).unwrap();
    assert!(enc.params().bitwise_eq(copy.params()));
}

#[test]
fn random_encoder_is_near_chance_on_two_classes() {
    let train = synthetic_shapes(10, 200, 32, 2).unwrap();
    let test = synthetic_shapes(11, 100, 32, 2).unwrap();
    let cfg = ProbeConfig { epochs: 10, ..ProbeConfig::default() };
    let mean = (0..3).map(|s| linear_probe(&tiny_encoder(s), &train, &test, &cfg).unwrap()).sum::<f64>() / 3.0;
    assert!((0.3..=0.7).contains(&mean), "mean accuracy {mean}");
}

#[test]
fn zero_epoch_fine_tune_is_the_head_init() {
    let ds = synthetic_shapes(4, 30, 32, 3).unwrap();
    let cfg = ProbeConfig { epochs: 0, ..ProbeConfig::finetune() };
    let (enc, _head) = fine_tune_model(&tiny_encoder(1), &ds, &ds, &cfg).unwrap();
    assert!(enc.params().bitwise_eq(tiny_encoder(1).params()));
    // a zero head scores every class equally; ties resolve to class 0
    let acc = fine_tune(&tiny_encoder(1), &ds, &ds, &cfg).unwrap();
    let class0 = ds.labels().iter().filter(|&&l| l == 0).count() as f64 / ds.len() as f64;
    assert!((acc - class0).abs() < 1e-12);
}

#[test]
fn fine_tune_fits_a_single_batch() {
    let ds = synthetic_shapes(5, 16, 32, 2).unwrap();
    let cfg = ProbeConfig { epochs: 60, batch_size: 16, ..ProbeConfig::finetune() };
    assert_eq!(fine_tune(&tiny_encoder(2), &ds, &ds, &cfg).unwrap(), 1.0);
}

#[test]
fn probe_rejects_label_set_mismatch() {
    let a = synthetic_shapes(6, 10, 32, 2).unwrap();
    let b = synthetic_shapes(6, 10, 32, 3).unwrap();
    assert!(matches!(
        linear_probe(&tiny_encoder(0), &a, &b, &ProbeConfig::default()),
        Err(Error::Contract(_))
    ));
}

/// Emits each image's ground-truth objects as binary masks, in a chosen slot order.
struct GroundTruth<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
}

impl MaskGenerator for GroundTruth<'_> {
    fn n_masks(&self) -> usize {
        self.order.len()
    }

    fn generate(&self, images: &Tensor<f32>) -> Result<MaskSet<f32>> {
        let (b, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
        // the metric passes images in dataset order, in chunks; match by content
        let idx: Vec<usize> = (0..b)
            .map(|r| {
                self.ds
                    .items
                    .iter()
                    .position(|it| it.pixels.data() == images.item_slice(r))
                    .unwrap()
            })
            .collect();
        let slots = self
            .order
            .iter()
            .map(|&k| {
                Tensor::from_fn([b, h, w], |i| {
                    let (row, px) = (i / (h * w), i % (h * w));
                    let gts = self.ds.items[idx[row]].gt_masks.as_ref().unwrap();
                    gts.get(k).map_or(0.0, |m| if m[px] { 1.0 } else { 0.0 })
                })
            })
            .collect();
        MaskSet::new(slots)
    }
}

#[test]
fn ground_truth_masks_score_one_in_any_slot_order() {
    let ds = synthetic_shapes(7, 12, 32, 8).unwrap();
    let max_objects = ds.items.iter().map(|it| it.gt_masks.as_ref().unwrap().len()).max().unwrap();
    let forward: Vec<usize> = (0..max_objects).collect();
    let backward: Vec<usize> = forward.iter().rev().copied().collect();
    let a = mask_metrics(&GroundTruth { ds: &ds, order: forward }, &ds, 0.25).unwrap();
    let b = mask_metrics(&GroundTruth { ds: &ds, order: backward }, &ds, 0.25).unwrap();
    assert!(a.best_match_iou.iter().all(|&v| v == 1.0));
    assert_eq!(a.best_match_iou, b.best_match_iou);
    let reversed: Vec<f64> = b.slot_means.iter().rev().copied().collect();
    assert_eq!(a.slot_means, reversed);
}

#[test]
fn report_invariants_for_a_random_init_masker() {
    let ds = synthetic_shapes(8, 20, 32, 4).unwrap();
    let cfg = MaskerConfig { n_masks: 3, base_channels: 4, depth: 2, ..MaskerConfig::default() };
    let masker = Masker::<f32>::init(cfg, 3, 9).unwrap();
    let r = mask_metrics(&masker, &ds, 0.25).unwrap();
    assert_eq!(r.n_masks(), 3);
    for j in 0..3 {
        for k in 0..3 {
            assert!(r.pairwise_overlap[j][k] > 0.0);
            assert_eq!(r.pairwise_overlap[j][k], r.pairwise_overlap[k][j]);
        }
    }
    // the diagonal is the mean squared mask value
    let set = masker.generate(&ds.images(&(0..20).collect::<Vec<_>>())).unwrap();
    for k in 0..3 {
        let msq = set.slot(k).data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / set.slot(k).numel() as f64;
        assert!((r.pairwise_overlap[k][k] - msq).abs() < 1e-9);
    }
    assert!(r.best_match_iou.iter().chain(&r.slot_iou).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn random_baseline_is_small_and_seeded() {
    let ds = synthetic_shapes(9, 50, 32, 4).unwrap();
    let a = random_baseline_iou(&ds, 3, 0.25, 1).unwrap();
    assert_eq!(a, random_baseline_iou(&ds, 3, 0.25, 1).unwrap());
    assert!(a > 0.0 && a < 0.3, "{a}");
    let r = mask_metrics(&RandomMasker { n_masks: 3, budget_b: 0.25, seed: 1 }, &ds, 0.25).unwrap();
    assert!(r.mean_budget_error.iter().all(|&e| e < 1e-9));
}

#[test]
fn grid_has_one_row_per_image_and_round_trips() {
    let ds = synthetic_shapes(10, 8, 32, 4).unwrap();
    let images = ds.images(&(0..8).collect::<Vec<_>>());
    let cfg = MaskerConfig { n_masks: 4, base_channels: 4, depth: 2, ..MaskerConfig::default() };
    let masker = Masker::<f32>::init(cfg, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    visualize_masks(&masker, &images, &path).unwrap();
    let read = image::open(&path).unwrap().to_rgb8();
    assert_eq!(read.dimensions(), (5 * 32, 8 * 32));
    let masks = masker.generate(&images).unwrap();
    for row in 0..8 {
        for k in 0..4 {
            let m = masks.slot(k).item_slice(row);
            for y in 0..32 {
                for x in 0..32 {
                    let p = read.get_pixel(((k + 1) * 32 + x) as u32, (row * 32 + y) as u32).0;
                    let err = (p[0] as f32 / 255.0 - m[y * 32 + x]).abs();
                    assert!(err <= 1.0 / 255.0, "row {row} slot {k}");
                    assert!(p[0] == p[1] && p[1] == p[2]);
                }
            }
        }
    }
    // original image leftmost
    let px = images.item_slice(3);
    let p = read.get_pixel(7, 3 * 32 + 2).0;
    assert_eq!(p[2], (px[2 * 1024 + 2 * 32 + 7] * 255.0).round() as u8);

    let one = render_mask_grid(&ds.images(&[0]), &MaskSet::new(vec![Tensor::zeros([1, 32, 32]); 3]).unwrap()).unwrap();
    assert_eq!(one.dimensions(), (4 * 32, 32));
    assert!((32..128).all(|x| (0..32).all(|y| one.get_pixel(x, y).0 == [0, 0, 0])));
}

#[test]
fn grid_errors() {
    let ds = synthetic_shapes(10, 17, 32, 4).unwrap();
    let masker = Masker::<f32>::init(MaskerConfig { depth: 2, base_channels: 2, ..MaskerConfig::default() }, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let all: Vec<usize> = (0..17).collect();
    assert!(matches!(
        visualize_masks(&masker, &ds.images(&all), &dir.path().join("big.png")),
        Err(Error::Contract(_))
    ));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let bad = blocker.join("grid.png");
    assert!(visualize_masks(&masker, &ds.images(&[0]), &bad).is_err());
}
