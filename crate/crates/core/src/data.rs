//! Datasets and the two-view augmentation pipeline.
//!
//! The synthetic shapes generator places 1-3 disjoint filled shapes on a
//! textured background and keeps one binary mask per shape, so learned
//! masks can be scored against real object boundaries.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqmask_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// One image in `[0, 1]`, `[C, H, W]`, with an optional per-object mask list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Binary `H * W` object masks, pairwise disjoint.
    pub gt_masks: Option<Vec<Vec<bool>>>,
}

impl LabeledImage {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Unaugmented images `[B, C, H, W]` for the given item indices.
    pub fn images(&self, idx: &[usize]) -> Tensor<f32> {
        let views: Vec<Tensor<f32>> = idx.iter().map(|&i| self.items[i].pixels.clone()).collect();
        Tensor::stack(&views)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// First `n` items and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.items.len());
        let rest = self.items.split_off(n);
        let classes = self.classes;
        (
            self,
            Dataset {
                items: rest,
                classes,
            },
        )
    }
}

/// splitmix64 finalizer; used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// synthetic shapes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

use Shape::{Circle, Square, Triangle};

/// Shape combination defining each class, in class-id order.
const CLASS_COMBOS: [&[Shape]; 8] = [
    &[Circle],
    &[Square],
    &[Circle, Triangle],
    &[Square, Triangle],
    &[Triangle],
    &[Circle, Square],
    &[Circle, Square, Triangle],
    &[Triangle, Triangle],
];

const PLACEMENT_TRIES: usize = 50;

fn rasterize(shape: Shape, size: usize, cx: f64, cy: f64, extent: f64, flip: bool) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            mask[y * size + x] = match shape {
                Circle => px * px + py * py <= extent * extent,
                Square => px.abs() <= extent && py.abs() <= extent,
                Triangle => {
                    // Isosceles, base 2 * extent, height 2 * extent, apex up or down.
                    let t = if flip { -py } else { py };
                    let rel = (t + extent) / (2.0 * extent);
                    (0.0..=1.0).contains(&rel) && px.abs() <= extent * rel
                }
            };
        }
    }
    mask
}

/// Half-extent giving the shape an area of `frac * size^2`.
fn extent_for(shape: Shape, size: usize, frac: f64) -> f64 {
    let area = frac * (size * size) as f64;
    match shape {
        Circle => (area / std::f64::consts::PI).sqrt(),
        Square => area.sqrt() / 2.0,
        Triangle => (area / 2.0).sqrt(),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// One attempt at an image; `None` if some shape could not be placed.
fn try_render(rng: &mut ChaCha8Rng, size: usize, combo: &[Shape]) -> Option<(Tensor<f32>, Vec<Vec<bool>>)> {
    let base = random_color(rng);
    let freq = [rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)];
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pixels = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let wave = (0.12 * (freq[0] * x as f64 + freq[1] * y as f64 + phase).sin()) as f32;
            for c in 0..3 {
                let noise = rng.random_range(-0.04f32..0.04);
                pixels[(c * size + y) * size + x] = (base[c] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(combo.len());
    let mut occupied = vec![false; size * size];
    for &shape in combo {
        let frac = rng.random_range(0.06..0.15);
        let extent = extent_for(shape, size, frac);
        let flip = rng.random_bool(0.5);
        let lo = extent + 1.0;
        let hi = size as f64 - extent - 1.0;
        if hi <= lo {
            return None;
        }
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            let m = rasterize(shape, size, cx, cy, extent, flip);
            let clash = m.iter().zip(&occupied).any(|(&a, &b)| a && b);
            (!clash && m.iter().any(|&v| v)).then_some(m)
        })?;
        let mut color = random_color(rng);
        for _ in 0..20 {
            if color_distance(color, base) >= 0.35 {
                break;
            }
            color = random_color(rng);
        }
        for (i, &on) in placed.iter().enumerate() {
            if on {
                occupied[i] = true;
                for c in 0..3 {
                    let noise = rng.random_range(-0.03f32..0.03);
                    pixels[c * size * size + i] = (color[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
        masks.push(placed);
    }
    Some((Tensor::new([3, size, size], pixels), masks))
}

/// Deterministic multi-object dataset: `count` RGB images of `size x size`
/// whose label is the class-defining combination of shapes they contain.
pub fn synthetic_shapes(seed: u64, count: usize, size: usize, classes: usize) -> Result<Dataset> {
    ensure!(count >= 1, "count must be >= 1");
    ensure!(size >= 32, "size must be >= 32, got {size}");
    ensure!((2..=CLASS_COMBOS.len()).contains(&classes), "classes must be in 2..=8, got {classes}");
    let items = (0..count)
        .map(|i| {
            let item_seed = mix_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let label = rng.random_range(0..classes);
            let combo = CLASS_COMBOS[label];
            let mut attempt = 0u64;
            loop {
                if let Some((pixels, masks)) = try_render(&mut rng, size, combo) {
                    return LabeledImage {
                        pixels,
                        label,
                        gt_masks: Some(masks),
                    };
                }
                attempt += 1;
                rng = ChaCha8Rng::seed_from_u64(mix_seed(item_seed, attempt));
            }
        })
        .collect();
    Ok(Dataset { items, classes })
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub color_jitter_strength: f64,
    pub grayscale_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            color_jitter_strength: 0.5,
            grayscale_prob: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A config whose views are exact copies of the input.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter_strength: 0.0,
            grayscale_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        ensure!(
            lo > 0.0 && lo <= hi && hi <= 1.0,
            "crop_scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
        );
        ensure!((0.0..=1.0).contains(&self.flip_prob), "flip_prob must be in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.grayscale_prob), "grayscale_prob must be in [0, 1]");
        ensure!(self.color_jitter_strength >= 0.0, "color_jitter_strength must be >= 0");
        Ok(())
    }
}

const JITTER_PROB: f64 = 0.8;
const CROP_TRIES: usize = 10;

/// Crop window `(x0, y0, w, h)` in the torchvision random-resized-crop style.
fn sample_crop(rng: &mut ChaCha8Rng, width: usize, height: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (width * height) as f64;
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..CROP_TRIES {
        let target = area * if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let ratio = rng.random_range(lr_lo..=lr_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            return (x0, y0, w, h);
        }
    }
    (0, 0, width, height)
}

/// Bilinear resize of a `[C, h, w]` window to `[C, out_h, out_w]` (half-pixel centers).
fn resize_window(src: &Tensor<f32>, window: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Tensor<f32> {
    let [c, sh, sw] = [src.shape()[0], src.shape()[1], src.shape()[2]];
    let (x0, y0, w, h) = window;
    if (x0, y0, w, h) == (0, 0, sw, sh) && (out_h, out_w) == (sh, sw) {
        return src.clone();
    }
    let data = src.data();
    let mut out = vec![0f32; c * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (ya, ty) = (fy.floor() as usize, (fy - fy.floor()) as f32);
        let yb = (ya + 1).min(h - 1);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (xa, tx) = (fx.floor() as usize, (fx - fx.floor()) as f32);
            let xb = (xa + 1).min(w - 1);
            for ch in 0..c {
                let at = |y: usize, x: usize| data[(ch * sh + y0 + y) * sw + x0 + x];
                let top = at(ya, xa) * (1.0 - tx) + at(ya, xb) * tx;
                let bot = at(yb, xa) * (1.0 - tx) + at(yb, xb) * tx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

fn luma(px: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i]
}

/// Brightness, contrast, saturation and hue jitter in random order.
fn color_jitter(rng: &mut ChaCha8Rng, img: &mut Tensor<f32>, strength: f64) {
    if img.shape()[0] != 3 {
        return;
    }
    let plane = img.shape()[1] * img.shape()[2];
    let amount = 0.8 * strength;
    let factor = |rng: &mut ChaCha8Rng| rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32;
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let hue = rng.random_range(-0.2 * strength..=0.2 * strength) as f32;
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let px = img.data_mut();
    for op in order {
        match op {
            0 => px.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0)),
            1 => {
                let mean = (0..plane).map(|i| luma(px, plane, i)).sum::<f32>() / plane as f32;
                px.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
            }
            2 => {
                for i in 0..plane {
                    let l = luma(px, plane, i);
                    for c in 0..3 {
                        let v = &mut px[c * plane + i];
                        *v = ((*v - l) * saturation + l).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                // Rotate chroma in YIQ space by `hue` turns.
                let (s, co) = ((hue * std::f32::consts::TAU).sin(), (hue * std::f32::consts::TAU).cos());
                for i in 0..plane {
                    let (r, g, b) = (px[i], px[plane + i], px[2 * plane + i]);
                    let y = 0.299 * r + 0.587 * g + 0.114 * b;
                    let ii = 0.596 * r - 0.274 * g - 0.322 * b;
                    let q = 0.211 * r - 0.523 * g + 0.312 * b;
                    let (i2, q2) = (ii * co - q * s, ii * s + q * co);
                    px[i] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
                    px[plane + i] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
                    px[2 * plane + i] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn augment_view(rng: &mut ChaCha8Rng, img: &Tensor<f32>, cfg: &AugmentationConfig) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let window = sample_crop(rng, w, h, cfg.crop_scale);
    let mut out = resize_window(img, window, h, w);
    if rng.random_bool(cfg.flip_prob) {
        let px = out.data_mut();
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }
    if cfg.color_jitter_strength > 0.0 && rng.random_bool(JITTER_PROB) {
        color_jitter(rng, &mut out, cfg.color_jitter_strength);
    }
    if c == 3 && rng.random_bool(cfg.grayscale_prob) {
        let plane = h * w;
        let px = out.data_mut();
        for i in 0..plane {
            let l = luma(px, plane, i).clamp(0.0, 1.0);
            for ch in 0..3 {
                px[ch * plane + i] = l;
            }
        }
    }
    out
}

/// Two independent augmentations of `img`, determined by `(cfg.seed, item_seed)`.
pub fn augment_pair(img: &LabeledImage, cfg: &AugmentationConfig, item_seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, item_seed));
    let a = augment_view(&mut rng, &img.pixels, cfg);
    let b = augment_view(&mut rng, &img.pixels, cfg);
    (a, b)
}

// ---------------------------------------------------------------------------
// files

/// Reads a `relative_path<TAB>label` manifest and decodes the listed images
/// as RGB, resized to `size x size`. Blank lines are skipped.
pub fn load_image_dataset(root: &Path, manifest: &Path, size: usize, classes: usize) -> Result<Dataset> {
    ensure!(size >= 1, "size must be positive");
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((rel, label)) = line.split_once('\t') else {
            return Err(Error::Contract(format!(
                "{}:{}: expected `path<TAB>label`",
                manifest.display(),
                lineno + 1
            )));
        };
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Contract(format!("{}:{}: bad label `{label}`", manifest.display(), lineno + 1))
        })?;
        ensure!(
            label < classes,
            "{}:{}: label {label} outside the declared {classes} classes",
            manifest.display(),
            lineno + 1
        );
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let decoded = image::open(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let rgb = image::imageops::resize(
            &decoded.to_rgb8(),
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut pixels = vec![0f32; 3 * size * size];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * size + y as usize) * size + x as usize] = p[c] as f32 / 255.0;
            }
        }
        items.push(LabeledImage {
            pixels: Tensor::new([3, size, size], pixels),
            label,
            gt_masks: None,
        });
    }
    Ok(Dataset { items, classes })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes every item as `img_NNNNN.png` plus `manifest.tsv` into `dir`.
/// Returns the manifest path.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, item) in ds.items.iter().enumerate() {
        ensure!(item.channels() == 3, "export supports RGB images only");
        let (h, w) = (item.height(), item.width());
        let px = item.pixels.data();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_u8(px[i]), to_u8(px[h * w + i]), to_u8(px[2 * h * w + i])])
        });
        let name = format!("img_{i:05}.png");
        let path = dir.join(&name);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        manifest.push_str(&format!("{name}\t{}\n", item.label));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
