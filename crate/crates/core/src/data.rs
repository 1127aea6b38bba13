//! Dataset layout, preprocessing, patch extraction and synthetic skies.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanetError};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "GTmaps";
/// Stems starting with this marker are tagged as night-time images.
pub const DEFAULT_NIGHT_MARKER: &str = "n";
/// 8-bit mask values at or above this are cloud.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One image and its mask on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub night: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalised image `1x3xHxW` in `[-0.5, 0.5]` and binary mask `1x1xHxW`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
    pub night: bool,
}

fn image_files(dir: &Path) -> Result<HashMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| ScanetError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = HashMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs `root/images/*` with `root/GTmaps/*` by stem, shuffles with `seed`
/// and holds out `floor(total / 10)` pairs for testing.
pub fn load_dataset(root: &Path, seed: u64) -> Result<DatasetIndex> {
    load_dataset_with_marker(root, seed, DEFAULT_NIGHT_MARKER)
}

pub fn load_dataset_with_marker(root: &Path, seed: u64, night_marker: &str) -> Result<DatasetIndex> {
    let images = image_files(&root.join(IMAGE_DIR))?;
    let masks = image_files(&root.join(MASK_DIR))?;
    if images.is_empty() {
        return Err(ScanetError::Dataset(format!("no images under {}", root.join(IMAGE_DIR).display())));
    }
    let mut stems: Vec<&String> = images.keys().collect();
    stems.sort();
    let mut pairs = Vec::with_capacity(stems.len());
    for stem in stems {
        let mask = masks
            .get(stem)
            .ok_or_else(|| ScanetError::Dataset(format!("image `{stem}` has no mask in {MASK_DIR}/")))?;
        pairs.push(SamplePair {
            stem: stem.clone(),
            image: images[stem].clone(),
            mask: mask.clone(),
            night: !night_marker.is_empty() && stem.starts_with(night_marker),
        });
    }
    Ok(split(pairs, seed).into())
}

/// Seeded shuffle, then the first `floor(n / 10)` pairs become the test set.
pub fn split<T>(mut items: Vec<T>, seed: u64) -> Split<T> {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = items.drain(..items.len() / 10).collect();
    Split { train: items, test, seed }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

impl From<Split<SamplePair>> for DatasetIndex {
    fn from(s: Split<SamplePair>) -> Self {
        DatasetIndex { train: s.train, test: s.test, seed: s.seed }
    }
}

/// Flip choices for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Flips { horizontal: rng.gen_bool(0.5), vertical: rng.gen_bool(0.5) }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        Tensor::from_fn(s, |i| {
            let x = i % s.w;
            let y = (i / s.w) % s.h;
            let nc = i / s.plane();
            let sx = if self.horizontal { s.w - 1 - x } else { x };
            let sy = if self.vertical { s.h - 1 - y } else { y };
            t.data()[nc * s.plane() + sy * s.w + sx]
        })
    }
}

/// RNG for sample `index` under a global seed; independent of processing order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| ScanetError::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

/// `[0, 255]` RGB pixels to a `1x3xHxW` tensor scaled to `[0, 1]` minus 0.5.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(Shape::new(1, 3, h, w), |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0 - 0.5
    })
}

/// Binary mask tensor from 8-bit values (`>= 128` is cloud).
pub fn mask_to_tensor(mask: &GrayImage) -> Tensor {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let raw = mask.as_raw();
    Tensor::from_fn(Shape::new(1, 1, h, w), |i| if raw[i] >= MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Resizes (bilinear image, nearest mask), optionally flips, and normalises.
pub fn prepare_images(
    img: &RgbImage,
    mask: &GrayImage,
    size: usize,
    flips: Flips,
    id: &str,
    night: bool,
) -> Result<Sample> {
    if size == 0 {
        return Err(ScanetError::invalid("target size must be positive"));
    }
    if img.dimensions() != mask.dimensions() {
        return Err(ScanetError::Dataset(format!(
            "`{id}`: image is {:?} but mask is {:?}",
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let resized = if img.dimensions() == (size as u32, size as u32) {
        img.clone()
    } else {
        imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    // binarise first so nearest resampling can only copy 0/1 values
    let mask = mask_to_tensor(mask).resize_nearest(size, size);
    Ok(Sample {
        image: flips.apply(&image_to_tensor(&resized)),
        mask: flips.apply(&mask),
        id: id.to_string(),
        night,
    })
}

/// Loads and prepares one pair; with `augment`, flips are drawn from `rng`.
pub fn prepare(pair: &SamplePair, size: usize, augment: bool, rng: &mut impl Rng) -> Result<Sample> {
    let img = decode(&pair.image)?.to_rgb8();
    let mask = decode(&pair.mask)?.to_luma8();
    let flips = if augment { Flips::sample(rng) } else { Flips::default() };
    prepare_images(&img, &mask, size, flips, &pair.stem, pair.night)
}

/// Prepares every pair in parallel; sample `i` uses `sample_rng(seed, i)`.
pub fn prepare_all(pairs: &[SamplePair], size: usize, augment: bool, seed: u64) -> Result<Vec<Sample>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| prepare(p, size, augment, &mut sample_rng(seed, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchLabel {
    Positive,
    Negative,
}

/// One tile of the 4x4 grid that cleared a rate threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub patch: Tensor,
    pub label: PatchLabel,
    pub rate: f64,
    /// Grid position, row-major in `0..16`.
    pub index: usize,
}

pub const PATCH_GRID: usize = 4;
pub const POSITIVE_RATE: f64 = 0.8;
pub const NEGATIVE_RATE: f64 = 0.2;

/// `(cloud pixels, pixels)` of each tile of the 4x4 grid, row-major.
pub fn patch_cloud_counts(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 || !s.h.is_multiple_of(PATCH_GRID) || !s.w.is_multiple_of(PATCH_GRID) || s.h == 0 || s.w == 0 {
        return Err(ScanetError::shape("patch grid", format!("mask {s} is not 1x1xHxW with H, W divisible by 4")));
    }
    let (ph, pw) = (s.h / PATCH_GRID, s.w / PATCH_GRID);
    let mut out = vec![(0usize, ph * pw); PATCH_GRID * PATCH_GRID];
    for y in 0..s.h {
        for x in 0..s.w {
            if mask.data()[y * s.w + x] >= 0.5 {
                out[(y / ph) * PATCH_GRID + x / pw].0 += 1;
            }
        }
    }
    Ok(out)
}

/// Tiles the pair into a 4x4 grid and keeps the tiles with cloud rate
/// strictly above 0.8 (positive) or strictly below 0.2 (negative).
pub fn swpt_extract(image: &Tensor, mask: &Tensor) -> Result<Vec<PatchSample>> {
    let (is, ms) = (image.shape(), mask.shape());
    if (is.n, is.h, is.w) != (1, ms.h, ms.w) {
        return Err(ScanetError::shape("swpt_extract", format!("image {is} with mask {ms}")));
    }
    let counts = patch_cloud_counts(mask)?;
    let (ph, pw) = (is.h / PATCH_GRID, is.w / PATCH_GRID);
    let mut out = Vec::new();
    for (index, &(cloud, total)) in counts.iter().enumerate() {
        let rate = cloud as f64 / total as f64;
        let label = if rate > POSITIVE_RATE {
            PatchLabel::Positive
        } else if rate < NEGATIVE_RATE {
            PatchLabel::Negative
        } else {
            continue;
        };
        let (py, px) = (index / PATCH_GRID * ph, index % PATCH_GRID * pw);
        let patch = Tensor::from_fn(Shape::new(1, is.c, ph, pw), |i| {
            let c = i / (ph * pw);
            let (y, x) = ((i / pw) % ph, i % pw);
            image.at(0, c, py + y, px + x)
        });
        out.push(PatchSample { patch, label, rate, index });
    }
    Ok(out)
}

/// Smooth lattice noise: random values on a coarse grid, interpolated with
/// a smoothstep, summed over octaves of halving amplitude. Output in `[0, 1)`.
fn value_noise(size: usize, base_cells: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0f32; size * size];
    let mut amp = 1.0f32;
    let mut norm = 0.0f32;
    for o in 0..octaves {
        let cells = base_cells << o;
        let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        let at = |gx: usize, gy: usize| lattice[gy * (cells + 1) + gx];
        for y in 0..size {
            let fy = y as f32 / size as f32 * cells as f32;
            let (gy, ty) = (fy.floor() as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..size {
                let fx = x as f32 / size as f32 * cells as f32;
                let (gx, tx) = (fx.floor() as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let top = at(gx, gy) + sx * (at(gx + 1, gy) - at(gx, gy));
                let bot = at(gx, gy + 1) + sx * (at(gx + 1, gy + 1) - at(gx, gy + 1));
                out[y * size + x] += amp * (top + sy * (bot - top));
            }
        }
        norm += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Cloud-cover fraction range of generated masks.
pub const SYNTH_COVER: (f64, f64) = (0.3, 0.7);

/// Procedural sky images: a vertical blue gradient with bright noise-shaped
/// clouds. The mask is the exact threshold the clouds were drawn from, set
/// at a random coverage quantile so every mask is 30-70% cloud.
pub fn synth_generate(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(ScanetError::invalid("synthetic count must be positive"));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(ScanetError::invalid(format!("synthetic size {size} is not a positive multiple of 16")));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let shape_noise = value_noise(size, 3, 3, &mut rng);
            let texture = value_noise(size, 8, 2, &mut rng);
            let cover = rng.gen_range(SYNTH_COVER.0..SYNTH_COVER.1);
            let mut sorted = shape_noise.clone();
            sorted.sort_by(f32::total_cmp);
            let cut = ((1.0 - cover) * sorted.len() as f64) as usize;
            let threshold = sorted[cut.min(sorted.len() - 1)];

            let sky_top = [rng.gen_range(0.10..0.30), rng.gen_range(0.30..0.50), rng.gen_range(0.65..0.90)];
            let sky_bottom = [rng.gen_range(0.45..0.65), rng.gen_range(0.60..0.75), rng.gen_range(0.80..0.95)];
            let cloud_level = rng.gen_range(0.80f32..0.97);

            let plane = size * size;
            let mut rgb = vec![0f32; 3 * plane];
            let mut mask = vec![0f32; plane];
            for p in 0..plane {
                let t = (p / size) as f32 / (size - 1) as f32;
                let n = shape_noise[p];
                let cloud = n >= threshold;
                mask[p] = if cloud { 1.0 } else { 0.0 };
                for c in 0..3 {
                    let sky = sky_top[c] + t * (sky_bottom[c] - sky_top[c]);
                    let v = if cloud {
                        // denser cloud further above the threshold, with grey texture
                        let depth = ((n - threshold) / 0.15).min(1.0);
                        let grey = cloud_level - 0.15 * texture[p];
                        let alpha = 0.75 + 0.25 * depth;
                        sky + alpha * (grey - sky)
                    } else {
                        sky + 0.03 * (texture[p] - 0.5)
                    };
                    rgb[c * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0 - 0.5;
                }
            }
            Ok(Sample {
                image: Tensor::from_vec(Shape::new(1, 3, size, size), rgb)?,
                mask: Tensor::from_vec(Shape::new(1, 1, size, size), mask)?,
                id: format!("synth{i:05}"),
                night: false,
            })
        })
        .collect()
}

/// Image tensor (normalised) back to 8-bit RGB.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(ScanetError::shape("tensor_to_rgb", format!("{s} is not 1x3xHxW")));
    }
    let plane = s.plane();
    let raw = (0..plane * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            ((image.data()[c * plane + p] + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(RgbImage::from_raw(s.w as u32, s.h as u32, raw).expect("buffer sized from the shape"))
}

/// Single-channel map in `[0, 1]` to 8-bit grey.
pub fn tensor_to_gray(map: &Tensor) -> Result<GrayImage> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(ScanetError::shape("tensor_to_gray", format!("{s} is not 1x1xHxW")));
    }
    let raw = map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(GrayImage::from_raw(s.w as u32, s.h as u32, raw).expect("buffer sized from the shape"))
}

/// Writes samples as `root/images/<id>.png` and `root/GTmaps/<id>.png`.
pub fn export_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let (images, masks) = (root.join(IMAGE_DIR), root.join(MASK_DIR));
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for s in samples {
        let save_err = |path: &Path, e: image::ImageError| ScanetError::Decode { path: path.to_path_buf(), reason: e.to_string() };
        let ip = images.join(format!("{}.png", s.id));
        tensor_to_rgb(&s.image)?.save(&ip).map_err(|e| save_err(&ip, e))?;
        let mp = masks.join(format!("{}.png", s.id));
        tensor_to_gray(&s.mask)?.save(&mp).map_err(|e| save_err(&mp, e))?;
    }
    Ok(())
}

/// Stacks samples into an `Nx3xHxW` image batch and an `Nx1xHxW` mask batch.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
