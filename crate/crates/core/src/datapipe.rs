//! Dataset discovery, sample preparation, target encoding, and batching.
//!
//! A training sample is one RGB image, resized to the network's input size,
//! split into a normalized lightness plane (the input) and chroma planes (the
//! supervision). Targets are derived per level: the chroma planes are area-
//! averaged down to the palette-head resolution and soft-encoded against the
//! bin table, and a matching chroma tensor is produced for the regression
//! term. All shuffling is deterministic in `(seed, epoch)`.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::colorspace::{
    soft_encode_sparse, srgb_pixel_to_lab, BinTable, SparseEncoding, SOFT_ENCODE_K,
    SOFT_ENCODE_SIGMA,
};
use crate::nn::{area_downsample, BilinearResize};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error("no usable images under {0}")]
    EmptyDataset(PathBuf),
}

/// Extensions the scanner accepts (case-insensitive).
pub const SUPPORTED_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn has_supported_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            SUPPORTED_EXTENSIONS.contains(&e.as_str())
        })
        .unwrap_or(false)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            walk(&path, out)?;
        } else if has_supported_extension(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// List the images of a dataset, sorted by path.
///
/// If `root/manifest.txt` exists it takes over: one path per line, relative
/// to `root`, with blank lines and `#` comments ignored. Entries that do not
/// exist are skipped with a warning so a stale manifest degrades instead of
/// aborting a run. Without a manifest the directory tree is walked and every
/// file with a supported extension is taken.
pub fn scan_dataset(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let manifest = root.join("manifest.txt");
    let mut files = Vec::new();
    if manifest.is_file() {
        let reader = std::io::BufReader::new(fs::File::open(&manifest)?);
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let path = root.join(line);
            if path.is_file() {
                files.push(path);
            } else {
                log::warn!("manifest entry not found, skipping: {}", path.display());
            }
        }
    } else {
        walk(root, &mut files)?;
    }
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    Ok(files)
}

/// One prepared image at the network input size.
pub struct Sample {
    /// Lightness normalized to `[0, 1]` (L/100).
    pub l_norm: Array2<f64>,
    /// Chroma planes `[2, s, s]` (a then b), in Lab units.
    pub ab: Array3<f64>,
}

/// Resize float RGB planes `[3, h, w]` to `size × size`.
///
/// Shrinking both axes uses area averaging (no aliasing, exact for constant
/// regions); anything else falls back to bilinear sampling.
fn resize_rgb_planes(planes: &Array3<f64>, size: usize) -> Array3<f64> {
    let (h, w) = (planes.shape()[1], planes.shape()[2]);
    if h == size && w == size {
        planes.clone()
    } else if h >= size && w >= size {
        area_downsample(planes, size, size)
    } else {
        let batched = planes.clone().insert_axis(Axis(0));
        let mut resize = BilinearResize::new(size, size);
        resize.forward(&batched, false).index_axis(Axis(0), 0).to_owned()
    }
}

/// Resize chroma planes `[2, h, w]` to `oh × ow` (same policy as images).
pub fn resize_ab(ab: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w) = (ab.shape()[1], ab.shape()[2]);
    if h == oh && w == ow {
        ab.clone()
    } else if h >= oh && w >= ow {
        area_downsample(ab, oh, ow)
    } else {
        let batched = ab.clone().insert_axis(Axis(0));
        let mut resize = BilinearResize::new(oh, ow);
        resize.forward(&batched, false).index_axis(Axis(0), 0).to_owned()
    }
}

/// Turn a decoded RGB image into a prepared sample at `input_size`.
pub fn prepare_from_rgb(img: &RgbImage, input_size: usize) -> Sample {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut planes = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            planes[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    let planes = resize_rgb_planes(&planes, input_size);
    let s = input_size;
    let mut l_norm = Array2::zeros((s, s));
    let mut ab = Array3::zeros((2, s, s));
    for y in 0..s {
        for x in 0..s {
            let (lv, av, bv) = srgb_pixel_to_lab(
                planes[[0, y, x]].clamp(0.0, 1.0),
                planes[[1, y, x]].clamp(0.0, 1.0),
                planes[[2, y, x]].clamp(0.0, 1.0),
            );
            l_norm[[y, x]] = lv / 100.0;
            ab[[0, y, x]] = av;
            ab[[1, y, x]] = bv;
        }
    }
    Sample { l_norm, ab }
}

/// Load and prepare one image file.
pub fn prepare_sample(path: &Path, input_size: usize) -> Result<Sample, DataError> {
    let img = image::open(path)?.to_rgb8();
    Ok(prepare_from_rgb(&img, input_size))
}

/// Supervision for one sample at one output geometry.
pub struct LevelTargets {
    /// Soft-encoded palette target at the quantization-head resolution.
    pub encoding: SparseEncoding,
    /// Chroma target at the chroma-head resolution, `[2, h, w]`.
    pub ab: Array3<f64>,
}

/// Derive the targets for a level whose heads emit `z_size` (palette) and
/// `ab_size` (chroma) maps.
pub fn level_targets(
    ab_full: &Array3<f64>,
    z_size: usize,
    ab_size: usize,
    bins: &BinTable,
) -> LevelTargets {
    let ab_z = resize_ab(ab_full, z_size, z_size);
    let encoding = soft_encode_sparse(&ab_z, bins, SOFT_ENCODE_SIGMA, SOFT_ENCODE_K);
    let ab = resize_ab(ab_full, ab_size, ab_size);
    LevelTargets { encoding, ab }
}

/// Stack chosen samples into a `[n, 1, s, s]` lightness batch.
pub fn stack_lightness(samples: &[Sample], indices: &[usize]) -> Array4<f64> {
    assert!(!indices.is_empty(), "empty batch");
    let s = samples[indices[0]].l_norm.nrows();
    let mut out = Array4::zeros((indices.len(), 1, s, s));
    for (slot, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), slot)
            .index_axis_mut(Axis(0), 0)
            .assign(&samples[i].l_norm);
    }
    out
}

/// Deterministic shuffled batch indices for one epoch.
///
/// The permutation depends only on `(seed, epoch)`; the final short batch is
/// kept. Identical inputs give identical batches on every platform.
pub fn shuffled_batches(
    n_items: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1)); // distinct from other seed users
    let mut idx: Vec<usize> = (0..n_items).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Accumulate the empirical palette prior from soft encodings.
///
/// Returns per-bin probabilities summing to one (uniform if no mass at all).
pub fn fit_empirical_prior(encodings: &[SparseEncoding], q: usize) -> Vec<f64> {
    let mut mass = vec![0.0f64; q];
    for enc in encodings {
        for (slot, &bin) in enc.bins.iter().enumerate() {
            mass[bin as usize] += enc.weights[slot];
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / q as f64; q];
    }
    for m in &mut mass {
        *m /= total;
    }
    mass
}

/// Deterministic synthetic corpus: colourful gradient-and-disc PNGs,
/// suitable for smoke training and tests when no dataset is at hand.
pub mod synth {
    use super::*;
    use rand::Rng;

    fn saturated_color(rng: &mut ChaCha20Rng) -> [f64; 3] {
        // pick a hue, keep saturation and value high so chroma is non-trivial
        let h = rng.random::<f64>() * 6.0;
        let s = 0.6 + 0.4 * rng.random::<f64>();
        let v = 0.7 + 0.3 * rng.random::<f64>();
        let c = v * s;
        let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
        let (r, g, b) = match h as usize {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = v - c;
        [r + m, g + m, b + m]
    }

    /// Write `count` images of side `size` under `dir`; returns their paths.
    pub fn write_synthetic_dataset(
        dir: &Path,
        count: usize,
        size: u32,
        seed: u64,
    ) -> Result<Vec<PathBuf>, DataError> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let c0 = saturated_color(&mut rng);
            let c1 = saturated_color(&mut rng);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (dx, dy) = (angle.cos(), angle.sin());
            let discs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let color = saturated_color(&mut rng);
                    let cx = rng.random::<f64>();
                    let cy = rng.random::<f64>();
                    let r = 0.1 + 0.2 * rng.random::<f64>();
                    (color, cx, cy, r)
                })
                .collect();
            let mut img = RgbImage::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 / (size - 1).max(1) as f64;
                    let v = y as f64 / (size - 1).max(1) as f64;
                    // gradient along the chosen direction
                    let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
                    let mut px = [
                        c0[0] * (1.0 - t) + c1[0] * t,
                        c0[1] * (1.0 - t) + c1[1] * t,
                        c0[2] * (1.0 - t) + c1[2] * t,
                    ];
                    for (color, cx, cy, r) in &discs {
                        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                        if d < *r {
                            // soft-edged disc
                            let blend = ((r - d) / (0.2 * r)).clamp(0.0, 1.0);
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - blend) + color[c] * blend;
                            }
                        }
                    }
                    img.put_pixel(
                        x,
                        y,
                        image::Rgb([
                            (px[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                            (px[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                            (px[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                        ]),
                    );
                }
            }
            let path = dir.join(format!("synth_{i:04}.png"));
            img.save(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}
