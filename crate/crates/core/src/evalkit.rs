//! Image quality metrics and whole-dataset evaluation.
//!
//! PSNR is computed over all three RGB channels against the 255 peak and
//! capped at [`PSNR_CAP_DB`] for identical images. SSIM follows the original
//! single-scale recipe: ITU-R BT.601 luma, an 11×11 Gaussian window with
//! σ = 1.5, K1 = 0.01, K2 = 0.03 on a 255 dynamic range, and the score is the
//! mean of the SSIM map over window positions that lie fully inside the image
//! (no padding is invented at the borders).
//!
//! Perceptual (LPIPS-style) distance is not computed natively; it is delegated
//! to an external scorer through the [`LpipsPlugin`] trait so evaluation runs
//! stay self-contained when no scorer is installed.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;

use image::RgbImage;
use ndarray::{Array2, Array4, Axis};
use thiserror::Error;

use crate::colorspace::{lab_to_rgb, LabImage};
use crate::datapipe::Sample;
use crate::net::{Level, TucanNet};

/// PSNR reported for bit-identical images, in dB.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Side length of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM Gaussian window.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("perceptual scorer {name}: {reason}")]
    Plugin { name: String, reason: String },
}

// ---------------------------------------------------------------------------
// Pixel metrics
// ---------------------------------------------------------------------------

/// ITU-R BT.601 luma plane of an 8-bit image, on the 0–255 scale.
pub fn luma(img: &RgbImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        let [r, g, b] = px.0;
        out[[y as usize, x as usize]] =
            0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    }
    out
}

/// Peak signal-to-noise ratio in dB over all RGB channels.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "psnr: image sizes differ");
    let mut sum = 0.0;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa.0[c] as f64 - pb.0[c] as f64;
            sum += d * d;
        }
    }
    let mse = sum / (a.width() as f64 * a.height() as f64 * 3.0);
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (SSIM_L * SSIM_L / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// The normalized SSIM window: `SSIM_WINDOW`² Gaussian taps summing to one.
fn gaussian_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dy * dy + dx * dx) as f64;
            w[[(dy + half) as usize, (dx + half) as usize]] =
                (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total = w.sum();
    w.mapv_inplace(|v| v / total);
    w
}

/// Structural similarity between two planes on a 255 dynamic range.
///
/// Both planes must have the same shape with each side at least
/// [`SSIM_WINDOW`]; the result is the plain mean over all fully-interior
/// window placements.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim: plane sizes differ");
    let (h, w) = a.dim();
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim: image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
    );
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut acc = 0.0;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[[wy, wx]];
                    let va = a[[y0 + wy, x0 + wx]];
                    let vb = b[[y0 + wy, x0 + wx]];
                    mx += g * va;
                    my += g * vb;
                    mxx += g * va * va;
                    myy += g * vb * vb;
                    mxy += g * va * vb;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    acc / ((h - SSIM_WINDOW + 1) as f64 * (w - SSIM_WINDOW + 1) as f64)
}

/// Structural similarity of two images, computed on their luma planes.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    ssim_plane(&luma(a), &luma(b))
}

// ---------------------------------------------------------------------------
// Perceptual distance plugins
// ---------------------------------------------------------------------------

/// An external perceptual-distance scorer (lower = more similar).
pub trait LpipsPlugin {
    /// Short identifier used in reports and error messages.
    fn name(&self) -> &str;
    /// Distance between two same-sized images.
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError>;
}

/// Runs an external command on two PNG files and parses its stdout.
///
/// The two image paths are appended to `args`; the command must print the
/// distance as a decimal number (last whitespace-separated token of stdout).
pub struct CommandLpips {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandLpips {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        CommandLpips { program: program.into(), args }
    }

    fn fail(&self, reason: impl Into<String>) -> EvalError {
        EvalError::Plugin { name: self.program.clone(), reason: reason.into() }
    }
}

impl LpipsPlugin for CommandLpips {
    fn name(&self) -> &str {
        &self.program
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError> {
        let dir = std::env::temp_dir();
        let tag = std::process::id();
        let pa = dir.join(format!("lpips-{tag}-a.png"));
        let pb = dir.join(format!("lpips-{tag}-b.png"));
        a.save(&pa)?;
        b.save(&pb)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&pa)
            .arg(&pb)
            .output();
        let _ = std::fs::remove_file(&pa);
        let _ = std::fs::remove_file(&pb);
        let out = out.map_err(|e| self.fail(format!("failed to launch: {e}")))?;
        if !out.status.success() {
            return Err(self.fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let token = stdout
            .split_whitespace()
            .last()
            .ok_or_else(|| self.fail("no output"))?;
        token
            .parse::<f64>()
            .map_err(|_| self.fail(format!("unparseable output {token:?}")))
    }
}

/// Fixed-value scorer for wiring tests and dry runs.
pub struct ConstantLpips(pub f64);

impl LpipsPlugin for ConstantLpips {
    fn name(&self) -> &str {
        "constant"
    }

    fn distance(&self, _a: &RgbImage, _b: &RgbImage) -> Result<f64, EvalError> {
        Ok(self.0)
    }
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

/// Metric scores for one evaluated image.
#[derive(Debug, Clone)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

/// Aggregate scores over an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scores: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lpips: Option<f64>,
}

impl EvalReport {
    /// Machine-readable report: full-precision rows that the summary can be
    /// recomputed from exactly, preceded by the scoring convention.
    ///
    /// Columns are `name psnr ssim [lpips]`; floats use Rust's shortest
    /// round-trip formatting, so parsing a row recovers the exact value and
    /// `mean` equals the in-order sum of the rows divided by their count.
    pub fn serialize(&self, plugin_name: Option<&str>) -> String {
        let mut out = String::new();
        out.push_str("# colourisation evaluation\n");
        out.push_str("# prediction: predicted chroma recombined with the image's own lightness\n");
        out.push_str("# reference: lab round-trip of the resized source (true chroma, same lightness)\n");
        out.push_str("# psnr: rgb, peak 255, capped at 100 db\n");
        out.push_str("# ssim: bt.601 luma, 11x11 gaussian window sigma 1.5\n");
        for s in &self.scores {
            let _ = write!(out, "row {} {} {}", s.name, s.psnr, s.ssim);
            if let Some(d) = s.lpips {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
        }
        let _ = write!(out, "mean {} {}", self.mean_psnr, self.mean_ssim);
        if let Some(d) = self.mean_lpips {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let _ = writeln!(out, "images {}", self.scores.len());
        match plugin_name {
            Some(name) => {
                let _ = writeln!(out, "lpips {name}");
            }
            None => out.push_str("lpips absent\n"),
        }
        out
    }

    /// Plain-text table with one row per image and a mean row.
    pub fn render(&self) -> String {
        let has_lpips = self.mean_lpips.is_some();
        let mut out = String::new();
        let _ = write!(out, "{:<28} {:>9} {:>8}", "image", "psnr(db)", "ssim");
        if has_lpips {
            let _ = write!(out, " {:>8}", "lpips");
        }
        out.push('\n');
        for s in &self.scores {
            let _ = write!(out, "{:<28} {:>9.4} {:>8.5}", s.name, s.psnr, s.ssim);
            if let Some(d) = s.lpips {
                let _ = write!(out, " {:>8.5}", d);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<28} {:>9.4} {:>8.5}", "mean", self.mean_psnr, self.mean_ssim);
        if let Some(d) = self.mean_lpips {
            let _ = write!(out, " {:>8.5}", d);
        }
        out.push('\n');
        out
    }
}

/// Render a prepared sample's own Lab planes back to sRGB.
///
/// This is the evaluation reference: it has been through the same resize and
/// the same gamut clipping as any prediction, so a perfect chroma estimate
/// scores the PSNR cap against it instead of being charged for resampling.
pub fn reference_rgb(sample: &Sample) -> RgbImage {
    let ab = &sample.ab;
    lab_to_rgb(&LabImage {
        l: &sample.l_norm * 100.0,
        a: ab.index_axis(Axis(0), 0).to_owned(),
        b: ab.index_axis(Axis(0), 1).to_owned(),
    })
}

/// The grayscale baseline: the sample's lightness with zero chroma.
pub fn gray_rgb(sample: &Sample) -> RgbImage {
    let (h, w) = sample.l_norm.dim();
    lab_to_rgb(&LabImage {
        l: &sample.l_norm * 100.0,
        a: Array2::zeros((h, w)),
        b: Array2::zeros((h, w)),
    })
}

/// Run the network on one sample and render the predicted colour image.
///
/// The predicted chroma is combined with the sample's own lightness, so the
/// network is only ever judged on the colour it added.
pub fn predicted_rgb(net: &mut TucanNet, sample: &Sample) -> RgbImage {
    let (h, w) = sample.l_norm.dim();
    let mut input = Array4::zeros((1, 1, h, w));
    input.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(&sample.l_norm);
    let out = net.forward(&input, Level::Final, false);
    let ab = out.ab_hat.index_axis(Axis(0), 0);
    lab_to_rgb(&LabImage {
        l: &sample.l_norm * 100.0,
        a: ab.index_axis(Axis(0), 0).to_owned(),
        b: ab.index_axis(Axis(0), 1).to_owned(),
    })
}

/// Score a stream of `(name, prediction, reference)` image pairs.
pub fn evaluate_pairs(
    pairs: impl IntoIterator<Item = (String, RgbImage, RgbImage)>,
    plugin: Option<&dyn LpipsPlugin>,
) -> Result<EvalReport, EvalError> {
    let mut scores = Vec::new();
    for (name, pred, reference) in pairs {
        let lpips = match plugin {
            Some(p) => Some(p.distance(&pred, &reference)?),
            None => None,
        };
        scores.push(ImageScore {
            name,
            psnr: psnr(&pred, &reference),
            ssim: ssim(&pred, &reference),
            lpips,
        });
    }
    let n = scores.len().max(1) as f64;
    let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
    let mean_lpips = if plugin.is_some() && !scores.is_empty() {
        Some(scores.iter().filter_map(|s| s.lpips).sum::<f64>() / n)
    } else {
        None
    };
    Ok(EvalReport { scores, mean_psnr, mean_ssim, mean_lpips })
}

/// Evaluate the network over named samples against their own references.
pub fn evaluate(
    net: &mut TucanNet,
    samples: &[(String, Sample)],
    plugin: Option<&dyn LpipsPlugin>,
) -> Result<EvalReport, EvalError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (name, sample) in samples {
        pairs.push((name.clone(), predicted_rgb(net, sample), reference_rgb(sample)));
    }
    evaluate_pairs(pairs, plugin)
}

/// Evaluation inputs addressed by path, for CLI use.
pub fn named_samples(
    paths: &[PathBuf],
    input_size: usize,
) -> Result<Vec<(String, Sample)>, crate::datapipe::DataError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        out.push((name, crate::datapipe::prepare_sample(p, input_size)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::prepare_from_rgb;
    use crate::net::NetworkConfig;

    fn flat(v: u8, w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([v, v, v]))
    }

    #[test]
    fn the_ssim_window_is_a_normalized_gaussian() {
        let w = gaussian_window();
        assert_eq!(w.dim(), (11, 11));
        assert!((w.sum() - 1.0).abs() < 1e-12);
        // Center is the peak; the window is symmetric under both flips.
        let c = w[[5, 5]];
        for ((y, x), &v) in w.indexed_iter() {
            assert!(v <= c);
            assert!((v - w[[10 - y, x]]).abs() < 1e-15);
            assert!((v - w[[y, 10 - x]]).abs() < 1e-15);
        }
    }

    #[test]
    fn psnr_hits_the_cap_only_for_identical_images() {
        let a = flat(128, 16, 12);
        assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
        let b = flat(129, 16, 12);
        // MSE is exactly 1, so PSNR is 10·log10(255²).
        assert!((psnr(&a, &b) - 48.130_803_608_679_1).abs() < 1e-9);
        assert!(psnr(&a, &b) < PSNR_CAP_DB);
    }

    #[test]
    fn ssim_is_one_for_identical_and_symmetric_in_its_arguments() {
        let mut a = RgbImage::new(16, 16);
        let mut b = RgbImage::new(16, 16);
        for (x, y, px) in a.enumerate_pixels_mut() {
            px.0 = [(x * 16) as u8, (y * 16) as u8, 90];
        }
        for (x, y, px) in b.enumerate_pixels_mut() {
            px.0 = [(y * 13) as u8, 200, (x * 7) as u8];
        }
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
        let fwd = ssim(&a, &b);
        let rev = ssim(&b, &a);
        assert!((fwd - rev).abs() < 1e-12);
        assert!(fwd < 1.0 && fwd > -1.0);
    }

    #[test]
    fn ssim_ignores_toroidal_shifts_of_wrap_padded_planes() {
        // Build planes that tile a 12-periodic pattern out to 34×34: the
        // valid-window region is then exactly two periods wide, so circularly
        // shifting the underlying pattern permutes whole periods of the SSIM
        // map and the mean must not move (borders included, nothing cropped).
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(33);
        let pa = Array2::from_shape_fn((12, 12), |_| rng.random_range(0.0..255.0));
        let pb = Array2::from_shape_fn((12, 12), |_| rng.random_range(0.0..255.0));
        let wrap = |p: &Array2<f64>, dy: usize, dx: usize| {
            Array2::from_shape_fn((34, 34), |(y, x)| p[[(y + dy) % 12, (x + dx) % 12]])
        };
        let base = ssim_plane(&wrap(&pa, 0, 0), &wrap(&pb, 0, 0));
        for (dy, dx) in [(1, 0), (0, 1), (5, 9), (11, 3)] {
            let shifted = ssim_plane(&wrap(&pa, dy, dx), &wrap(&pb, dy, dx));
            assert!(
                (shifted - base).abs() < 1e-12,
                "shift ({dy},{dx}): {shifted} vs {base}"
            );
        }
    }

    #[test]
    fn psnr_is_invariant_under_a_shared_pixel_permutation() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let mut a = RgbImage::new(10, 6);
        let mut b = RgbImage::new(10, 6);
        for (x, y, px) in a.enumerate_pixels_mut() {
            px.0 = [(x * 20) as u8, (y * 30) as u8, 77];
        }
        for (x, y, px) in b.enumerate_pixels_mut() {
            px.0 = [(y * 25) as u8, 131, (x * 11) as u8];
        }
        let mut order: Vec<usize> = (0..60).collect();
        order.shuffle(&mut rng);
        let permute = |img: &RgbImage| {
            let mut out = RgbImage::new(10, 6);
            for (i, &j) in order.iter().enumerate() {
                out.put_pixel(
                    (i % 10) as u32,
                    (i / 10) as u32,
                    *img.get_pixel((j % 10) as u32, (j / 10) as u32),
                );
            }
            out
        };
        // MSE is a sum over pixels, so the same shuffle of both images leaves
        // PSNR untouched apart from summation order.
        assert!((psnr(&permute(&a), &permute(&b)) - psnr(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn serialized_reports_recompute_their_means_exactly() {
        let mut a = RgbImage::new(16, 16);
        for (x, y, px) in a.enumerate_pixels_mut() {
            px.0 = [(x * 15) as u8, (y * 9) as u8, (x + y) as u8];
        }
        let b = flat(90, 16, 16);
        let c = flat(93, 16, 16);
        let pairs = vec![
            ("grad.png".to_string(), a.clone(), b.clone()),
            ("near.png".to_string(), b.clone(), c.clone()),
            ("same.png".to_string(), c.clone(), c.clone()),
        ];
        let report = evaluate_pairs(pairs, None).unwrap();
        let text = report.serialize(None);
        assert!(text.contains("lpips absent"));
        assert!(text.contains("images 3"));

        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        let mut mean_line = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("row ") {
                let mut toks = rest.rsplitn(3, ' ');
                let s: f64 = toks.next().unwrap().parse().unwrap();
                let p: f64 = toks.next().unwrap().parse().unwrap();
                ssims.push(s);
                psnrs.push(p);
            } else if let Some(rest) = line.strip_prefix("mean ") {
                mean_line = Some(rest.to_string());
            }
        }
        let mean = mean_line.unwrap();
        let mut toks = mean.split(' ');
        let mean_psnr: f64 = toks.next().unwrap().parse().unwrap();
        let mean_ssim: f64 = toks.next().unwrap().parse().unwrap();
        // Shortest round-trip formatting means the parsed rows are the exact
        // values, so the recomputed means match bit for bit.
        assert_eq!(mean_psnr, psnrs.iter().sum::<f64>() / 3.0);
        assert_eq!(mean_ssim, ssims.iter().sum::<f64>() / 3.0);
        // Plugin identity is recorded when present.
        let with = EvalReport {
            scores: report.scores.clone(),
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
            mean_lpips: Some(0.5),
        };
        assert!(with.serialize(Some("echo-scorer")).contains("lpips echo-scorer"));
    }

    #[test]
    fn luma_uses_the_bt601_weights() {
        let r = RgbImage::from_pixel(3, 2, image::Rgb([255, 0, 0]));
        let g = RgbImage::from_pixel(3, 2, image::Rgb([0, 255, 0]));
        let b = RgbImage::from_pixel(3, 2, image::Rgb([0, 0, 255]));
        assert!((luma(&r)[[0, 0]] - 0.299 * 255.0).abs() < 1e-12);
        assert!((luma(&g)[[1, 2]] - 0.587 * 255.0).abs() < 1e-12);
        assert!((luma(&b)[[0, 1]] - 0.114 * 255.0).abs() < 1e-12);
    }

    #[test]
    fn command_plugin_parses_reports_and_surfaces_failures() {
        let a = flat(10, 8, 8);
        let b = flat(20, 8, 8);
        let ok = CommandLpips::new("sh", vec!["-c".into(), "echo score: 0.25".into()]);
        assert_eq!(ok.distance(&a, &b).unwrap(), 0.25);

        let silent = CommandLpips::new("sh", vec!["-c".into(), "true".into()]);
        match silent.distance(&a, &b) {
            Err(EvalError::Plugin { reason, .. }) => assert!(reason.contains("no output")),
            other => panic!("expected plugin error, got {other:?}"),
        }

        let failing = CommandLpips::new("sh", vec!["-c".into(), "echo bad >&2; exit 3".into()]);
        match failing.distance(&a, &b) {
            Err(EvalError::Plugin { reason, .. }) => {
                assert!(reason.contains("3") && reason.contains("bad"), "{reason}");
            }
            other => panic!("expected plugin error, got {other:?}"),
        }

        let garbled = CommandLpips::new("sh", vec!["-c".into(), "echo not-a-number".into()]);
        match garbled.distance(&a, &b) {
            Err(EvalError::Plugin { reason, .. }) => assert!(reason.contains("not-a-number")),
            other => panic!("expected plugin error, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_pairs_aggregates_and_reports() {
        let a = flat(100, 16, 16);
        let b = flat(104, 16, 16);
        let pairs = vec![
            ("same.png".to_string(), a.clone(), a.clone()),
            ("off.png".to_string(), b.clone(), a.clone()),
        ];
        let report = evaluate_pairs(pairs, Some(&ConstantLpips(0.125))).unwrap();
        assert_eq!(report.scores.len(), 2);
        assert_eq!(report.scores[0].psnr, PSNR_CAP_DB);
        assert!(report.scores[1].psnr < PSNR_CAP_DB);
        assert_eq!(report.mean_lpips, Some(0.125));
        let text = report.render();
        assert!(text.contains("same.png") && text.contains("off.png"));
        assert!(text.contains("mean") && text.contains("lpips"));
        // Without a plugin the lpips column disappears.
        let plain = evaluate_pairs(
            vec![("x".to_string(), a.clone(), a.clone())],
            None,
        )
        .unwrap();
        assert_eq!(plain.mean_lpips, None);
        assert!(!plain.render().contains("lpips"));
    }

    #[test]
    fn the_reference_forgives_resampling_and_the_gray_baseline_does_not() {
        // A saturated image: reference vs. itself is perfect by construction,
        // while dropping the chroma costs a measurable amount.
        let mut img = RgbImage::new(48, 48);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [200, (x * 5) as u8, (y * 5) as u8];
        }
        let sample = prepare_from_rgb(&img, 24);
        let reference = reference_rgb(&sample);
        assert_eq!(reference.dimensions(), (24, 24));
        assert_eq!(psnr(&reference, &reference), PSNR_CAP_DB);
        let gray = gray_rgb(&sample);
        assert!(psnr(&gray, &reference) < 40.0);
        assert!(ssim(&gray, &reference) < 1.0);
    }

    #[test]
    fn network_evaluation_produces_finite_scores_at_the_input_size() {
        let cfg = NetworkConfig::toy(17);
        let mut net = TucanNet::new(cfg.clone(), 5).unwrap();
        let mut img = RgbImage::new(64, 64);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [(x * 4) as u8, 128, (y * 4) as u8];
        }
        let samples = vec![("toy.png".to_string(), prepare_from_rgb(&img, cfg.input_size))];
        let report = evaluate(&mut net, &samples, None).unwrap();
        assert_eq!(report.scores.len(), 1);
        assert!(report.mean_psnr.is_finite() && report.mean_psnr > 0.0);
        assert!(report.mean_ssim.is_finite() && report.mean_ssim <= 1.0);
        let pred = predicted_rgb(&mut net, &samples[0].1);
        assert_eq!(pred.dimensions(), (cfg.input_size as u32, cfg.input_size as u32));
    }
}
