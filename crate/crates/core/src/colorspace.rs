//! sRGB ↔ CIELab conversion and the quantized chromaticity palette.
//!
//! Everything downstream of the image decoder works in CIELab: the network
//! sees the lightness plane `L` and predicts chroma `(a, b)`, both directly
//! and as a distribution over a quantized ab palette. This module owns the
//! colorimetry (D65 white, 2° observer), the palette ([`BinTable`]), the
//! soft-encoding of ground-truth chroma against that palette, and the
//! class-rebalancing weights derived from a chroma prior.
//!
//! All conversions are pure f64 and deterministic; converting an 8-bit sRGB
//! image to Lab and back reproduces the original bytes exactly.

use std::fmt::Write as _;
use std::sync::OnceLock;

use image::RgbImage;
use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors from colour conversion and palette handling.
#[derive(Debug, Error)]
pub enum ColorError {
    #[error("input raster must have 3 channels, got {0}")]
    ChannelCount(usize),
    #[error("raster buffer holds {got} bytes, expected {want} ({w}x{h}x{c})")]
    BufferSize { got: usize, want: usize, w: usize, h: usize, c: usize },
    #[error("bin table parse error at line {line}: {msg}")]
    TableParse { line: usize, msg: String },
    #[error("bin table mismatch: {0}")]
    TableMismatch(String),
}

// ---------------------------------------------------------------------------
// Colorimetry: sRGB (D65, 2°) ↔ CIELab
// ---------------------------------------------------------------------------

/// sRGB → linear-light transfer function (IEC 61966-2-1).
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear-light → sRGB transfer function.
fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Linear RGB → XYZ matrix for sRGB primaries with D65 white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// `(6/29)^3`, the linear/cube-root split point of the Lab companding curve.
const LAB_DELTA3: f64 = 216.0 / 24389.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA3 {
        t.cbrt()
    } else {
        // slope 1/(3·(6/29)²) = 841/108
        (841.0 / 108.0) * t + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        (108.0 / 841.0) * (t - 4.0 / 29.0)
    }
}

/// Inverse of [`RGB_TO_XYZ`], computed once by cofactor expansion so the two
/// directions are exact inverses of each other rather than independently
/// rounded constants.
fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| {
        let m = &RGB_TO_XYZ;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
                let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
                // note the transpose: inv[c][r] from the minor of m[r][c]
                inv[c][r] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
            }
        }
        inv
    })
}

/// Convert one sRGB pixel (each channel in `[0,1]`) to `(L, a, b)`.
pub fn srgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let m = &RGB_TO_XYZ;
    let x = m[0][0] * rl + m[0][1] * gl + m[0][2] * bl;
    let y = m[1][0] * rl + m[1][1] * gl + m[1][2] * bl;
    let z = m[2][0] * rl + m[2][1] * gl + m[2][2] * bl;
    let (fx, fy, fz) = (lab_f(x / WHITE[0]), lab_f(y / WHITE[1]), lab_f(z / WHITE[2]));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Convert one `(L, a, b)` pixel back to sRGB, each channel clamped to `[0,1]`.
///
/// Out-of-gamut chroma is handled by clipping the linear RGB components, so
/// every Lab triple maps to some displayable colour.
pub fn lab_pixel_to_srgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = WHITE[0] * lab_f_inv(fx);
    let y = WHITE[1] * lab_f_inv(fy);
    let z = WHITE[2] * lab_f_inv(fz);
    let m = xyz_to_rgb_matrix();
    let rl = m[0][0] * x + m[0][1] * y + m[0][2] * z;
    let gl = m[1][0] * x + m[1][1] * y + m[1][2] * z;
    let bl = m[2][0] * x + m[2][1] * y + m[2][2] * z;
    let clip = |v: f64| linear_to_srgb(v.clamp(0.0, 1.0)).clamp(0.0, 1.0);
    (clip(rl), clip(gl), clip(bl))
}

/// A CIELab image as three `height × width` planes.
///
/// `L` is in `[0, 100]`; `a` and `b` are unbounded in principle but fall in
/// roughly `[-110, 110]` for colours reachable from sRGB.
#[derive(Debug, Clone)]
pub struct LabImage {
    pub l: Array2<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LabImage {
    pub fn height(&self) -> usize {
        self.l.nrows()
    }

    pub fn width(&self) -> usize {
        self.l.ncols()
    }

    /// Stack the chroma planes into a `[2, H, W]` tensor (a first, then b).
    pub fn ab(&self) -> Array3<f64> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((2, h, w));
        out.index_axis_mut(ndarray::Axis(0), 0).assign(&self.a);
        out.index_axis_mut(ndarray::Axis(0), 1).assign(&self.b);
        out
    }
}

/// Convert an 8-bit sRGB image to Lab planes.
pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut l = Array2::zeros((h, w));
    let mut a = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        let (lv, av, bv) = srgb_pixel_to_lab(
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        );
        l[[y as usize, x as usize]] = lv;
        a[[y as usize, x as usize]] = av;
        b[[y as usize, x as usize]] = bv;
    }
    LabImage { l, a, b }
}

/// Convert a packed byte raster to Lab planes, validating the layout.
///
/// `data` must hold `width × height × channels` bytes in row-major RGB order;
/// anything other than 3 channels is rejected.
pub fn rgb_raster_to_lab(
    data: &[u8],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<LabImage, ColorError> {
    if channels != 3 {
        return Err(ColorError::ChannelCount(channels));
    }
    let want = width * height * channels;
    if data.len() != want {
        return Err(ColorError::BufferSize { got: data.len(), want, w: width, h: height, c: channels });
    }
    let mut l = Array2::zeros((height, width));
    let mut a = Array2::zeros((height, width));
    let mut b = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let o = (y * width + x) * 3;
            let (lv, av, bv) = srgb_pixel_to_lab(
                data[o] as f64 / 255.0,
                data[o + 1] as f64 / 255.0,
                data[o + 2] as f64 / 255.0,
            );
            l[[y, x]] = lv;
            a[[y, x]] = av;
            b[[y, x]] = bv;
        }
    }
    Ok(LabImage { l, a, b })
}

/// Convert Lab planes back to an 8-bit sRGB image (values clipped to gamut).
pub fn lab_to_rgb(lab: &LabImage) -> RgbImage {
    let (h, w) = (lab.height(), lab.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = lab_pixel_to_srgb(lab.l[[y, x]], lab.a[[y, x]], lab.b[[y, x]]);
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (r * 255.0).round() as u8,
                    (g * 255.0).round() as u8,
                    (b * 255.0).round() as u8,
                ]),
            );
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Quantized ab palette
// ---------------------------------------------------------------------------

/// Canonical palette data: grid 10, Q=313, frozen from the gamut build below.
const CANONICAL_TABLE_V1: &str = include_str!("data/bins_grid10_v1.txt");

/// The ab-space extent covered by the cell lattice, in either axis.
const AB_LATTICE_BOUND: f64 = 110.0;

/// Sampling stride (per 8-bit channel) of the canonical sRGB gamut sweep.
pub const CANONICAL_SWEEP_STRIDE: usize = 4;

/// Number of bins in the canonical grid-10 palette.
pub const CANONICAL_Q: usize = 313;

/// A quantized ab palette: bin centres on a regular grid, optionally with
/// fitted rebalancing weights and the empirical prior they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    grid: f64,
    centers: Vec<[f64; 2]>,
    weights: Option<Vec<f64>>,
}

impl BinTable {
    pub fn new(grid: f64, centers: Vec<[f64; 2]>) -> Self {
        BinTable { grid, centers, weights: None }
    }

    /// The canonical palette: grid 10, exactly [`CANONICAL_Q`] bins.
    pub fn canonical() -> &'static BinTable {
        static TABLE: OnceLock<BinTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let t = BinTable::parse(CANONICAL_TABLE_V1)
                .expect("embedded canonical bin table must parse");
            assert_eq!(t.q(), CANONICAL_Q, "embedded canonical table has wrong Q");
            t
        })
    }

    /// Number of bins (`Q`).
    pub fn q(&self) -> usize {
        self.centers.len()
    }

    /// Grid pitch in ab units.
    pub fn grid(&self) -> f64 {
        self.grid
    }

    /// Bin centres, sorted ascending by `(a, b)`.
    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    /// Fitted per-bin rebalancing weights, if any.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Attach fitted rebalancing weights (must match `q()`).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, ColorError> {
        if weights.len() != self.q() {
            return Err(ColorError::TableMismatch(format!(
                "{} weights for {} bins",
                weights.len(),
                self.q()
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Index of the bin centre nearest to `(a, b)` in Euclidean distance.
    /// Ties resolve to the lowest index.
    pub fn nearest_bin(&self, a: f64, b: f64) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d = (a - c[0]) * (a - c[0]) + (b - c[1]) * (b - c[1]);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// The `k` nearest bins to `(a, b)`, closest first; ties break on index.
    pub fn nearest_bins(&self, a: f64, b: f64, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.q());
        // Q is ~300, so a full scan plus small partial sort is cheaper and
        // simpler than a spatial structure.
        let mut all: Vec<(usize, f64)> = self
            .centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (a - c[0]) * (a - c[0]) + (b - c[1]) * (b - c[1])))
            .collect();
        all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
        all.truncate(k);
        all
    }

    /// Serialize to the versioned text format (`grid=<g> Q=<q>` header, then
    /// one `index a b [weight]` line per bin).
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "grid={} Q={}", self.grid, self.q());
        for (i, c) in self.centers.iter().enumerate() {
            match &self.weights {
                Some(w) => {
                    let _ = writeln!(out, "{} {} {} {}", i, c[0], c[1], w[i]);
                }
                None => {
                    let _ = writeln!(out, "{} {} {}", i, c[0], c[1]);
                }
            }
        }
        out
    }

    /// Parse the text format produced by [`BinTable::serialize`].
    pub fn parse(text: &str) -> Result<BinTable, ColorError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| ColorError::TableParse { line: 1, msg: "empty table".into() })?;
        let parse_kv = |line: usize, tok: &str, key: &str| -> Result<f64, ColorError> {
            let val = tok.strip_prefix(key).and_then(|s| s.strip_prefix('=')).ok_or_else(|| {
                ColorError::TableParse { line, msg: format!("expected `{key}=<value>`, got `{tok}`") }
            })?;
            val.parse::<f64>()
                .map_err(|e| ColorError::TableParse { line, msg: format!("bad {key}: {e}") })
        };
        let mut toks = header.split_whitespace();
        let grid = parse_kv(1, toks.next().unwrap_or(""), "grid")?;
        let q = parse_kv(1, toks.next().unwrap_or(""), "Q")? as usize;
        let mut centers = Vec::with_capacity(q);
        let mut weights: Vec<f64> = Vec::new();
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 && fields.len() != 4 {
                return Err(ColorError::TableParse {
                    line: ln + 1,
                    msg: format!("expected 3 or 4 fields, got {}", fields.len()),
                });
            }
            let idx: usize = fields[0].parse().map_err(|e| ColorError::TableParse {
                line: ln + 1,
                msg: format!("bad index: {e}"),
            })?;
            if idx != centers.len() {
                return Err(ColorError::TableParse {
                    line: ln + 1,
                    msg: format!("index {} out of order (expected {})", idx, centers.len()),
                });
            }
            let a: f64 = fields[1].parse().map_err(|e| ColorError::TableParse {
                line: ln + 1,
                msg: format!("bad a: {e}"),
            })?;
            let b: f64 = fields[2].parse().map_err(|e| ColorError::TableParse {
                line: ln + 1,
                msg: format!("bad b: {e}"),
            })?;
            centers.push([a, b]);
            if fields.len() == 4 {
                weights.push(fields[3].parse().map_err(|e| ColorError::TableParse {
                    line: ln + 1,
                    msg: format!("bad weight: {e}"),
                })?);
            }
        }
        if centers.len() != q {
            return Err(ColorError::TableParse {
                line: 1,
                msg: format!("header says Q={} but {} bins listed", q, centers.len()),
            });
        }
        if !weights.is_empty() && weights.len() != centers.len() {
            return Err(ColorError::TableParse {
                line: 1,
                msg: "weights present on some lines but not all".into(),
            });
        }
        let mut t = BinTable::new(grid, centers);
        if !weights.is_empty() {
            t = t.with_weights(weights)?;
        }
        Ok(t)
    }

    /// SHA-256 of the serialized table, used to tie checkpoints and run
    /// manifests to the exact palette they were produced with.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.serialize().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every ab value reachable from 8-bit sRGB, sampled with the given per-channel
/// stride (endpoint 255 always included).
fn sweep_srgb_ab(stride: usize) -> Vec<[f64; 2]> {
    let mut vals: Vec<u8> = (0..256).step_by(stride.max(1)).map(|v| v as u8).collect();
    if *vals.last().unwrap() != 255 {
        vals.push(255);
    }
    let mut out = Vec::with_capacity(vals.len().pow(3));
    for &r in &vals {
        for &g in &vals {
            for &b in &vals {
                let (_, a, bb) =
                    srgb_pixel_to_lab(r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
                out.push([a, bb]);
            }
        }
    }
    out
}

/// All lattice centres (multiples of `grid` with `|a|,|b| ≤ 110`) that are the
/// nearest cell centre of at least one swept sRGB chroma value.
///
/// This is the raw "touched cells" sweep at any grid pitch. At grid 10 /
/// stride 4 it yields 261 cells; see [`build_gamut_bins`] for how the
/// canonical 313-bin palette extends it.
pub fn swept_gamut_bins(grid: f64, stride: usize) -> BinTable {
    let cloud = sweep_srgb_ab(stride);
    let mut cells: Vec<[i64; 2]> = cloud
        .iter()
        .map(|p| [(p[0] / grid).round() as i64, (p[1] / grid).round() as i64])
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let bound = (AB_LATTICE_BOUND / grid).floor() as i64;
    let centers: Vec<[f64; 2]> = cells
        .into_iter()
        .filter(|c| c[0].abs() <= bound && c[1].abs() <= bound)
        .map(|c| [c[0] as f64 * grid, c[1] as f64 * grid])
        .collect();
    BinTable::new(grid, centers)
}

/// Build the canonical quantized palette: grid 10, exactly [`CANONICAL_Q`]
/// bins.
///
/// The palette consists of the 313 lattice centres (multiples of 10 with
/// `|a|,|b| ≤ 110`) closest to the sRGB chroma gamut, measured as Euclidean
/// distance from each centre to the nearest swept sRGB ab value (stride-4
/// channel sweep). Centres inside the gamut sit at distance ≈0; the remainder
/// of the palette is the nearest out-of-gamut fringe — exactly the bins that
/// receive mass when near-boundary chroma is soft-encoded. The 313/314 rank
/// cut is wide (13.8 vs 14.2 ab units), so the selection is stable. The result
/// is identical to the frozen table behind [`BinTable::canonical`].
pub fn build_gamut_bins(grid: f64) -> BinTable {
    assert!(grid > 0.0, "grid pitch must be positive");
    let cloud = sweep_srgb_ab(CANONICAL_SWEEP_STRIDE);
    let bound = (AB_LATTICE_BOUND / grid).floor() as i64;
    let mut ranked: Vec<(f64, [f64; 2])> = Vec::new();
    for ia in -bound..=bound {
        for ib in -bound..=bound {
            let c = [ia as f64 * grid, ib as f64 * grid];
            let mut d2 = f64::INFINITY;
            for p in &cloud {
                let d = (p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]);
                if d < d2 {
                    d2 = d;
                }
            }
            ranked.push((d2, c));
        }
    }
    ranked.sort_by(|x, y| {
        x.0.partial_cmp(&y.0).unwrap().then_with(|| {
            (x.1[0], x.1[1]).partial_cmp(&(y.1[0], y.1[1])).unwrap()
        })
    });
    let keep = CANONICAL_Q.min(ranked.len());
    let mut centers: Vec<[f64; 2]> = ranked[..keep].iter().map(|r| r.1).collect();
    centers.sort_by(|x, y| (x[0], x[1]).partial_cmp(&(y[0], y[1])).unwrap());
    BinTable::new(grid, centers)
}

// ---------------------------------------------------------------------------
// Soft encoding
// ---------------------------------------------------------------------------

/// Gaussian width (ab units) of the canonical soft-encoding kernel.
pub const SOFT_ENCODE_SIGMA: f64 = 5.0;

/// Number of nearest bins that receive soft-encoding mass.
pub const SOFT_ENCODE_K: usize = 5;

/// A dense per-pixel distribution over palette bins, shape `[H, W, Q]`.
///
/// Each pixel's bin weights are nonnegative and sum to 1.
#[derive(Debug, Clone)]
pub struct ColorDistribution {
    pub values: Array3<f64>,
}

impl ColorDistribution {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn q(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Sparse form of [`ColorDistribution`]: the `k` supported bins per pixel.
///
/// Training caches targets in this form — a dense `[H, W, Q]` tensor per
/// sample per level would dominate memory while carrying ≤ `k` nonzeros per
/// pixel.
#[derive(Debug, Clone)]
pub struct SparseEncoding {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// Bin indices, row-major `[H·W·k]`; per pixel sorted nearest-first.
    pub bins: Vec<u32>,
    /// Matching weights; each pixel's `k` weights sum to 1.
    pub weights: Vec<f64>,
}

impl SparseEncoding {
    /// The supported bins and weights of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> (&[u32], &[f64]) {
        let o = (y * self.width + x) * self.k;
        (&self.bins[o..o + self.k], &self.weights[o..o + self.k])
    }

    /// Index of the strongest bin of one pixel (nearest bin of the encoding).
    pub fn top_bin(&self, y: usize, x: usize) -> usize {
        self.bins[(y * self.width + x) * self.k] as usize
    }

    /// Expand to the dense `[H, W, Q]` distribution.
    pub fn to_dense(&self, q: usize) -> ColorDistribution {
        let mut values = Array3::zeros((self.height, self.width, q));
        for y in 0..self.height {
            for x in 0..self.width {
                let (bins, ws) = self.pixel(y, x);
                for (b, w) in bins.iter().zip(ws) {
                    values[[y, x, *b as usize]] += *w;
                }
            }
        }
        ColorDistribution { values }
    }
}

/// Soft-encode a chroma image (`[2, H, W]`, a then b) against the palette.
///
/// Each pixel distributes mass over its `k` nearest bin centres with Gaussian
/// weights `exp(-d²/2σ²)`, normalized to sum 1. Nearest-first order within a
/// pixel; distance ties resolve to the lower bin index.
pub fn soft_encode_sparse(
    ab: &Array3<f64>,
    bins: &BinTable,
    sigma: f64,
    k: usize,
) -> SparseEncoding {
    assert_eq!(ab.shape()[0], 2, "chroma tensor must be [2, H, W]");
    let (h, w) = (ab.shape()[1], ab.shape()[2]);
    let k = k.min(bins.q());
    let mut out = SparseEncoding {
        height: h,
        width: w,
        k,
        bins: vec![0; h * w * k],
        weights: vec![0.0; h * w * k],
    };
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    for y in 0..h {
        for x in 0..w {
            let nearest = bins.nearest_bins(ab[[0, y, x]], ab[[1, y, x]], k);
            let mut total = 0.0;
            let o = (y * w + x) * k;
            for (slot, (idx, d2)) in nearest.iter().enumerate() {
                let wgt = (-d2 * inv_two_sigma2).exp();
                out.bins[o + slot] = *idx as u32;
                out.weights[o + slot] = wgt;
                total += wgt;
            }
            for slot in 0..k {
                out.weights[o + slot] /= total;
            }
        }
    }
    out
}

/// Dense-output form of [`soft_encode_sparse`].
pub fn soft_encode(ab: &Array3<f64>, bins: &BinTable, sigma: f64, k: usize) -> ColorDistribution {
    soft_encode_sparse(ab, bins, sigma, k).to_dense(bins.q())
}

/// Decode a distribution back to chroma by expectation over bin centres.
///
/// The annealed-mean style decode used for inspection; the network's own
/// chroma head learns its decode, so this is a diagnostic, not the main path.
pub fn expected_ab(dist: &ColorDistribution, bins: &BinTable) -> Array3<f64> {
    let (h, w) = (dist.height(), dist.width());
    let mut out = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut a = 0.0;
            let mut b = 0.0;
            for (qi, c) in bins.centers().iter().enumerate() {
                let p = dist.values[[y, x, qi]];
                a += p * c[0];
                b += p * c[1];
            }
            out[[0, y, x]] = a;
            out[[1, y, x]] = b;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Class rebalancing
// ---------------------------------------------------------------------------

/// Gaussian width (ab units) used to smooth the empirical prior.
pub const PRIOR_SIGMA: f64 = 5.0;

/// Uniform-mixing coefficient of the rebalancing weights.
pub const REBALANCE_LAMBDA: f64 = 0.5;

/// Smooth a per-bin prior with a Gaussian kernel over bin-centre distances.
///
/// Each bin's smoothed mass is the kernel-weighted average of its neighbours'
/// masses (kernel normalized per bin, so edge bins are averaged over the
/// neighbours they actually have); the result is renormalized to sum 1.
/// `sigma <= 0` skips smoothing and just normalizes.
pub fn smooth_prior(bins: &BinTable, prior: &[f64], sigma: f64) -> Vec<f64> {
    assert_eq!(prior.len(), bins.q(), "prior length must match bin count");
    let mut out = vec![0.0; prior.len()];
    if sigma <= 0.0 {
        out.copy_from_slice(prior);
    } else {
        let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
        let centers = bins.centers();
        for (qi, cq) in centers.iter().enumerate() {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ri, cr) in centers.iter().enumerate() {
                let d2 = (cq[0] - cr[0]) * (cq[0] - cr[0]) + (cq[1] - cr[1]) * (cq[1] - cr[1]);
                let kw = (-d2 * inv_two_sigma2).exp();
                acc += kw * prior[ri];
                norm += kw;
            }
            out[qi] = acc / norm;
        }
    }
    let total: f64 = out.iter().sum();
    assert!(total > 0.0, "prior must have positive mass");
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Class-rebalancing weights from a smoothed prior.
///
/// `w_q ∝ ((1-λ)·p̃_q + λ/Q)^-1`, scaled so the prior-expected weight
/// `Σ_q p̃_q·w_q` is 1. With λ=1 every weight is exactly 1.
pub fn rebalancing_weights(bins: &BinTable, smoothed_prior: &[f64], lambda: f64) -> Vec<f64> {
    let q = bins.q();
    assert_eq!(smoothed_prior.len(), q);
    assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0,1]");
    let mut w: Vec<f64> = smoothed_prior
        .iter()
        .map(|p| 1.0 / ((1.0 - lambda) * p + lambda / q as f64))
        .collect();
    let expected: f64 = smoothed_prior.iter().zip(&w).map(|(p, wq)| p * wq).sum();
    for v in &mut w {
        *v /= expected;
    }
    w
}
