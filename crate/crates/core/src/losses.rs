//! Training objectives: quantization cross-entropy and chroma regression.
//!
//! The network emits two coupled predictions — a per-pixel distribution `Ẑ`
//! over palette bins and direct chroma planes `(â, b̂)` — and the training
//! loss is simply their sum: a class-rebalanced cross-entropy against the
//! soft-encoded ground truth, plus the summed squared chroma error. Both
//! terms are means over batch and pixels, so their magnitudes are resolution
//! independent and the per-level losses of a growing decoder are comparable.
//!
//! Each loss returns its gradient with respect to the prediction it scores;
//! the cross-entropy gradient is taken with respect to the post-softmax
//! distribution, and composing it with the softmax backward yields the usual
//! `w·(Ẑ − Z)` logit gradient.

use ndarray::{Array3, Array4};

use crate::colorspace::{ColorDistribution, SparseEncoding};

/// Probabilities below this are clamped inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-10;

/// One training step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub quant: f64,
    pub color: f64,
}

impl LossReport {
    /// The optimisation objective: the two terms summed with unit weights.
    pub fn total(&self) -> f64 {
        self.quant + self.color
    }
}

/// Per-pixel rebalancing factor: the fitted weight of the pixel's dominant
/// bin, or 1 when no weights are fitted.
fn pixel_weight(weights: Option<&[f64]>, top_bin: usize) -> f64 {
    weights.map_or(1.0, |w| w[top_bin])
}

/// Rebalanced quantization cross-entropy over a batch.
///
/// `z_hat` is the predicted distribution `[N, Q, H, W]` (channels already
/// softmaxed); `targets` hold one soft-encoded ground truth per batch item at
/// the same resolution. Returns the scalar loss — the mean over batch and
/// pixels of `v(Z)·(−Σ_q Z_q·ln max(Ẑ_q, ε))` — and its gradient with respect
/// to `z_hat`.
pub fn quantization_loss(
    z_hat: &Array4<f64>,
    targets: &[SparseEncoding],
    weights: Option<&[f64]>,
) -> (f64, Array4<f64>) {
    let (n, q, h, w) = z_hat.dim();
    assert_eq!(n, targets.len(), "batch size mismatch");
    let mut loss = 0.0;
    let mut grad = Array4::zeros((n, q, h, w));
    let count = (n * h * w) as f64;
    for (ni, t) in targets.iter().enumerate() {
        assert_eq!((t.height, t.width), (h, w), "target resolution mismatch");
        for y in 0..h {
            for x in 0..w {
                let (bins, ws) = t.pixel(y, x);
                let v = pixel_weight(weights, t.top_bin(y, x));
                for (b, zw) in bins.iter().zip(ws) {
                    if *zw == 0.0 {
                        continue;
                    }
                    let p = z_hat[[ni, *b as usize, y, x]];
                    loss -= v * zw * p.max(LOG_CLAMP).ln();
                    if p > LOG_CLAMP {
                        grad[[ni, *b as usize, y, x]] -= v * zw / p;
                    }
                }
            }
        }
    }
    (loss / count, grad / count)
}

/// [`quantization_loss`] for dense `[H, W, Q]` ground-truth distributions.
pub fn quantization_loss_dense(
    z_hat: &Array4<f64>,
    targets: &[ColorDistribution],
    weights: Option<&[f64]>,
) -> (f64, Array4<f64>) {
    let (n, q, h, w) = z_hat.dim();
    assert_eq!(n, targets.len(), "batch size mismatch");
    let mut loss = 0.0;
    let mut grad = Array4::zeros((n, q, h, w));
    let count = (n * h * w) as f64;
    for (ni, t) in targets.iter().enumerate() {
        assert_eq!((t.height(), t.width(), t.q()), (h, w, q), "target shape mismatch");
        for y in 0..h {
            for x in 0..w {
                // dominant bin decides the rebalancing factor; ties take the
                // lowest index, matching the sparse encoding's ordering
                let mut top = 0;
                let mut top_w = f64::NEG_INFINITY;
                for qi in 0..q {
                    let zw = t.values[[y, x, qi]];
                    if zw > top_w {
                        top_w = zw;
                        top = qi;
                    }
                }
                let v = pixel_weight(weights, top);
                for qi in 0..q {
                    let zw = t.values[[y, x, qi]];
                    if zw == 0.0 {
                        continue;
                    }
                    let p = z_hat[[ni, qi, y, x]];
                    loss -= v * zw * p.max(LOG_CLAMP).ln();
                    if p > LOG_CLAMP {
                        grad[[ni, qi, y, x]] -= v * zw / p;
                    }
                }
            }
        }
    }
    (loss / count, grad / count)
}

/// Chroma regression: mean over batch and pixels of `(â−a)² + (b̂−b)²`.
///
/// `ab_hat` is `[N, 2, H, W]`; `targets` hold one `[2, H, W]` ground-truth
/// chroma tensor per batch item. Returns the loss and its gradient.
pub fn color_error_loss(ab_hat: &Array4<f64>, targets: &[Array3<f64>]) -> (f64, Array4<f64>) {
    let (n, c, h, w) = ab_hat.dim();
    assert_eq!(c, 2, "chroma prediction must have two channels");
    assert_eq!(n, targets.len(), "batch size mismatch");
    let count = (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros((n, c, h, w));
    for (ni, t) in targets.iter().enumerate() {
        assert_eq!(t.dim(), (2, h, w), "target chroma shape mismatch");
        for ci in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let d = ab_hat[[ni, ci, y, x]] - t[[ci, y, x]];
                    loss += d * d;
                    grad[[ni, ci, y, x]] = 2.0 * d / count;
                }
            }
        }
    }
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{soft_encode_sparse, BinTable};
    use crate::nn::testutil::{check_grad, rand_array, sample_coords};
    use crate::nn::ChannelSoftmax;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// A positive random distribution tensor, softmax-normalized per pixel.
    fn random_zhat(rng: &mut ChaCha20Rng, n: usize, q: usize, h: usize, w: usize) -> Array4<f64> {
        let logits: Array4<f64> =
            (rand_array(rng, &[n, q, h, w]) * 2.0).into_dimensionality().unwrap();
        ChannelSoftmax::new().forward(&logits, false)
    }

    fn encode_points(bins: &BinTable, pts: &[(f64, f64)], h: usize, w: usize) -> SparseEncoding {
        let mut ab = Array3::zeros((2, h, w));
        for (i, (a, b)) in pts.iter().enumerate() {
            ab[[0, i / w, i % w]] = *a;
            ab[[1, i / w, i % w]] = *b;
        }
        soft_encode_sparse(&ab, bins, 5.0, 5)
    }

    #[test]
    fn uniform_prediction_scores_ln_q() {
        let bins = BinTable::canonical();
        let q = bins.q();
        let (h, w) = (2, 3);
        let z_hat = Array4::from_elem((1, q, h, w), 1.0 / q as f64);
        let t = encode_points(bins, &[(0.0, 0.0), (30.0, -20.0), (5.0, 5.0), (-40.0, 60.0), (12.0, 7.0), (0.0, -80.0)], h, w);
        let (loss, _) = quantization_loss(&z_hat, &[t], None);
        // −Σ_q Z_q·ln(1/Q) = ln Q for every pixel, any normalized target
        assert_abs_diff_eq!(loss, (q as f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 5.746203, epsilon = 1e-6);
    }

    #[test]
    fn perfect_one_hot_prediction_scores_zero() {
        let bins = BinTable::canonical();
        let q = bins.q();
        // σ→0, k=1 puts all target mass on the nearest bin
        let mut ab = Array3::zeros((2, 1, 1));
        ab[[0, 0, 0]] = 20.0;
        ab[[1, 0, 0]] = 30.0;
        let t = soft_encode_sparse(&ab, bins, 1e-9, 1);
        let hot = t.top_bin(0, 0);
        let mut z_hat = Array4::zeros((1, q, 1, 1));
        z_hat[[0, hot, 0, 0]] = 1.0;
        let (loss, _) = quantization_loss(&z_hat, &[t], None);
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let bins = BinTable::canonical();
        let q = bins.q();
        let mut ab = Array3::zeros((2, 1, 1));
        ab[[0, 0, 0]] = 20.0;
        ab[[1, 0, 0]] = 30.0;
        let t = soft_encode_sparse(&ab, bins, 1e-9, 1);
        let z_hat = Array4::zeros((1, q, 1, 1)); // all-zero prediction
        let (loss, grad) = quantization_loss(&z_hat, &[t], None);
        assert_abs_diff_eq!(loss, -LOG_CLAMP.ln(), epsilon = 1e-9); // 10·ln 10
        // clamped region has zero gradient
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rebalancing_weights_scale_pixel_terms() {
        let bins = BinTable::canonical();
        let q = bins.q();
        let z_hat = Array4::from_elem((1, q, 1, 2), 1.0 / q as f64);
        let t = encode_points(bins, &[(0.0, 0.0), (70.0, 60.0)], 1, 2);
        let b0 = t.top_bin(0, 0);
        let b1 = t.top_bin(0, 1);
        let mut weights = vec![1.0; q];
        weights[b0] = 3.0;
        weights[b1] = 0.5;
        let (loss, _) = quantization_loss(&z_hat, &[t], Some(&weights));
        // each pixel contributes v·ln Q; mean over the two pixels
        let want = (3.0 + 0.5) / 2.0 * (q as f64).ln();
        assert_abs_diff_eq!(loss, want, epsilon = 1e-12);
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let bins = BinTable::canonical();
        let q = bins.q();
        let (h, w) = (3, 2);
        let z_hat = random_zhat(&mut rng, 2, q, h, w);
        let pts1 = [(0.0, 0.0), (25.0, -35.0), (60.0, 60.0), (-10.0, 15.0), (5.0, -5.0), (40.0, 10.0)];
        let pts2 = [(12.0, 3.0), (-70.0, 50.0), (8.0, 8.0), (0.0, -40.0), (33.0, 21.0), (-5.0, 90.0)];
        let s1 = encode_points(bins, &pts1, h, w);
        let s2 = encode_points(bins, &pts2, h, w);
        let mut weights = vec![1.0; q];
        for (i, wq) in weights.iter_mut().enumerate() {
            *wq = 0.5 + (i % 5) as f64 * 0.4;
        }
        let (ls, gs) = quantization_loss(&z_hat, &[s1.clone(), s2.clone()], Some(&weights));
        let d1 = s1.to_dense(q);
        let d2 = s2.to_dense(q);
        let (ld, gd) = quantization_loss_dense(&z_hat, &[d1, d2], Some(&weights));
        assert_abs_diff_eq!(ls, ld, epsilon = 1e-12);
        for (a, b) in gs.iter().zip(gd.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn quantization_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let bins = BinTable::canonical();
        let q = bins.q();
        // mild logits keep probabilities away from zero, where the central
        // difference of ln() loses accuracy
        let logits: Array4<f64> =
            (rand_array(&mut rng, &[1, q, 2, 2]) * 0.5).into_dimensionality().unwrap();
        let z_hat = ChannelSoftmax::new().forward(&logits, false);
        let t = encode_points(bins, &[(0.0, 0.0), (25.0, -35.0), (60.0, 60.0), (-10.0, 15.0)], 2, 2);
        let (_, grad) = quantization_loss(&z_hat, &[t.clone()], None);

        // sample coordinates on the target support (elsewhere the grad is 0)
        let mut coords = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                let (bins_px, _) = t.pixel(y, x);
                coords.push(vec![0, bins_px[0] as usize, y, x]);
                coords.push(vec![0, bins_px[3] as usize, y, x]);
            }
        }
        let mut zm = z_hat.clone();
        let tc = t.clone();
        check_grad(
            "quant dzhat",
            &coords,
            |c| grad[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                zm[[c[0], c[1], c[2], c[3]]] += d;
                let l = quantization_loss(&zm, &[tc.clone()], None).0;
                zm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );
    }

    #[test]
    fn softmax_composition_gives_zhat_minus_z_gradient() {
        // Composing the softmax backward with the cross-entropy gradient must
        // reduce to v·(Ẑ − Z)/count on the logits.
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let bins = BinTable::canonical();
        let q = bins.q();
        let logits: Array4<f64> =
            (rand_array(&mut rng, &[1, q, 2, 2]) * 3.0).into_dimensionality().unwrap();
        let mut sm = ChannelSoftmax::new();
        let z_hat = sm.forward(&logits, true);
        let t = encode_points(bins, &[(0.0, 0.0), (25.0, -35.0), (60.0, 60.0), (-10.0, 15.0)], 2, 2);
        let mut weights = vec![1.0; q];
        for (i, wq) in weights.iter_mut().enumerate() {
            *wq = 0.25 + (i % 4) as f64;
        }
        let (_, dz) = quantization_loss(&z_hat, &[t.clone()], Some(&weights));
        let dlogits = sm.backward(&dz);

        let dense = t.to_dense(q);
        let count = 4.0;
        for y in 0..2 {
            for x in 0..2 {
                let v = weights[t.top_bin(y, x)];
                for qi in 0..q {
                    let want =
                        v * (z_hat[[0, qi, y, x]] - dense.values[[y, x, qi]]) / count;
                    assert_abs_diff_eq!(dlogits[[0, qi, y, x]], want, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn color_error_hand_value_and_gradient() {
        // 1×2 image: prediction off by (1,2) at pixel 0 and (0,−3) at pixel 1
        // → loss = ((1+4) + 9)/2 = 7
        let mut ab_hat = Array4::zeros((1, 2, 1, 2));
        ab_hat[[0, 0, 0, 0]] = 1.0;
        ab_hat[[0, 1, 0, 0]] = 2.0;
        ab_hat[[0, 1, 0, 1]] = -3.0;
        let target = Array3::zeros((2, 1, 2));
        let (loss, grad) = color_error_loss(&ab_hat, &[target.clone()]);
        assert_abs_diff_eq!(loss, 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[[0, 0, 0, 0]], 2.0 * 1.0 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[[0, 1, 0, 1]], 2.0 * -3.0 / 2.0, epsilon = 1e-12);

        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let pred: Array4<f64> =
            rand_array(&mut rng, &[2, 2, 3, 3]).into_dimensionality().unwrap();
        let t1: Array3<f64> = rand_array(&mut rng, &[2, 3, 3]).into_dimensionality().unwrap();
        let t2: Array3<f64> = rand_array(&mut rng, &[2, 3, 3]).into_dimensionality().unwrap();
        let (_, grad) = color_error_loss(&pred, &[t1.clone(), t2.clone()]);
        let mut pm = pred.clone();
        check_grad(
            "color dab",
            &sample_coords(&[2, 2, 3, 3], 12),
            |c| grad[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                pm[[c[0], c[1], c[2], c[3]]] += d;
                let l = color_error_loss(&pm, &[t1.clone(), t2.clone()]).0;
                pm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );
    }

    #[test]
    fn total_is_sum_of_terms() {
        let r = LossReport { quant: 2.25, color: 0.75 };
        assert_abs_diff_eq!(r.total(), 3.0, epsilon = 1e-15);
    }
}
