//! Pointwise activations: ReLU and per-pixel channel softmax.

use ndarray::{Array4, Axis};

/// Rectified linear unit with a cached pass-through mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array4<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = x.mapv(|v| v.max(0.0));
        self.mask = if train {
            Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
        } else {
            None
        };
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.as_ref().expect("relu backward without cached forward");
        assert_eq!(dy.dim(), mask.dim(), "relu upstream gradient shape");
        dy * mask
    }
}

/// Softmax over the channel axis of `[N, C, H, W]`, independently per pixel.
///
/// Turns the quantization head's logits into a distribution over palette
/// bins; every pixel's channel vector sums to exactly 1.
#[derive(Debug, Clone, Default)]
pub struct ChannelSoftmax {
    y: Option<Array4<f64>>,
}

impl ChannelSoftmax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let mut maxv = f64::NEG_INFINITY;
                    for ci in 0..c {
                        maxv = maxv.max(x[[ni, ci, yi, xi]]);
                    }
                    let mut total = 0.0;
                    for ci in 0..c {
                        let e = (x[[ni, ci, yi, xi]] - maxv).exp();
                        y[[ni, ci, yi, xi]] = e;
                        total += e;
                    }
                    for ci in 0..c {
                        y[[ni, ci, yi, xi]] /= total;
                    }
                }
            }
        }
        self.y = if train { Some(y.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let y = self.y.as_ref().expect("softmax backward without cached forward");
        assert_eq!(dy.dim(), y.dim(), "softmax upstream gradient shape");
        let (n, c, h, w) = y.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += dy[[ni, ci, yi, xi]] * y[[ni, ci, yi, xi]];
                    }
                    for ci in 0..c {
                        dx[[ni, ci, yi, xi]] =
                            y[[ni, ci, yi, xi]] * (dy[[ni, ci, yi, xi]] - dot);
                    }
                }
            }
        }
        dx
    }
}

/// Check that every pixel of a `[N, C, H, W]` tensor sums to 1 over channels.
pub fn is_channel_distribution(x: &Array4<f64>, tol: f64) -> bool {
    let sums = x.sum_axis(Axis(1));
    sums.iter().all(|s| (s - 1.0).abs() <= tol) && x.iter().all(|v| *v >= 0.0)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grad, rand_array, sample_coords};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn relu_clamps_and_masks() {
        let mut x = Array4::zeros((1, 1, 1, 4));
        x[[0, 0, 0, 0]] = -2.0;
        x[[0, 0, 0, 1]] = 3.0;
        x[[0, 0, 0, 3]] = -0.5;
        let mut r = Relu::new();
        let y = r.forward(&x, true);
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 1]], 3.0);
        let dy = Array4::from_elem((1, 1, 1, 4), 1.0);
        let dx = r.backward(&dy);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
        assert_eq!(dx[[0, 0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 3]], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let x: Array4<f64> =
            (rand_array(&mut rng, &[2, 7, 3, 3]) * 5.0).into_dimensionality().unwrap();
        let mut s = ChannelSoftmax::new();
        let y = s.forward(&x, false);
        assert!(is_channel_distribution(&y, 1e-12));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let x: Array4<f64> =
            rand_array(&mut rng, &[1, 5, 2, 2]).into_dimensionality().unwrap();
        let mut s = ChannelSoftmax::new();
        let y1 = s.forward(&x, false);
        let y2 = s.forward(&(&x + 100.0), false);
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let x: Array4<f64> =
            rand_array(&mut rng, &[1, 4, 2, 2]).into_dimensionality().unwrap();
        let dy: Array4<f64> =
            rand_array(&mut rng, &[1, 4, 2, 2]).into_dimensionality().unwrap();
        let mut s = ChannelSoftmax::new();
        let _ = s.forward(&x, true);
        let dx = s.backward(&dy);

        let mut xm = x.clone();
        let mut sf = ChannelSoftmax::new();
        check_grad(
            "softmax dx",
            &sample_coords(&[1, 4, 2, 2], 16),
            |c| dx[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                xm[[c[0], c[1], c[2], c[3]]] += d;
                let l = (sf.forward(&xm, false) * &dy).sum();
                xm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );
    }
}
