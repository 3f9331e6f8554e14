//! Spatial resampling: bilinear resize (both directions) and area averaging.

use ndarray::{Array3, Array4};

/// Bilinear resize to an explicit target size (half-pixel centre alignment).
///
/// Used for every decoder upsample: the target size is data-independent, so
/// odd step sizes like 15→16 or 24→28 are exact by construction. Identity when
/// the target equals the input size.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    out_h: usize,
    out_w: usize,
    cache: Option<[usize; 4]>,
}

/// The four source taps and weights of one output coordinate.
#[inline]
fn taps(dst: usize, out: usize, inp: usize) -> (usize, usize, f64) {
    let scale = inp as f64 / out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(inp - 1);
    let i1 = (i0 + 1).min(inp - 1);
    let frac = src - i0 as f64;
    (i0, i1, frac)
}

impl BilinearResize {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        BilinearResize { out_h, out_w, cache: None }
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::zeros((n, c, self.out_h, self.out_w));
        for yi in 0..self.out_h {
            let (y0, y1, fy) = taps(yi, self.out_h, h);
            for xi in 0..self.out_w {
                let (x0, x1, fx) = taps(xi, self.out_w, w);
                for ni in 0..n {
                    for ci in 0..c {
                        let a = x[[ni, ci, y0, x0]];
                        let b = x[[ni, ci, y0, x1]];
                        let cc = x[[ni, ci, y1, x0]];
                        let d = x[[ni, ci, y1, x1]];
                        y[[ni, ci, yi, xi]] = a * (1.0 - fy) * (1.0 - fx)
                            + b * (1.0 - fy) * fx
                            + cc * fy * (1.0 - fx)
                            + d * fy * fx;
                    }
                }
            }
        }
        self.cache = if train { Some([n, c, h, w]) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let [n, c, h, w] = self.cache.expect("resize backward without cached forward");
        assert_eq!(dy.dim(), (n, c, self.out_h, self.out_w), "resize upstream gradient shape");
        let mut dx = Array4::zeros((n, c, h, w));
        for yi in 0..self.out_h {
            let (y0, y1, fy) = taps(yi, self.out_h, h);
            for xi in 0..self.out_w {
                let (x0, x1, fx) = taps(xi, self.out_w, w);
                for ni in 0..n {
                    for ci in 0..c {
                        let g = dy[[ni, ci, yi, xi]];
                        dx[[ni, ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                        dx[[ni, ci, y0, x1]] += g * (1.0 - fy) * fx;
                        dx[[ni, ci, y1, x0]] += g * fy * (1.0 - fx);
                        dx[[ni, ci, y1, x1]] += g * fy * fx;
                    }
                }
            }
        }
        dx
    }
}

/// Average-pool a channel-first `[C, H, W]` tensor to an exact target size.
///
/// Each output cell averages the source rows `⌊i·H/oh⌋ .. ⌈(i+1)·H/oh⌉` (and
/// likewise for columns), so uneven ratios are handled without interpolation.
/// Used to bring ground-truth chroma down to decoder-level resolutions.
pub fn area_downsample(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(out_h <= h && out_w <= w, "area_downsample only shrinks: {h}x{w} -> {out_h}x{out_w}");
    let mut y = Array3::zeros((c, out_h, out_w));
    for yi in 0..out_h {
        let ys = yi * h / out_h;
        let ye = ((yi + 1) * h).div_ceil(out_h);
        for xi in 0..out_w {
            let xs = xi * w / out_w;
            let xe = ((xi + 1) * w).div_ceil(out_w);
            let count = ((ye - ys) * (xe - xs)) as f64;
            for ci in 0..c {
                let mut acc = 0.0;
                for sy in ys..ye {
                    for sx in xs..xe {
                        acc += x[[ci, sy, sx]];
                    }
                }
                y[[ci, yi, xi]] = acc / count;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grad, rand_array, sample_coords};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identity_when_sizes_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x: Array4<f64> =
            rand_array(&mut rng, &[1, 2, 5, 5]).into_dimensionality().unwrap();
        let mut r = BilinearResize::new(5, 5);
        let y = r.forward(&x, false);
        for (a, b) in x.iter().zip(y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_a_constant_stays_constant() {
        let x = Array4::from_elem((1, 1, 4, 4), 3.25);
        let mut r = BilinearResize::new(8, 8);
        let y = r.forward(&x, false);
        for v in y.iter() {
            assert_abs_diff_eq!(*v, 3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_matches_half_pixel_hand_values() {
        // 1×1×1×2 input [0, 1] doubled to width 4 with half-pixel centres:
        // src = (d+0.5)/2 − 0.5 → [-0.25, 0.25, 0.75, 1.25] → [0, .25, .75, 1]
        let mut x = Array4::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 1]] = 1.0;
        let mut r = BilinearResize::new(1, 4);
        let y = r.forward(&x, false);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (i, w) in want.iter().enumerate() {
            assert_abs_diff_eq!(y[[0, 0, 0, i]], *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn odd_step_upsample_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let x: Array4<f64> =
            rand_array(&mut rng, &[2, 3, 15, 15]).into_dimensionality().unwrap();
        let mut r = BilinearResize::new(16, 16);
        assert_eq!(r.forward(&x, false).dim(), (2, 3, 16, 16));
        let mut r = BilinearResize::new(28, 28);
        assert_eq!(r.forward(&x, false).dim(), (2, 3, 28, 28));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let x: Array4<f64> =
            rand_array(&mut rng, &[1, 2, 3, 3]).into_dimensionality().unwrap();
        let dy: Array4<f64> =
            rand_array(&mut rng, &[1, 2, 4, 4]).into_dimensionality().unwrap();
        let mut r = BilinearResize::new(4, 4);
        let _ = r.forward(&x, true);
        let dx = r.backward(&dy);

        let mut xm = x.clone();
        let mut rf = BilinearResize::new(4, 4);
        check_grad(
            "resize dx",
            &sample_coords(&[1, 2, 3, 3], 12),
            |c| dx[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                xm[[c[0], c[1], c[2], c[3]]] += d;
                let l = (rf.forward(&xm, false) * &dy).sum();
                xm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let mut x = Array3::zeros((1, 4, 4));
        for y in 0..4 {
            for xx in 0..4 {
                x[[0, y, xx]] = (y * 4 + xx) as f64;
            }
        }
        let y = area_downsample(&x, 2, 2);
        assert_abs_diff_eq!(y[[0, 0, 0]], 2.5, epsilon = 1e-12); // mean of 0,1,4,5
        assert_abs_diff_eq!(y[[0, 1, 1]], 12.5, epsilon = 1e-12); // mean of 10,11,14,15

        // uneven 4→3 ratio: window i covers rows ⌊4i/3⌋..⌈4(i+1)/3⌉,
        // so the corner window is rows/cols 0..2 and the middle is 1..3
        let y = area_downsample(&x, 3, 3);
        assert_eq!(y.dim(), (1, 3, 3));
        assert_abs_diff_eq!(y[[0, 0, 0]], 2.5, epsilon = 1e-12); // mean of 0,1,4,5
        assert_abs_diff_eq!(y[[0, 1, 1]], 7.5, epsilon = 1e-12); // mean of 5,6,9,10
    }

    #[test]
    fn area_downsample_preserves_constant_mean() {
        let x = Array3::from_elem((2, 28, 28), -7.5);
        let y = area_downsample(&x, 15, 15);
        for v in y.iter() {
            assert_abs_diff_eq!(*v, -7.5, epsilon = 1e-12);
        }
    }
}
