//! Max pooling.

use ndarray::Array4;

/// 2×2 max pooling with stride 2 (halves each spatial axis, floor division).
///
/// Stateless apart from the argmax cache used by the backward pass, so it
/// registers no tensors.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_shape: [usize; 4],
    // flat index (y·W + x) of the winner per output position
    argmax: Vec<u32>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut argmax = if train { vec![0u32; n * c * oh * ow] } else { Vec::new() };
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (sy, sx) = (yi * 2 + dy, xi * 2 + dx);
                                let v = x[[ni, ci, sy, sx]];
                                if v > best {
                                    best = v;
                                    best_at = (sy * w + sx) as u32;
                                }
                            }
                        }
                        y[[ni, ci, yi, xi]] = best;
                        if train {
                            argmax[((ni * c + ci) * oh + yi) * ow + xi] = best_at;
                        }
                    }
                }
            }
        }
        self.cache =
            if train { Some(PoolCache { in_shape: [n, c, h, w], argmax }) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("maxpool backward without cached forward");
        let [n, c, h, w] = cache.in_shape;
        let (oh, ow) = (h / 2, w / 2);
        assert_eq!(dy.dim(), (n, c, oh, ow), "maxpool upstream gradient shape");
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let flat = cache.argmax[((ni * c + ci) * oh + yi) * ow + xi] as usize;
                        dx[[ni, ci, flat / w, flat % w]] += dy[[ni, ci, yi, xi]];
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grad, rand_array, sample_coords};
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn picks_window_maxima() {
        let mut x = Array4::zeros((1, 1, 4, 4));
        for y in 0..4 {
            for xx in 0..4 {
                x[[0, 0, y, xx]] = (y * 4 + xx) as f64;
            }
        }
        let mut p = MaxPool2::new();
        let y = p.forward(&x, false);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
    }

    #[test]
    fn backward_routes_to_argmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x: Array4<f64> =
            rand_array(&mut rng, &[2, 3, 6, 6]).into_dimensionality().unwrap();
        let dy: Array4<f64> =
            rand_array(&mut rng, &[2, 3, 3, 3]).into_dimensionality().unwrap();
        let mut p = MaxPool2::new();
        let _ = p.forward(&x, true);
        let dx = p.backward(&dy);

        let mut xm = x.clone();
        let mut pf = MaxPool2::new();
        check_grad(
            "maxpool dx",
            &sample_coords(&[2, 3, 6, 6], 16),
            |c| dx[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                xm[[c[0], c[1], c[2], c[3]]] += d;
                let l = (pf.forward(&xm, false) * &dy).sum();
                xm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );
    }
}
