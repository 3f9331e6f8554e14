//! Batch normalization over `[N, C, H, W]` tensors.

use ndarray::{Array1, Array4, Axis};

use super::{join, TensorKind, TensorVisitor, Tensors};

/// Per-channel batch normalization with running statistics.
///
/// Training normalizes by the batch mean and (biased) batch variance and
/// updates the running statistics with momentum; evaluation normalizes by the
/// running statistics alone, so a single image colourises deterministically.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let count = (n * h * w) as f64;
        let mut y = Array4::zeros((n, c, h, w));
        if train {
            let mut xhat = Array4::zeros((n, c, h, w));
            let mut inv_std = Array1::zeros(c);
            for ci in 0..c {
                let plane = x.index_axis(Axis(1), ci);
                let mean = plane.sum() / count;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[ci] = istd;
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            let xh = (x[[ni, ci, yi, xi]] - mean) * istd;
                            xhat[[ni, ci, yi, xi]] = xh;
                            y[[ni, ci, yi, xi]] = self.gamma[ci] * xh + self.beta[ci];
                        }
                    }
                }
                // running stats track the unbiased variance, like the usual
                // deep-learning convention
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            for ci in 0..c {
                let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                let mean = self.running_mean[ci];
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            y[[ni, ci, yi, xi]] =
                                self.gamma[ci] * (x[[ni, ci, yi, xi]] - mean) * istd
                                    + self.beta[ci];
                        }
                    }
                }
            }
            self.cache = None;
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("batch-norm backward without training forward");
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let gdy = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = gdy.sum();
            let sum_dy_xh = (&gdy * &xh).sum();
            self.gbeta[ci] += sum_dy;
            self.ggamma[ci] += sum_dy_xh;
            let scale = self.gamma[ci] * cache.inv_std[ci] / count;
            for ni in 0..n {
                for yi in 0..h {
                    for xi in 0..w {
                        dx[[ni, ci, yi, xi]] = scale
                            * (count * dy[[ni, ci, yi, xi]]
                                - sum_dy
                                - cache.xhat[[ni, ci, yi, xi]] * sum_dy_xh);
                    }
                }
            }
        }
        dx
    }
}

impl Tensors for BatchNorm2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        let names = [
            join(prefix, "gamma"),
            join(prefix, "beta"),
            join(prefix, "running_mean"),
            join(prefix, "running_var"),
        ];
        v.visit(
            &names[0],
            TensorKind::Param,
            self.gamma.view_mut().into_dyn(),
            Some(self.ggamma.view_mut().into_dyn()),
        );
        v.visit(
            &names[1],
            TensorKind::Param,
            self.beta.view_mut().into_dyn(),
            Some(self.gbeta.view_mut().into_dyn()),
        );
        v.visit(&names[2], TensorKind::State, self.running_mean.view_mut().into_dyn(), None);
        v.visit(&names[3], TensorKind::State, self.running_var.view_mut().into_dyn(), None);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grad, rand_array, sample_coords};
    use super::super::zero_grads;
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn train_output_is_normalized() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(4, 0.1, 1e-5);
        let x: Array4<f64> =
            rand_array(&mut rng, &[3, 4, 6, 6]).into_dimensionality().unwrap();
        let y = bn.forward(&x, true);
        for ci in 0..4 {
            let plane = y.index_axis(Axis(1), ci);
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4); // eps shrinks it slightly
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(2, 0.5, 1e-5);
        let x: Array4<f64> =
            rand_array(&mut rng, &[4, 2, 5, 5]).into_dimensionality().unwrap();
        for _ in 0..50 {
            let _ = bn.forward(&x, true);
        }
        // after many updates on the same batch, running stats converge to the
        // batch stats, so eval output ≈ train output
        let yt = bn.forward(&x, true);
        let ye = bn.forward(&x, false);
        let max_diff =
            yt.iter().zip(ye.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-2, "train/eval outputs diverged: {max_diff}");

        // fresh-stats eval is the identity transform (γ=1, β=0, stats 0/1)
        let mut fresh = BatchNorm2d::new(2, 0.1, 1e-5);
        let y = fresh.forward(&x, false);
        let max_diff =
            y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new(2, 0.1, 1e-5);
        bn.gamma[0] = 1.3;
        bn.gamma[1] = 0.7;
        bn.beta[0] = 0.2;
        let x: Array4<f64> =
            rand_array(&mut rng, &[2, 2, 3, 3]).into_dimensionality().unwrap();
        let dy: Array4<f64> =
            rand_array(&mut rng, &[2, 2, 3, 3]).into_dimensionality().unwrap();

        zero_grads(&mut bn);
        let _ = bn.forward(&x, true);
        let dx = bn.backward(&dy);

        let mut xm = x.clone();
        let mut bf = bn.clone();
        check_grad(
            "bn dx",
            &sample_coords(&[2, 2, 3, 3], 12),
            |c| dx[[c[0], c[1], c[2], c[3]]],
            |c, d| {
                xm[[c[0], c[1], c[2], c[3]]] += d;
                let l = (bf.forward(&xm, true) * &dy).sum();
                xm[[c[0], c[1], c[2], c[3]]] -= d;
                l
            },
        );

        let gg = bn.ggamma.clone();
        let mut bg = bn.clone();
        check_grad(
            "bn dgamma",
            &sample_coords(&[2], 2),
            |c| gg[c[0]],
            |c, d| {
                bg.gamma[c[0]] += d;
                let l = (bg.forward(&x, true) * &dy).sum();
                bg.gamma[c[0]] -= d;
                l
            },
        );

        let gb = bn.gbeta.clone();
        let mut bb = bn.clone();
        check_grad(
            "bn dbeta",
            &sample_coords(&[2], 2),
            |c| gb[c[0]],
            |c, d| {
                bb.beta[c[0]] += d;
                let l = (bb.forward(&x, true) * &dy).sum();
                bb.beta[c[0]] -= d;
                l
            },
        );
    }
}
