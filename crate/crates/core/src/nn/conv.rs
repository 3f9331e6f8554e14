//! 2-D convolution and transposed convolution.
//!
//! `Conv2d` lowers each forward pass to an im2col matrix and a single matrix
//! multiply; the backward pass reuses the cached column matrix for the weight
//! gradient and scatters `dcol` back through col2im for the input gradient.
//! `ConvTranspose2d` is small (it only ever sees the capsule grid) and uses a
//! direct scatter loop.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha20Rng;

use super::{he_normal, join, TensorKind, TensorVisitor, Tensors};

/// Convolution over `[N, C, H, W]` tensors with symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    col: Array2<f64>,
    in_shape: [usize; 4],
    out_hw: [usize; 2],
}

impl Conv2d {
    /// He-initialized convolution `in_ch → out_ch` with a square kernel.
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal(rng, fan_in, &[out_ch, in_ch, kernel, kernel])
            .into_dimensionality()
            .unwrap();
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            gw: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            gb: Array1::zeros(out_ch),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    /// Spatial output size for a given input size.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let k = self.kernel();
        assert!(
            h + 2 * self.pad >= k && w + 2 * self.pad >= k,
            "conv input {h}x{w} smaller than kernel {k} even with padding {}",
            self.pad
        );
        let (oh, ow) = self.out_size(h, w);
        let col = im2col(x, k, self.stride, self.pad, oh, ow);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((self.out_channels(), c * k * k))
            .unwrap();
        // [n·oh·ow, ckk] × [ckk, oc]
        let ymat = col.dot(&wmat.t());
        let mut y = Array4::zeros((n, self.out_channels(), oh, ow));
        for ni in 0..n {
            for oc in 0..self.out_channels() {
                let bias = self.b[oc];
                for yi in 0..oh {
                    for xi in 0..ow {
                        y[[ni, oc, yi, xi]] = ymat[[(ni * oh + yi) * ow + xi, oc]] + bias;
                    }
                }
            }
        }
        if train {
            self.cache = Some(ConvCache { col, in_shape: [n, c, h, w], out_hw: [oh, ow] });
        } else {
            self.cache = None;
        }
        y
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("conv backward without cached forward");
        let [n, c, h, w] = cache.in_shape;
        let [oh, ow] = cache.out_hw;
        let oc = self.out_channels();
        assert_eq!(dy.dim(), (n, oc, oh, ow), "conv upstream gradient shape");
        let k = self.kernel();

        let mut dymat = Array2::zeros((n * oh * ow, oc));
        for ni in 0..n {
            for ci in 0..oc {
                for yi in 0..oh {
                    for xi in 0..ow {
                        dymat[[(ni * oh + yi) * ow + xi, ci]] = dy[[ni, ci, yi, xi]];
                    }
                }
            }
        }
        // weight gradient: [oc, n·oh·ow] × [n·oh·ow, ckk]
        let gw_mat = dymat.t().dot(&cache.col);
        let gw_add = gw_mat.into_shape_with_order((oc, c, k, k)).unwrap();
        self.gw += &gw_add;
        for ci in 0..oc {
            self.gb[ci] += dymat.column(ci).sum();
        }
        // input gradient via col2im
        let wmat = self.w.view().into_shape_with_order((oc, c * k * k)).unwrap();
        let dcol = dymat.dot(&wmat);
        col2im(&dcol, [n, c, h, w], k, self.stride, self.pad, oh, ow)
    }
}

impl Tensors for Conv2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        let (wn, bn) = (join(prefix, "w"), join(prefix, "b"));
        v.visit(
            &wn,
            TensorKind::Param,
            self.w.view_mut().into_dyn(),
            Some(self.gw.view_mut().into_dyn()),
        );
        v.visit(
            &bn,
            TensorKind::Param,
            self.b.view_mut().into_dyn(),
            Some(self.gb.view_mut().into_dyn()),
        );
    }
}

/// Lower `[N, C, H, W]` into `[N·OH·OW, C·K·K]` patches.
fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for yi in 0..oh {
            for xi in 0..ow {
                let row = (ni * oh + yi) * ow + xi;
                let y0 = (yi * stride) as isize - pad as isize;
                let x0 = (xi * stride) as isize - pad as isize;
                for ci in 0..c {
                    let base = ci * k * k;
                    for ky in 0..k {
                        let sy = y0 + ky as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x0 + kx as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            col[[row, base + ky * k + kx]] =
                                x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter `[N·OH·OW, C·K·K]` gradients back onto the input layout.
fn col2im(
    dcol: &Array2<f64>,
    in_shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let [n, c, h, w] = in_shape;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for yi in 0..oh {
            for xi in 0..ow {
                let row = (ni * oh + yi) * ow + xi;
                let y0 = (yi * stride) as isize - pad as isize;
                let x0 = (xi * stride) as isize - pad as isize;
                for ci in 0..c {
                    let base = ci * k * k;
                    for ky in 0..k {
                        let sy = y0 + ky as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x0 + kx as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, sy as usize, sx as usize]] +=
                                dcol[[row, base + ky * k + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Transposed convolution over `[N, C, H, W]`, weight layout `[in, out, k, k]`.
///
/// Output size is `(H-1)·stride - 2·pad + k` per axis.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    stride: usize,
    pad: usize,
    cache: Option<[usize; 4]>,
    cached_x: Option<Array4<f64>>,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal(rng, fan_in, &[in_ch, out_ch, kernel, kernel])
            .into_dimensionality()
            .unwrap();
        ConvTranspose2d {
            w,
            b: Array1::zeros(out_ch),
            gw: Array4::zeros((in_ch, out_ch, kernel, kernel)),
            gb: Array1::zeros(out_ch),
            stride,
            pad,
            cache: None,
            cached_x: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        (
            (h - 1) * self.stride + k - 2 * self.pad,
            (w - 1) * self.stride + k - 2 * self.pad,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.w.shape()[0], "tconv input channels");
        let k = self.w.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let oc = self.out_channels();
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let xv = x[[ni, ci, yi, xi]];
                        if xv == 0.0 {
                            continue;
                        }
                        for oci in 0..oc {
                            for ky in 0..k {
                                let oy =
                                    (yi * self.stride + ky) as isize - self.pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox =
                                        (xi * self.stride + kx) as isize - self.pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    y[[ni, oci, oy as usize, ox as usize]] +=
                                        xv * self.w[[ci, oci, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        for oci in 0..oc {
            let bias = self.b[oci];
            y.index_axis_mut(ndarray::Axis(1), oci).mapv_inplace(|v| v + bias);
        }
        if train {
            self.cache = Some([n, c, h, w]);
            self.cached_x = Some(x.clone());
        } else {
            self.cache = None;
            self.cached_x = None;
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let [n, c, h, w] = self.cache.expect("tconv backward without cached forward");
        let x = self.cached_x.as_ref().unwrap();
        let k = self.w.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let oc = self.out_channels();
        assert_eq!(dy.dim(), (n, oc, oh, ow), "tconv upstream gradient shape");
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let xv = x[[ni, ci, yi, xi]];
                        let mut acc = 0.0;
                        for oci in 0..oc {
                            for ky in 0..k {
                                let oy =
                                    (yi * self.stride + ky) as isize - self.pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox =
                                        (xi * self.stride + kx) as isize - self.pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    let g = dy[[ni, oci, oy as usize, ox as usize]];
                                    acc += g * self.w[[ci, oci, ky, kx]];
                                    self.gw[[ci, oci, ky, kx]] += g * xv;
                                }
                            }
                        }
                        dx[[ni, ci, yi, xi]] = acc;
                    }
                }
            }
        }
        for oci in 0..oc {
            self.gb[oci] += dy.index_axis(ndarray::Axis(1), oci).sum();
        }
        dx
    }
}

impl Tensors for ConvTranspose2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        let (wn, bn) = (join(prefix, "w"), join(prefix, "b"));
        v.visit(
            &wn,
            TensorKind::Param,
            self.w.view_mut().into_dyn(),
            Some(self.gw.view_mut().into_dyn()),
        );
        v.visit(
            &bn,
            TensorKind::Param,
            self.b.view_mut().into_dyn(),
            Some(self.gb.view_mut().into_dyn()),
        );
    }
}
