//! Composite blocks the model is assembled from.
//!
//! Every block owns its layers, exposes `forward`/`backward` with the same
//! caching contract as the raw layers (forward under `train = true` caches
//! exactly what its backward consumes), and reports parameters through
//! [`Tensors`] with dotted sub-paths.

use ndarray::{s, Array2, Array4};
use rand_chacha::ChaCha20Rng;

use crate::capsule::{route, route_backward, Deroute, RoutingTrace, VoteProjection};
use crate::net::{CapsuleSpec, ConvSpec};
use crate::nn::{
    BatchNorm2d, BilinearResize, ChannelSoftmax, Conv2d, ConvTranspose2d, MaxPool2, Relu,
    TensorVisitor, Tensors,
};

/// Conv → BatchNorm → ReLU, the workhorse of every block.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: Relu,
}

impl ConvBnRelu {
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        momentum: f64,
        eps: f64,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(rng, in_channels, out_channels, spec.kernel, spec.stride, spec.pad),
            bn: BatchNorm2d::new(out_channels, momentum, eps),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dy = self.relu.backward(dy);
        let dy = self.bn.backward(&dy);
        self.conv.backward(&dy)
    }
}

impl Tensors for ConvBnRelu {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.conv.visit(&crate::nn::join(prefix, "conv"), v);
        self.bn.visit(&crate::nn::join(prefix, "bn"), v);
    }
}

/// The preprocessing block: Conv-BN-ReLU then a 2×2 max-pool.
pub struct PreBlock {
    pub cbr: ConvBnRelu,
    pub pool: MaxPool2,
}

impl PreBlock {
    pub fn new(
        rng: &mut ChaCha20Rng,
        out_channels: usize,
        spec: ConvSpec,
        momentum: f64,
        eps: f64,
    ) -> Self {
        PreBlock {
            cbr: ConvBnRelu::new(rng, 1, out_channels, spec, momentum, eps),
            pool: MaxPool2::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.cbr.forward(x, train);
        self.pool.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dy = self.pool.backward(dy);
        self.cbr.backward(&dy)
    }
}

impl Tensors for PreBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.cbr.visit(prefix, v);
    }
}

/// An encoder block: two Conv-BN-ReLU stages that shrink the map.
pub struct DbdBlock {
    pub s1: ConvBnRelu,
    pub s2: ConvBnRelu,
}

impl DbdBlock {
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        out_channels: usize,
        conv1: ConvSpec,
        conv2: ConvSpec,
        momentum: f64,
        eps: f64,
    ) -> Self {
        DbdBlock {
            s1: ConvBnRelu::new(rng, in_channels, out_channels, conv1, momentum, eps),
            s2: ConvBnRelu::new(rng, out_channels, out_channels, conv2, momentum, eps),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.s1.forward(x, train);
        self.s2.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dy = self.s2.backward(dy);
        self.s1.backward(&dy)
    }
}

impl Tensors for DbdBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.s1.visit(&crate::nn::join(prefix, "s1"), v);
        self.s2.visit(&crate::nn::join(prefix, "s2"), v);
    }
}

/// A decoder block: resize to the mirrored encoder size, then two
/// Conv-BN-ReLU refinements at that size.
pub struct DbuBlock {
    pub resize: BilinearResize,
    pub s1: ConvBnRelu,
    pub s2: ConvBnRelu,
}

impl DbuBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        out_channels: usize,
        target: usize,
        conv: ConvSpec,
        momentum: f64,
        eps: f64,
    ) -> Self {
        DbuBlock {
            resize: BilinearResize::new(target, target),
            s1: ConvBnRelu::new(rng, in_channels, out_channels, conv, momentum, eps),
            s2: ConvBnRelu::new(rng, out_channels, out_channels, conv, momentum, eps),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.resize.forward(x, train);
        let y = self.s1.forward(&y, train);
        self.s2.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dy = self.s2.backward(dy);
        let dy = self.s1.backward(&dy);
        self.resize.backward(&dy)
    }
}

impl Tensors for DbuBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.s1.visit(&crate::nn::join(prefix, "s1"), v);
        self.s2.visit(&crate::nn::join(prefix, "s2"), v);
    }
}

/// The post block: resize back to the pre resolution, then Conv-BN-ReLU.
pub struct PostBlock {
    pub resize: BilinearResize,
    pub cbr: ConvBnRelu,
}

impl PostBlock {
    pub fn new(
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        out_channels: usize,
        target: usize,
        conv: ConvSpec,
        momentum: f64,
        eps: f64,
    ) -> Self {
        PostBlock {
            resize: BilinearResize::new(target, target),
            cbr: ConvBnRelu::new(rng, in_channels, out_channels, conv, momentum, eps),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.resize.forward(x, train);
        self.cbr.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dy = self.cbr.backward(dy);
        self.resize.backward(&dy)
    }
}

impl Tensors for PostBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.cbr.visit(prefix, v);
    }
}

struct PcdItemCache {
    u: Array2<f64>,
    votes: ndarray::Array3<f64>,
    trace: RoutingTrace,
}

/// Capsule encoder: a kernel-`caps.kernel` valid convolution forms primary
/// capsule poses on a grid, which vote for entity capsules and are routed.
pub struct PcdStage {
    pub caps_conv: Conv2d,
    pub votes: VoteProjection,
    spec: CapsuleSpec,
    grid: usize,
    cache: Vec<PcdItemCache>,
    /// Coupling coefficients of the latest forward, one `[n_in, n_out]`
    /// matrix per batch item (kept for inspection).
    pub last_couplings: Vec<Array2<f64>>,
}

impl PcdStage {
    pub fn new(rng: &mut ChaCha20Rng, in_channels: usize, grid: usize, spec: CapsuleSpec) -> Self {
        let n_in = grid * grid;
        PcdStage {
            caps_conv: Conv2d::new(rng, in_channels, spec.k, spec.kernel, 1, 0),
            votes: VoteProjection::new(rng, n_in, spec.n_out, spec.k, spec.k_hat),
            spec,
            grid,
            cache: Vec::new(),
            last_couplings: Vec::new(),
        }
    }

    /// Deepest encoder map → routed entity capsules, one `[n_out, k_hat]`
    /// matrix per batch item.
    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Vec<Array2<f64>> {
        let poses = self.caps_conv.forward(x, train); // [n, k, grid, grid]
        let n = poses.shape()[0];
        let n_in = self.grid * self.grid;
        self.cache.clear();
        self.last_couplings.clear();
        let mut out = Vec::with_capacity(n);
        for item in 0..n {
            // grid cell (y, x) becomes capsule y*grid + x; channels are the pose
            let mut u = Array2::zeros((n_in, self.spec.k));
            for a in 0..self.spec.k {
                for y in 0..self.grid {
                    for xx in 0..self.grid {
                        u[[y * self.grid + xx, a]] = poses[[item, a, y, xx]];
                    }
                }
            }
            let votes = self.votes.forward(&u);
            let trace = route(&votes, self.spec.routing_iterations);
            out.push(trace.output().to_owned());
            self.last_couplings.push(trace.couplings().to_owned());
            if train {
                self.cache.push(PcdItemCache { u, votes, trace });
            }
        }
        out
    }

    /// Gradients w.r.t. the routed capsules → gradient on the encoder map.
    pub fn backward(&mut self, dv: &[Array2<f64>]) -> Array4<f64> {
        let n = self.cache.len();
        assert_eq!(dv.len(), n, "capsule backward batch mismatch");
        let mut dposes = Array4::zeros((n, self.spec.k, self.grid, self.grid));
        for (item, dv_item) in dv.iter().enumerate() {
            let cache = &self.cache[item];
            let dvotes = route_backward(&cache.votes, &cache.trace, dv_item);
            let du = self.votes.backward(&cache.u, &dvotes);
            for a in 0..self.spec.k {
                for y in 0..self.grid {
                    for xx in 0..self.grid {
                        dposes[[item, a, y, xx]] = du[[y * self.grid + xx, a]];
                    }
                }
            }
        }
        self.caps_conv.backward(&dposes)
    }
}

impl Tensors for PcdStage {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.caps_conv.visit(&crate::nn::join(prefix, "caps_conv"), v);
        self.votes.visit(&crate::nn::join(prefix, "votes"), v);
    }
}

/// Capsule decoder: deroute entity capsules back onto the primary grid,
/// then let each pose channel drive its own transposed convolution; the
/// per-channel maps concatenate into the decoder seed.
pub struct PcuStage {
    pub deroute: Deroute,
    pub tconvs: Vec<ConvTranspose2d>,
    spec: CapsuleSpec,
    grid: usize,
    v_cache: Vec<Array2<f64>>,
}

impl PcuStage {
    pub fn new(rng: &mut ChaCha20Rng, grid: usize, spec: CapsuleSpec) -> Self {
        let n_in = grid * grid;
        let tconvs = (0..spec.k)
            .map(|_| ConvTranspose2d::new(rng, 1, spec.map_channels, 3, 1, 1))
            .collect();
        PcuStage { deroute: Deroute::new(rng, n_in, spec.n_out, spec.k, spec.k_hat), tconvs, spec, grid, v_cache: Vec::new() }
    }

    /// Routed capsules (one matrix per item) → decoder seed
    /// `[n, k·map_channels, grid, grid]`.
    pub fn forward(&mut self, v: &[Array2<f64>], train: bool) -> Array4<f64> {
        let n = v.len();
        let g = self.grid;
        // deroute each item, then lay the k pose maps out as one plane each
        let mut planes = Array4::zeros((n, self.spec.k, g, g));
        self.v_cache.clear();
        for (item, v_item) in v.iter().enumerate() {
            let u_r = self.deroute.forward(v_item);
            for a in 0..self.spec.k {
                for y in 0..g {
                    for xx in 0..g {
                        planes[[item, a, y, xx]] = u_r[[y * g + xx, a]];
                    }
                }
            }
            if train {
                self.v_cache.push(v_item.clone());
            }
        }
        // each pose plane gets its own transposed conv; concatenate results
        let mc = self.spec.map_channels;
        let mut out = Array4::zeros((n, self.spec.k * mc, g, g));
        for a in 0..self.spec.k {
            let plane = planes.slice(s![.., a..a + 1, .., ..]).to_owned();
            let mapped = self.tconvs[a].forward(&plane, train);
            out.slice_mut(s![.., a * mc..(a + 1) * mc, .., ..]).assign(&mapped);
        }
        out
    }

    /// Gradient on the decoder seed → gradients on the routed capsules.
    pub fn backward(&mut self, dx: &Array4<f64>) -> Vec<Array2<f64>> {
        let n = dx.shape()[0];
        let g = self.grid;
        let mc = self.spec.map_channels;
        assert_eq!(self.v_cache.len(), n, "capsule decoder backward batch mismatch");
        let mut dplanes = Array4::zeros((n, self.spec.k, g, g));
        for a in 0..self.spec.k {
            let dmapped = dx.slice(s![.., a * mc..(a + 1) * mc, .., ..]).to_owned();
            let dplane = self.tconvs[a].backward(&dmapped);
            dplanes.slice_mut(s![.., a..a + 1, .., ..]).assign(&dplane);
        }
        let mut dv = Vec::with_capacity(n);
        for item in 0..n {
            let mut du_r = Array2::zeros((g * g, self.spec.k));
            for a in 0..self.spec.k {
                for y in 0..g {
                    for xx in 0..g {
                        du_r[[y * g + xx, a]] = dplanes[[item, a, y, xx]];
                    }
                }
            }
            dv.push(self.deroute.backward(&self.v_cache[item], &du_r));
        }
        dv
    }
}

impl Tensors for PcuStage {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.deroute.visit(&crate::nn::join(prefix, "deroute"), v);
        for (i, t) in self.tconvs.iter_mut().enumerate() {
            t.visit(&crate::nn::join(prefix, &format!("map{i}")), v);
        }
    }
}

/// The real output heads: palette distribution at the fused resolution and
/// chroma at twice that (the input resolution).
pub struct Heads {
    pub quant: Conv2d,
    pub softmax: ChannelSoftmax,
    pub chroma: Conv2d,
    pub upsample: BilinearResize,
}

impl Heads {
    pub fn new(rng: &mut ChaCha20Rng, in_channels: usize, q: usize, out_size: usize) -> Self {
        Heads {
            quant: Conv2d::new(rng, in_channels, q, 1, 1, 0),
            softmax: ChannelSoftmax::new(),
            chroma: Conv2d::new(rng, q, 2, 1, 1, 0),
            upsample: BilinearResize::new(out_size, out_size),
        }
    }

    /// Fused features → (palette distribution, chroma plane).
    pub fn forward(&mut self, fused: &Array4<f64>, train: bool) -> (Array4<f64>, Array4<f64>) {
        let logits = self.quant.forward(fused, train);
        let z_hat = self.softmax.forward(&logits, train);
        let ab_small = self.chroma.forward(&z_hat, train);
        let ab = self.upsample.forward(&ab_small, train);
        (z_hat, ab)
    }

    /// Joint backward: the palette distribution feeds both the loss and the
    /// chroma head, so their gradients add before the softmax.
    pub fn backward(&mut self, dz_hat: &Array4<f64>, dab: &Array4<f64>) -> Array4<f64> {
        let dab_small = self.upsample.backward(dab);
        let dz_from_chroma = self.chroma.backward(&dab_small);
        let dz_total = dz_hat + &dz_from_chroma;
        let dlogits = self.softmax.backward(&dz_total);
        self.quant.backward(&dlogits)
    }
}

impl Tensors for Heads {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.quant.visit(&crate::nn::join(prefix, "quant"), v);
        self.chroma.visit(&crate::nn::join(prefix, "chroma"), v);
    }
}

/// Temporary heads for a gated decoder level: the same two 1×1 convolutions
/// as the real heads but at the level's own resolution (no upsample).
pub struct TempHead {
    pub quant: Conv2d,
    pub softmax: ChannelSoftmax,
    pub chroma: Conv2d,
}

impl TempHead {
    pub fn new(rng: &mut ChaCha20Rng, in_channels: usize, q: usize) -> Self {
        TempHead {
            quant: Conv2d::new(rng, in_channels, q, 1, 1, 0),
            softmax: ChannelSoftmax::new(),
            chroma: Conv2d::new(rng, q, 2, 1, 1, 0),
        }
    }

    pub fn forward(&mut self, features: &Array4<f64>, train: bool) -> (Array4<f64>, Array4<f64>) {
        let logits = self.quant.forward(features, train);
        let z_hat = self.softmax.forward(&logits, train);
        let ab = self.chroma.forward(&z_hat, train);
        (z_hat, ab)
    }

    pub fn backward(&mut self, dz_hat: &Array4<f64>, dab: &Array4<f64>) -> Array4<f64> {
        let dz_from_chroma = self.chroma.backward(dab);
        let dz_total = dz_hat + &dz_from_chroma;
        let dlogits = self.softmax.backward(&dz_total);
        self.quant.backward(&dlogits)
    }
}

impl Tensors for TempHead {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.quant.visit(&crate::nn::join(prefix, "quant"), v);
        self.chroma.visit(&crate::nn::join(prefix, "chroma"), v);
    }
}
