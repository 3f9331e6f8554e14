//! The capsule U-net: configuration, shape plan, blocks, and the model.
//!
//! The network is a U-shaped encoder–decoder with a capsule bottleneck:
//!
//! - **pre**: Conv-BN-ReLU + 2×2 max-pool, producing the low-level map `M` at
//!   half the input resolution.
//! - **dbd1…dbd4**: downsampling blocks of two Conv-BN-ReLU stages each; the
//!   first block halves twice with strided convs, the rest shrink with valid
//!   convolutions.
//! - **pcd**: a small convolution turns the deepest map into primary capsules
//!   (one pose vector per grid cell), which vote for entity capsules and are
//!   routed by agreement.
//! - **pcu**: derouting projects entity capsules back onto the grid; each
//!   pose channel drives its own transposed convolution and the results
//!   concatenate into the decoder seed `X`.
//! - **dbu1…dbu4**: decoder blocks that resize to the mirrored encoder size
//!   and refine with two Conv-BN-ReLU stages; each consumes the previous
//!   decoder output concatenated with the size-matched encoder map.
//! - **post**: resize back to the `pre` resolution plus Conv-BN-ReLU,
//!   producing `N`, which is added residually to `M`.
//! - **heads**: a 1×1 conv + channel softmax yields the palette distribution
//!   `Ẑ` at half input resolution; a 1×1 conv over `Ẑ` followed by a 2×
//!   bilinear upsample yields chroma `(â, b̂)` at full input resolution.
//!
//! For progressive training the decoder can run gated at intermediate levels
//! with a temporary pair of 1×1 heads at that level's resolution; see
//! [`Level`] and [`TucanNet::attach_temp_head`].

mod blocks;
mod model;

pub use blocks::TempHead;
pub use model::{ForwardOutput, InspectionReport, TucanNet};

use thiserror::Error;

/// Configuration problems, always naming the first offending stage or key.
#[derive(Debug, Error)]
#[error("network config: {0}")]
pub struct NetConfigError(pub String);

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec { kernel, stride, pad }
    }

    /// Output size on one axis, or an error if the kernel no longer fits.
    fn out_size(&self, stage: &str, h: usize) -> Result<usize, NetConfigError> {
        let padded = h + 2 * self.pad;
        if padded < self.kernel {
            return Err(NetConfigError(format!(
                "{stage}: input size {h} with padding {} is smaller than kernel {}",
                self.pad, self.kernel
            )));
        }
        let out = (padded - self.kernel) / self.stride + 1;
        if out == 0 {
            return Err(NetConfigError(format!("{stage}: output size collapses to zero")));
        }
        Ok(out)
    }
}

/// One encoder block: two convolutions and a shared output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbdSpec {
    pub out_channels: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
}

/// Capsule bottleneck dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleSpec {
    /// Pose dimension of primary capsules (= channels of the capsule conv).
    pub k: usize,
    /// Pose dimension of routed entity capsules.
    pub k_hat: usize,
    /// Number of entity capsules.
    pub n_out: usize,
    /// Kernel of the capsule-forming convolution (valid, stride 1).
    pub kernel: usize,
    /// Channels produced per pose map by the decoder's transposed convs.
    pub map_channels: usize,
    /// Routing iterations.
    pub routing_iterations: usize,
}

/// Complete architectural description; [`ShapePlan::from_config`] validates
/// it and freezes the size/channel trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input lightness plane is `input_size × input_size`.
    pub input_size: usize,
    /// Channels of `M` (also the post-block output, for the residual sum).
    pub base_channels: usize,
    pub pre_conv: ConvSpec,
    pub dbd: [DbdSpec; 4],
    pub caps: CapsuleSpec,
    /// Output channels of the four decoder blocks.
    pub dbu_channels: [usize; 4],
    /// The decoder's refining convolutions (applied twice per block).
    pub dbu_conv: ConvSpec,
    /// Palette size (quantization head output channels).
    pub q: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl NetworkConfig {
    /// The full-scale architecture for 224×224 inputs.
    pub fn canonical(q: usize) -> Self {
        NetworkConfig {
            input_size: 224,
            base_channels: 64,
            pre_conv: ConvSpec::new(3, 1, 1),
            dbd: [
                // halve twice: 112 → 56 → 28
                DbdSpec {
                    out_channels: 128,
                    conv1: ConvSpec::new(3, 2, 1),
                    conv2: ConvSpec::new(3, 2, 1),
                },
                // then shrink by valid 3×3 pairs: 28 → 24 → 20 → 16
                DbdSpec {
                    out_channels: 256,
                    conv1: ConvSpec::new(3, 1, 0),
                    conv2: ConvSpec::new(3, 1, 0),
                },
                DbdSpec {
                    out_channels: 256,
                    conv1: ConvSpec::new(3, 1, 0),
                    conv2: ConvSpec::new(3, 1, 0),
                },
                DbdSpec {
                    out_channels: 256,
                    conv1: ConvSpec::new(3, 1, 0),
                    conv2: ConvSpec::new(3, 1, 0),
                },
            ],
            caps: CapsuleSpec {
                k: 8,
                k_hat: 16,
                n_out: 32,
                kernel: 2,
                map_channels: 16,
                routing_iterations: crate::capsule::ROUTING_ITERATIONS,
            },
            dbu_channels: [256, 256, 128, 64],
            dbu_conv: ConvSpec::new(3, 1, 1),
            q,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// A reduced architecture with the same topology for 64×64 inputs —
    /// every stage, skip, and head is present, just narrower and smaller.
    pub fn toy(q: usize) -> Self {
        NetworkConfig {
            input_size: 64,
            base_channels: 16,
            pre_conv: ConvSpec::new(3, 1, 1),
            dbd: [
                // 32 → 16 → 8
                DbdSpec {
                    out_channels: 32,
                    conv1: ConvSpec::new(3, 2, 1),
                    conv2: ConvSpec::new(3, 2, 1),
                },
                // 8 → 7 → 6 → 5 (kernel-2 shrink + same-size refine)
                DbdSpec {
                    out_channels: 64,
                    conv1: ConvSpec::new(2, 1, 0),
                    conv2: ConvSpec::new(3, 1, 1),
                },
                DbdSpec {
                    out_channels: 64,
                    conv1: ConvSpec::new(2, 1, 0),
                    conv2: ConvSpec::new(3, 1, 1),
                },
                DbdSpec {
                    out_channels: 64,
                    conv1: ConvSpec::new(2, 1, 0),
                    conv2: ConvSpec::new(3, 1, 1),
                },
            ],
            caps: CapsuleSpec {
                k: 8,
                k_hat: 16,
                n_out: 16,
                kernel: 2,
                map_channels: 4,
                routing_iterations: crate::capsule::ROUTING_ITERATIONS,
            },
            dbu_channels: [64, 64, 32, 16],
            dbu_conv: ConvSpec::new(3, 1, 1),
            q,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// A decoder gate: how much of the network runs and where outputs are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    /// Stop after the capsule decoder seed `X` (before any decoder block).
    Pcu,
    /// Stop after decoder block 1–4.
    Up(u8),
    /// The complete network with its real heads.
    Final,
}

impl Level {
    /// All levels in training order.
    pub fn schedule_order() -> [Level; 6] {
        [Level::Pcu, Level::Up(1), Level::Up(2), Level::Up(3), Level::Up(4), Level::Final]
    }

    /// Position in the growth order (0 = capsule seed, 5 = full net).
    pub fn index(&self) -> usize {
        match self {
            Level::Pcu => 0,
            Level::Up(i) => {
                assert!((1..=4).contains(i), "decoder level out of range: {i}");
                *i as usize
            }
            Level::Final => 5,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Level::Pcu => "pcu".into(),
            Level::Up(i) => format!("up{i}"),
            Level::Final => "final".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "pcu" => Some(Level::Pcu),
            "up1" => Some(Level::Up(1)),
            "up2" => Some(Level::Up(2)),
            "up3" => Some(Level::Up(3)),
            "up4" => Some(Level::Up(4)),
            "final" => Some(Level::Final),
            _ => None,
        }
    }
}

/// The frozen size-and-channel trace derived from a [`NetworkConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: usize,
    /// Spatial size of `M` after pre (input halved by the pool).
    pub pre_out: usize,
    /// Encoder block output sizes, dbd1 → dbd4.
    pub dbd_out: [usize; 4],
    /// Capsule grid side length.
    pub caps_grid: usize,
    /// Decoder block output sizes, dbu1 → dbu4 (mirrors the encoder).
    pub dbu_out: [usize; 4],
    /// Post-block output size (= pre_out; the residual sum requires it).
    pub post_out: usize,
    /// Chroma head output size (= input).
    pub chroma_out: usize,
    /// Channels of `M`.
    pub m_channels: usize,
    /// Encoder block output channels.
    pub dbd_channels: [usize; 4],
    /// Channels of the decoder seed `X` (pose maps × map_channels).
    pub x_channels: usize,
    /// Decoder block output channels.
    pub dbu_channels: [usize; 4],
    /// Primary capsule count (grid cells).
    pub n_primary: usize,
    pub q: usize,
}

impl ShapePlan {
    /// Simulate the configured stages and freeze the trace, or report the
    /// first stage whose geometry breaks.
    pub fn from_config(cfg: &NetworkConfig) -> Result<ShapePlan, NetConfigError> {
        if cfg.q == 0 {
            return Err(NetConfigError("q: palette must not be empty".into()));
        }
        if cfg.base_channels == 0 {
            return Err(NetConfigError("base_channels: must be positive".into()));
        }
        let after_pre_conv = cfg.pre_conv.out_size("pre.conv", cfg.input_size)?;
        if after_pre_conv != cfg.input_size {
            return Err(NetConfigError(format!(
                "pre.conv: must preserve size, got {} → {}",
                cfg.input_size, after_pre_conv
            )));
        }
        if after_pre_conv % 2 != 0 {
            return Err(NetConfigError(format!(
                "pre.pool: input size {after_pre_conv} is not divisible by 2"
            )));
        }
        let pre_out = after_pre_conv / 2;

        let mut size = pre_out;
        let mut dbd_out = [0usize; 4];
        let mut dbd_channels = [0usize; 4];
        for (i, spec) in cfg.dbd.iter().enumerate() {
            let s1 = spec.conv1.out_size(&format!("dbd{}.conv1", i + 1), size)?;
            let s2 = spec.conv2.out_size(&format!("dbd{}.conv2", i + 1), s1)?;
            if s2 >= size {
                return Err(NetConfigError(format!(
                    "dbd{}: block must shrink its input, got {} → {}",
                    i + 1,
                    size,
                    s2
                )));
            }
            size = s2;
            dbd_out[i] = s2;
            dbd_channels[i] = spec.out_channels;
        }

        let caps_stage = "pcd.caps_conv";
        if size < cfg.caps.kernel {
            return Err(NetConfigError(format!(
                "{caps_stage}: deepest map {size} is smaller than capsule kernel {}",
                cfg.caps.kernel
            )));
        }
        let caps_grid = size - cfg.caps.kernel + 1;
        if caps_grid == 0 {
            return Err(NetConfigError(format!("{caps_stage}: capsule grid collapses to zero")));
        }

        // decoder mirrors the encoder sizes back up
        let dbu_out = [dbd_out[3], dbd_out[2], dbd_out[1], dbd_out[0]];
        for (i, (&t, &s)) in dbu_out
            .iter()
            .zip([caps_grid, dbu_out[0], dbu_out[1], dbu_out[2]].iter())
            .enumerate()
        {
            if t < s {
                return Err(NetConfigError(format!(
                    "dbu{}: target size {t} below its input size {s}",
                    i + 1
                )));
            }
        }

        Ok(ShapePlan {
            input: cfg.input_size,
            pre_out,
            dbd_out,
            caps_grid,
            dbu_out,
            post_out: pre_out,
            chroma_out: cfg.input_size,
            m_channels: cfg.base_channels,
            dbd_channels,
            x_channels: cfg.caps.k * cfg.caps.map_channels,
            dbu_channels: cfg.dbu_channels,
            n_primary: caps_grid * caps_grid,
            q: cfg.q,
        })
    }

    /// The canonical 12-entry spatial trace: pre, the four encoder blocks,
    /// the capsule grid, the four decoder blocks, post, and the chroma head.
    pub fn trace(&self) -> [usize; 12] {
        [
            self.pre_out,
            self.dbd_out[0],
            self.dbd_out[1],
            self.dbd_out[2],
            self.dbd_out[3],
            self.caps_grid,
            self.dbu_out[0],
            self.dbu_out[1],
            self.dbu_out[2],
            self.dbu_out[3],
            self.post_out,
            self.chroma_out,
        ]
    }

    /// Spatial size at a gated level.
    pub fn level_size(&self, level: Level) -> usize {
        match level {
            Level::Pcu => self.caps_grid,
            Level::Up(i) => self.dbu_out[i as usize - 1],
            Level::Final => self.post_out,
        }
    }

    /// Feature channels at a gated level (what a temp head consumes).
    pub fn level_channels(&self, level: Level) -> usize {
        match level {
            Level::Pcu => self.x_channels,
            Level::Up(i) => self.dbu_channels[i as usize - 1],
            Level::Final => self.m_channels,
        }
    }

    /// Input channels of the decoder block `i` (1-based): previous decoder
    /// output (or the capsule seed) concatenated with the mirrored encoder
    /// map.
    pub fn dbu_in_channels(&self, i: usize) -> usize {
        match i {
            1 => self.x_channels,
            2 => self.dbu_channels[0] + self.dbd_channels[3],
            3 => self.dbu_channels[1] + self.dbd_channels[2],
            4 => self.dbu_channels[2] + self.dbd_channels[1],
            _ => panic!("decoder block index {i} out of range"),
        }
    }

    /// Input channels of the post block: last decoder output + `dbd1` skip.
    pub fn post_in_channels(&self) -> usize {
        self.dbu_channels[3] + self.dbd_channels[0]
    }

    /// Multi-line human-readable report of the frozen plan.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(s, "input          {0}x{0}x1", self.input);
        let _ = writeln!(s, "pre       M    {0}x{0}x{1}", self.pre_out, self.m_channels);
        for i in 0..4 {
            let _ = writeln!(
                s,
                "dbd{}      D{}   {2}x{2}x{3}",
                i + 1,
                i + 1,
                self.dbd_out[i],
                self.dbd_channels[i]
            );
        }
        let _ = writeln!(
            s,
            "pcd       U    {0}x{0} grid, {1} capsules",
            self.caps_grid, self.n_primary
        );
        let _ = writeln!(s, "pcu       X    {0}x{0}x{1}", self.caps_grid, self.x_channels);
        for i in 0..4 {
            let _ = writeln!(
                s,
                "dbu{}      Y{}   {2}x{2}x{3}",
                i + 1,
                i + 1,
                self.dbu_out[i],
                self.dbu_channels[i]
            );
        }
        let _ = writeln!(s, "post      N    {0}x{0}x{1}", self.post_out, self.m_channels);
        let _ = writeln!(s, "quant     Z    {0}x{0}x{1}", self.post_out, self.q);
        let _ = writeln!(s, "chroma    ab   {0}x{0}x2", self.chroma_out);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_plan_matches_frozen_trace() {
        let plan = ShapePlan::from_config(&NetworkConfig::canonical(313)).unwrap();
        assert_eq!(plan.trace(), [112, 28, 24, 20, 16, 15, 16, 20, 24, 28, 112, 224]);
        assert_eq!(plan.m_channels, 64);
        assert_eq!(plan.dbd_channels, [128, 256, 256, 256]);
        assert_eq!(plan.x_channels, 128);
        assert_eq!(plan.dbu_channels, [256, 256, 128, 64]);
        assert_eq!(plan.n_primary, 225);
        assert_eq!(plan.dbu_in_channels(1), 128);
        assert_eq!(plan.dbu_in_channels(2), 512);
        assert_eq!(plan.dbu_in_channels(3), 512);
        assert_eq!(plan.dbu_in_channels(4), 384);
        assert_eq!(plan.post_in_channels(), 192);
    }

    #[test]
    fn toy_plan_shares_the_topology() {
        let plan = ShapePlan::from_config(&NetworkConfig::toy(313)).unwrap();
        assert_eq!(plan.trace(), [32, 8, 7, 6, 5, 4, 5, 6, 7, 8, 32, 64]);
        assert_eq!(plan.n_primary, 16);
        assert_eq!(plan.x_channels, 32);
    }

    #[test]
    fn validation_names_first_offending_stage() {
        let mut cfg = NetworkConfig::canonical(313);
        cfg.dbd[2].conv1 = ConvSpec::new(25, 1, 0); // kernel larger than the map
        let err = ShapePlan::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("dbd3.conv1"), "got: {err}");

        let mut cfg = NetworkConfig::canonical(313);
        cfg.caps.kernel = 99;
        let err = ShapePlan::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("pcd.caps_conv"), "got: {err}");

        let mut cfg = NetworkConfig::canonical(313);
        cfg.input_size = 225; // odd size cannot pool
        let err = ShapePlan::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("pre.pool"), "got: {err}");

        let mut cfg = NetworkConfig::canonical(313);
        cfg.dbd[0].conv1 = ConvSpec::new(3, 1, 1); // stops shrinking? still shrinks via conv2
        cfg.dbd[0].conv2 = ConvSpec::new(3, 1, 1);
        let err = ShapePlan::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("dbd1"), "got: {err}");
    }

    #[test]
    fn level_metadata_is_consistent() {
        let plan = ShapePlan::from_config(&NetworkConfig::canonical(313)).unwrap();
        assert_eq!(plan.level_size(Level::Pcu), 15);
        assert_eq!(plan.level_channels(Level::Pcu), 128);
        assert_eq!(plan.level_size(Level::Up(1)), 16);
        assert_eq!(plan.level_size(Level::Up(4)), 28);
        assert_eq!(plan.level_channels(Level::Up(4)), 64);
        assert_eq!(plan.level_size(Level::Final), 112);

        let order = Level::schedule_order();
        for (i, l) in order.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(Level::parse(&l.label()), Some(*l));
        }
    }
}
