//! Capsule U-net image colourisation.
//!
//! The crate turns a grayscale lightness channel into colour by predicting a
//! per-pixel distribution over a quantized CIELab chromaticity palette and
//! decoding that distribution to `(a, b)` chroma planes. It is organised as a
//! pipeline of small, independently testable pieces:
//!
//! - [`colorspace`]: sRGB ↔ CIELab conversion, the quantized ab palette
//!   ([`colorspace::BinTable`]), soft-encoding of ground-truth chroma, and
//!   class-rebalancing weights.
//! - [`nn`]: deterministic f64 tensor layers (conv, batch-norm, pooling,
//!   resampling) with hand-written backward passes.
//! - [`capsule`]: capsule projection, routing-by-agreement, and derouting.
//! - [`net`]: the encoder–capsule–decoder network itself, its shape plan, and
//!   the per-level heads used while growing the decoder.
//! - [`losses`]: the quantization cross-entropy and chroma regression terms.
//! - [`datapipe`]: dataset scanning, Lab preprocessing, target encoding,
//!   deterministic batching.
//! - [`trainer`]: Adam, the level schedule, checkpoints, and the run loop.
//! - [`evalkit`]: PSNR/SSIM and the external perceptual-metric plugin.

pub mod capsule;
pub mod colorspace;
pub mod datapipe;
pub mod evalkit;
pub mod losses;
pub mod net;
pub mod nn;
pub mod trainer;

pub use colorspace::{BinTable, LabImage};
pub use net::{Level, NetworkConfig, ShapePlan, TucanNet};
pub use trainer::{TrainConfig, TrainMode, Trainer};

