//! Deterministic f64 tensor layers with hand-written backward passes.
//!
//! The network trains at desk scale, so the layers favour clarity and
//! determinism over throughput: plain `ndarray` storage, single-threaded
//! kernels (convolution via im2col + matrix multiply), and f64 everywhere so
//! finite-difference checks can pin every backward pass tightly.
//!
//! Layers own their parameters and gradients as plain fields and expose them
//! through [`TensorVisitor`] / [`Tensors`], a small registry that the
//! optimizer, checkpointing, and parameter-group logic all share. Tensor names
//! are hierarchical dotted paths (`"dbd1.conv1.w"`), fixed by composition
//! order, so visiting is deterministic.

mod conv;
mod norm;
mod pool;
mod resize;
mod simple;

pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub use pool::MaxPool2;
pub use resize::{area_downsample, BilinearResize};
pub use simple::{is_channel_distribution, ChannelSoftmax, Relu};

use ndarray::{ArrayD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Whether a visited tensor is a trainable parameter or tracked state
/// (batch-norm running statistics). Both are checkpointed; only parameters
/// receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    State,
}

/// Callback invoked once per tensor during a [`Tensors::visit`] walk.
///
/// `grad` is `Some` exactly for `TensorKind::Param`.
pub trait TensorVisitor {
    fn visit(
        &mut self,
        name: &str,
        kind: TensorKind,
        value: ArrayViewMutD<'_, f64>,
        grad: Option<ArrayViewMutD<'_, f64>>,
    );
}

/// Anything that owns named tensors: layers, blocks, whole networks.
pub trait Tensors {
    /// Walk all tensors in a fixed order, with `prefix` prepended to names.
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor);
}

/// Join a dotted-path prefix with a leaf name.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Zero every parameter gradient below `root`.
pub fn zero_grads(root: &mut impl Tensors) {
    struct Z;
    impl TensorVisitor for Z {
        fn visit(
            &mut self,
            _n: &str,
            _k: TensorKind,
            _v: ArrayViewMutD<'_, f64>,
            grad: Option<ArrayViewMutD<'_, f64>>,
        ) {
            if let Some(mut g) = grad {
                g.fill(0.0);
            }
        }
    }
    root.visit("", &mut Z);
}

/// Snapshot every tensor below `root` as `(name, kind, values)`.
pub fn collect_tensors(root: &mut impl Tensors) -> Vec<(String, TensorKind, ArrayD<f64>)> {
    struct C(Vec<(String, TensorKind, ArrayD<f64>)>);
    impl TensorVisitor for C {
        fn visit(
            &mut self,
            n: &str,
            k: TensorKind,
            v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            self.0.push((n.to_string(), k, v.to_owned()));
        }
    }
    let mut c = C(Vec::new());
    root.visit("", &mut c);
    c.0
}

/// Overwrite tensors below `root` from `(name → values)` pairs.
///
/// Every visited tensor must be present with a matching shape, and every
/// provided tensor must be visited; anything else is reported by name.
pub fn assign_tensors(
    root: &mut impl Tensors,
    tensors: &std::collections::BTreeMap<String, ArrayD<f64>>,
) -> Result<(), String> {
    struct A<'a> {
        src: &'a std::collections::BTreeMap<String, ArrayD<f64>>,
        seen: Vec<String>,
        errors: Vec<String>,
    }
    impl TensorVisitor for A<'_> {
        fn visit(
            &mut self,
            n: &str,
            _k: TensorKind,
            mut v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            match self.src.get(n) {
                None => self.errors.push(format!("missing tensor `{n}`")),
                Some(src) if src.shape() != v.shape() => self.errors.push(format!(
                    "shape mismatch for `{n}`: stored {:?}, model {:?}",
                    src.shape(),
                    v.shape()
                )),
                Some(src) => {
                    v.assign(src);
                    self.seen.push(n.to_string());
                }
            }
        }
    }
    let mut a = A { src: tensors, seen: Vec::new(), errors: Vec::new() };
    root.visit("", &mut a);
    for name in tensors.keys() {
        if !a.seen.iter().any(|s| s == name) && !a.errors.iter().any(|e| e.contains(name)) {
            a.errors.push(format!("unexpected tensor `{name}`"));
        }
    }
    if a.errors.is_empty() {
        Ok(())
    } else {
        Err(a.errors.join("; "))
    }
}

/// Total parameter element count below `root`.
pub fn param_count(root: &mut impl Tensors) -> usize {
    struct P(usize);
    impl TensorVisitor for P {
        fn visit(
            &mut self,
            _n: &str,
            k: TensorKind,
            v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            if k == TensorKind::Param {
                self.0 += v.len();
            }
        }
    }
    let mut p = P(0);
    root.visit("", &mut p);
    p.0
}

/// SHA-256 over the bytes of every parameter whose name starts with `prefix`
/// (all parameters when `prefix` is empty). Bit-exact: any change to any
/// covered parameter changes the digest.
pub fn param_fingerprint(root: &mut impl Tensors, prefix: &str) -> String {
    use sha2::{Digest, Sha256};
    struct F<'a> {
        prefix: &'a str,
        hasher: Sha256,
    }
    impl TensorVisitor for F<'_> {
        fn visit(
            &mut self,
            n: &str,
            k: TensorKind,
            v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            if k == TensorKind::Param && n.starts_with(self.prefix) {
                self.hasher.update(n.as_bytes());
                for x in v.iter() {
                    self.hasher.update(x.to_bits().to_le_bytes());
                }
            }
        }
    }
    let mut f = F { prefix, hasher: Sha256::new() };
    root.visit("", &mut f);
    let d = f.hasher.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// List parameter names below `root` (dotted paths, visit order).
pub fn param_names(root: &mut impl Tensors) -> Vec<String> {
    struct N(Vec<String>);
    impl TensorVisitor for N {
        fn visit(
            &mut self,
            n: &str,
            k: TensorKind,
            _v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            if k == TensorKind::Param {
                self.0.push(n.to_string());
            }
        }
    }
    let mut n = N(Vec::new());
    root.visit("", &mut n);
    n.0
}

/// Report any non-finite value below `root` as `Some(name)`.
pub fn first_non_finite(root: &mut impl Tensors) -> Option<String> {
    struct Nf(Option<String>);
    impl TensorVisitor for Nf {
        fn visit(
            &mut self,
            n: &str,
            _k: TensorKind,
            v: ArrayViewMutD<'_, f64>,
            _g: Option<ArrayViewMutD<'_, f64>>,
        ) {
            if self.0.is_none() && v.iter().any(|x| !x.is_finite()) {
                self.0 = Some(n.to_string());
            }
        }
    }
    let mut nf = Nf(None);
    root.visit("", &mut nf);
    nf.0
}

/// He-normal initialization: zero-mean Gaussian with variance `2 / fan_in`.
///
/// Samples via Box–Muller from the shared deterministic stream, so a given
/// seed always produces the same parameters on every platform.
pub fn he_normal(rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut vals = Vec::with_capacity(n);
    while vals.len() < n {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        vals.push(r * t.cos() * std);
        if vals.len() < n {
            vals.push(r * t.sin() * std);
        }
    }
    ArrayD::from_shape_vec(shape.to_vec(), vals).expect("shape/product mismatch")
}
