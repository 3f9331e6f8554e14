//! Capsule algebra: squashing, vote projection, routing-by-agreement,
//! derouting.
//!
//! A capsule layer is a set of pose vectors. The encoder's deepest feature map
//! becomes the primary capsules `U` (one `k`-dim capsule per grid position);
//! each primary capsule casts a vote `û_{j|i} = uᵢ·W_{ij}` for every output
//! capsule, and routing-by-agreement iteratively concentrates each input's
//! coupling on the outputs its votes agree with. Derouting is the learned
//! inverse used by the decoder: it projects routed entity capsules back onto
//! the primary-capsule grid.
//!
//! Everything here operates on a single sample; the network loops over the
//! batch dimension (capsule tensors are small — a few hundred grid positions).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rand_chacha::ChaCha20Rng;

use super::nn::{he_normal, join, TensorKind, TensorVisitor, Tensors};

/// Number of routing iterations used throughout.
pub const ROUTING_ITERATIONS: usize = 3;

/// Squash a pose vector: `v = (‖s‖²/(1+‖s‖²)) · s/‖s‖`.
///
/// Keeps direction, maps magnitude into `[0, 1)`, and sends the zero vector to
/// itself.
pub fn squash(s: ArrayView1<'_, f64>) -> Array1<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return Array1::zeros(s.len());
    }
    let n = n2.sqrt();
    let scale = n / (1.0 + n2);
    s.mapv(|v| v * scale)
}

/// Vector–Jacobian product of [`squash`] at `s` applied to `dv`.
fn squash_vjp(s: ArrayView1<'_, f64>, dv: ArrayView1<'_, f64>) -> Array1<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        // squash is 0 on a neighbourhood-free point; use the zero subgradient
        return Array1::zeros(s.len());
    }
    let n = n2.sqrt();
    let h = n / (1.0 + n2);
    let hp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
    let sdot: f64 = s.iter().zip(dv.iter()).map(|(a, b)| a * b).sum();
    let coef = hp / n * sdot;
    Array1::from_iter(s.iter().zip(dv.iter()).map(|(si, di)| h * di + coef * si))
}

/// Learned vote map: `û_{j|i} = uᵢ·W_{ij}` with one `k×k̂` matrix per
/// input/output capsule pair.
#[derive(Debug, Clone)]
pub struct VoteProjection {
    /// `[n_in, n_out, k, k_hat]`
    pub w: Array4<f64>,
    pub gw: Array4<f64>,
}

impl VoteProjection {
    pub fn new(rng: &mut ChaCha20Rng, n_in: usize, n_out: usize, k: usize, k_hat: usize) -> Self {
        let w = he_normal(rng, k, &[n_in, n_out, k, k_hat]).into_dimensionality().unwrap();
        VoteProjection { w, gw: Array4::zeros((n_in, n_out, k, k_hat)) }
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[0]
    }
    pub fn n_out(&self) -> usize {
        self.w.shape()[1]
    }
    pub fn k(&self) -> usize {
        self.w.shape()[2]
    }
    pub fn k_hat(&self) -> usize {
        self.w.shape()[3]
    }

    /// `u: [n_in, k]` → votes `[n_in, n_out, k_hat]`.
    pub fn forward(&self, u: &Array2<f64>) -> Array3<f64> {
        let (n_in, n_out, k, k_hat) = self.w.dim();
        assert_eq!(u.dim(), (n_in, k), "vote projection input shape");
        let mut votes = Array3::zeros((n_in, n_out, k_hat));
        for i in 0..n_in {
            for j in 0..n_out {
                for b in 0..k_hat {
                    let mut acc = 0.0;
                    for a in 0..k {
                        acc += u[[i, a]] * self.w[[i, j, a, b]];
                    }
                    votes[[i, j, b]] = acc;
                }
            }
        }
        votes
    }

    /// Accumulate `gw` and return `du` for the cached input.
    pub fn backward(&mut self, u: &Array2<f64>, dvotes: &Array3<f64>) -> Array2<f64> {
        let (n_in, n_out, k, k_hat) = self.w.dim();
        assert_eq!(dvotes.dim(), (n_in, n_out, k_hat), "vote gradient shape");
        let mut du = Array2::zeros((n_in, k));
        for i in 0..n_in {
            for j in 0..n_out {
                for b in 0..k_hat {
                    let g = dvotes[[i, j, b]];
                    if g == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        du[[i, a]] += g * self.w[[i, j, a, b]];
                        self.gw[[i, j, a, b]] += g * u[[i, a]];
                    }
                }
            }
        }
        du
    }
}

impl Tensors for VoteProjection {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        let n = join(prefix, "w");
        v.visit(
            &n,
            TensorKind::Param,
            self.w.view_mut().into_dyn(),
            Some(self.gw.view_mut().into_dyn()),
        );
    }
}

/// Everything the routing backward pass needs: per-iteration couplings,
/// pre-squash sums, and squashed outputs.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    pub c: Vec<Array2<f64>>,
    pub s: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl RoutingTrace {
    /// Final couplings `[n_in, n_out]`; every row sums to 1.
    pub fn couplings(&self) -> &Array2<f64> {
        self.c.last().expect("empty routing trace")
    }

    /// Final output capsules `[n_out, k_hat]`.
    pub fn output(&self) -> &Array2<f64> {
        self.v.last().expect("empty routing trace")
    }
}

/// Routing-by-agreement over votes `[n_in, n_out, k_hat]`.
///
/// Logits start at zero; each iteration softmaxes them per input capsule,
/// forms coupling-weighted vote sums, squashes, and (except on the last
/// iteration) reinforces logits by vote–output agreement.
pub fn route(votes: &Array3<f64>, iterations: usize) -> RoutingTrace {
    assert!(iterations >= 1, "routing needs at least one iteration");
    let (n_in, n_out, k_hat) = votes.dim();
    let mut b = Array2::<f64>::zeros((n_in, n_out));
    let mut trace = RoutingTrace { c: Vec::new(), s: Vec::new(), v: Vec::new() };
    for t in 0..iterations {
        let mut c = Array2::zeros((n_in, n_out));
        for i in 0..n_in {
            let row = b.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n_out {
                let e = (b[[i, j]] - m).exp();
                c[[i, j]] = e;
                total += e;
            }
            for j in 0..n_out {
                c[[i, j]] /= total;
            }
        }
        let mut s = Array2::zeros((n_out, k_hat));
        for j in 0..n_out {
            for bb in 0..k_hat {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += c[[i, j]] * votes[[i, j, bb]];
                }
                s[[j, bb]] = acc;
            }
        }
        let mut v = Array2::zeros((n_out, k_hat));
        for j in 0..n_out {
            v.row_mut(j).assign(&squash(s.row(j)));
        }
        if t + 1 < iterations {
            for i in 0..n_in {
                for j in 0..n_out {
                    let mut agree = 0.0;
                    for bb in 0..k_hat {
                        agree += votes[[i, j, bb]] * v[[j, bb]];
                    }
                    b[[i, j]] += agree;
                }
            }
        }
        trace.c.push(c);
        trace.s.push(s);
        trace.v.push(v);
    }
    trace
}

/// Backward pass of [`route`]: gradient of the final output capsules with
/// respect to the votes, replaying the unrolled iterations in reverse.
pub fn route_backward(
    votes: &Array3<f64>,
    trace: &RoutingTrace,
    dv_out: &Array2<f64>,
) -> Array3<f64> {
    let (n_in, n_out, k_hat) = votes.dim();
    let iters = trace.v.len();
    assert_eq!(dv_out.dim(), (n_out, k_hat), "routing output gradient shape");
    let mut dvotes = Array3::zeros((n_in, n_out, k_hat));
    // gradient w.r.t. b^{t+1}, populated while walking backwards
    let mut db_next: Option<Array2<f64>> = None;
    for t in (0..iters).rev() {
        let c = &trace.c[t];
        let s = &trace.s[t];
        let v = &trace.v[t];
        // dv^t collects the direct loss path (last iteration only) and the
        // agreement path through b^{t+1}
        let mut dv = Array2::zeros((n_out, k_hat));
        if t + 1 == iters {
            dv += dv_out;
        }
        if let Some(dbn) = &db_next {
            for j in 0..n_out {
                for bb in 0..k_hat {
                    let mut acc = 0.0;
                    for i in 0..n_in {
                        acc += dbn[[i, j]] * votes[[i, j, bb]];
                    }
                    dv[[j, bb]] += acc;
                }
            }
            for i in 0..n_in {
                for j in 0..n_out {
                    let g = dbn[[i, j]];
                    for bb in 0..k_hat {
                        dvotes[[i, j, bb]] += g * v[[j, bb]];
                    }
                }
            }
        }
        // through squash
        let mut ds = Array2::zeros((n_out, k_hat));
        for j in 0..n_out {
            ds.row_mut(j).assign(&squash_vjp(s.row(j), dv.row(j)));
        }
        // s_j = Σ_i c_ij·û_ij
        let mut dc = Array2::zeros((n_in, n_out));
        for i in 0..n_in {
            for j in 0..n_out {
                let mut acc = 0.0;
                for bb in 0..k_hat {
                    acc += ds[[j, bb]] * votes[[i, j, bb]];
                    dvotes[[i, j, bb]] += c[[i, j]] * ds[[j, bb]];
                }
                dc[[i, j]] = acc;
            }
        }
        // softmax rows: db = c ∘ (dc − ⟨dc, c⟩)
        let mut db = Array2::zeros((n_in, n_out));
        for i in 0..n_in {
            let mut dot = 0.0;
            for j in 0..n_out {
                dot += dc[[i, j]] * c[[i, j]];
            }
            for j in 0..n_out {
                db[[i, j]] = c[[i, j]] * (dc[[i, j]] - dot);
            }
        }
        // identity path b^{t+1} = b^t + …
        if let Some(dbn) = &db_next {
            db += dbn;
        }
        db_next = Some(db);
    }
    // b^0 is a constant, so its gradient is dropped
    dvotes
}

/// Learned inverse vote map: `u^r_i = Σ_j v_j·W^r_{ji}` with one `k̂×k` matrix
/// per capsule pair, projecting routed entity capsules back onto the
/// primary-capsule grid.
#[derive(Debug, Clone)]
pub struct Deroute {
    /// `[n_in, n_out, k_hat, k]`
    pub w: Array4<f64>,
    pub gw: Array4<f64>,
}

impl Deroute {
    pub fn new(rng: &mut ChaCha20Rng, n_in: usize, n_out: usize, k: usize, k_hat: usize) -> Self {
        let w = he_normal(rng, n_out * k_hat, &[n_in, n_out, k_hat, k])
            .into_dimensionality()
            .unwrap();
        Deroute { w, gw: Array4::zeros((n_in, n_out, k_hat, k)) }
    }

    /// `v: [n_out, k_hat]` → `u_r: [n_in, k]`.
    pub fn forward(&self, v: &Array2<f64>) -> Array2<f64> {
        let (n_in, n_out, k_hat, k) = self.w.dim();
        assert_eq!(v.dim(), (n_out, k_hat), "deroute input shape");
        let mut u = Array2::zeros((n_in, k));
        for i in 0..n_in {
            for j in 0..n_out {
                for b in 0..k_hat {
                    let vv = v[[j, b]];
                    if vv == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        u[[i, a]] += vv * self.w[[i, j, b, a]];
                    }
                }
            }
        }
        u
    }

    /// Accumulate `gw` and return `dv` for the cached input.
    pub fn backward(&mut self, v: &Array2<f64>, du: &Array2<f64>) -> Array2<f64> {
        let (n_in, n_out, k_hat, k) = self.w.dim();
        assert_eq!(du.dim(), (n_in, k), "deroute gradient shape");
        let mut dv = Array2::zeros((n_out, k_hat));
        for i in 0..n_in {
            for j in 0..n_out {
                for b in 0..k_hat {
                    let mut acc = 0.0;
                    for a in 0..k {
                        acc += du[[i, a]] * self.w[[i, j, b, a]];
                        self.gw[[i, j, b, a]] += du[[i, a]] * v[[j, b]];
                    }
                    dv[[j, b]] += acc;
                }
            }
        }
        dv
    }
}

impl Tensors for Deroute {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        let n = join(prefix, "w");
        v.visit(
            &n,
            TensorKind::Param,
            self.w.view_mut().into_dyn(),
            Some(self.gw.view_mut().into_dyn()),
        );
    }
}
