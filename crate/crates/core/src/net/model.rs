//! The assembled network and its forward/backward plumbing.

use ndarray::{concatenate, s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::net::blocks::{DbdBlock, DbuBlock, Heads, PcdStage, PcuStage, PostBlock, PreBlock, TempHead};
use crate::net::{Level, NetConfigError, NetworkConfig, ShapePlan};
use crate::nn::{TensorVisitor, Tensors};

/// What one forward pass produces.
pub struct ForwardOutput {
    /// Palette distribution `[n, q, h, w]`; rows sum to one per pixel.
    pub z_hat: Array4<f64>,
    /// Chroma prediction `[n, 2, h', w']`; at the input resolution for the
    /// final level, at the level resolution for gated levels.
    pub ab_hat: Array4<f64>,
    pub level: Level,
}

/// Shape trace and routing statistics gathered by [`TucanNet::inspect`].
pub struct InspectionReport {
    /// Per-stage output shapes `[channels, height, width]`, in order.
    pub stage_shapes: Vec<(String, [usize; 3])>,
    /// Mean entropy (nats) of the coupling rows — how spread each primary
    /// capsule's vote allocation is.
    pub coupling_mean_entropy: f64,
    /// Largest single coupling coefficient.
    pub coupling_max: f64,
    /// Frozen plan description.
    pub plan_text: String,
}

fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat shapes")
}

fn split_channels(d: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    let a = d.slice(s![.., ..first, .., ..]).to_owned();
    let b = d.slice(s![.., first.., .., ..]).to_owned();
    (a, b)
}

/// The capsule U-net. Construction is deterministic in the seed; a forward
/// pass under `train = true` caches everything `backward` needs.
pub struct TucanNet {
    pub cfg: NetworkConfig,
    pub plan: ShapePlan,
    pre: PreBlock,
    dbd: [DbdBlock; 4],
    pcd: PcdStage,
    pcu: PcuStage,
    dbu: [DbuBlock; 4],
    post: PostBlock,
    heads: Heads,
    temp_head: Option<(Level, TempHead)>,
    last_level: Option<Level>,
}

impl TucanNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self, NetConfigError> {
        let plan = ShapePlan::from_config(&cfg)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mm = cfg.bn_momentum;
        let eps = cfg.bn_eps;

        let pre = PreBlock::new(&mut rng, cfg.base_channels, cfg.pre_conv, mm, eps);
        let mut in_ch = cfg.base_channels;
        let dbd = std::array::from_fn(|i| {
            let spec = cfg.dbd[i];
            let block =
                DbdBlock::new(&mut rng, in_ch, spec.out_channels, spec.conv1, spec.conv2, mm, eps);
            in_ch = spec.out_channels;
            block
        });
        let pcd = PcdStage::new(&mut rng, cfg.dbd[3].out_channels, plan.caps_grid, cfg.caps);
        let pcu = PcuStage::new(&mut rng, plan.caps_grid, cfg.caps);
        let dbu = std::array::from_fn(|i| {
            DbuBlock::new(
                &mut rng,
                plan.dbu_in_channels(i + 1),
                cfg.dbu_channels[i],
                plan.dbu_out[i],
                cfg.dbu_conv,
                mm,
                eps,
            )
        });
        let post = PostBlock::new(
            &mut rng,
            plan.post_in_channels(),
            cfg.base_channels,
            plan.pre_out,
            cfg.dbu_conv,
            mm,
            eps,
        );
        let heads = Heads::new(&mut rng, cfg.base_channels, cfg.q, plan.chroma_out);

        Ok(TucanNet {
            cfg,
            plan,
            pre,
            dbd,
            pcd,
            pcu,
            dbu,
            post,
            heads,
            temp_head: None,
            last_level: None,
        })
    }

    /// Create 1×1 heads for a gated level. Replaces any previous temp head;
    /// the new head's weights depend only on `seed` and the level geometry.
    pub fn attach_temp_head(&mut self, level: Level, seed: u64) {
        assert!(level != Level::Final, "the final level uses the real heads");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let head = TempHead::new(&mut rng, self.plan.level_channels(level), self.cfg.q);
        self.temp_head = Some((level, head));
    }

    /// Drop the temporary heads (their parameters are discarded).
    pub fn detach_temp_head(&mut self) {
        self.temp_head = None;
    }

    pub fn temp_head_level(&self) -> Option<Level> {
        self.temp_head.as_ref().map(|(l, _)| *l)
    }

    /// Run the network up to `level`. `l_norm` is `[n, 1, s, s]` lightness
    /// (L/100); gated levels require a matching attached temp head.
    pub fn forward(&mut self, l_norm: &Array4<f64>, level: Level, train: bool) -> ForwardOutput {
        self.forward_impl(l_norm, level, train, None)
    }

    fn forward_impl(
        &mut self,
        l_norm: &Array4<f64>,
        level: Level,
        train: bool,
        mut rec: Option<&mut Vec<(String, [usize; 3])>>,
    ) -> ForwardOutput {
        let shape = l_norm.shape();
        assert_eq!(shape[1], 1, "input must be a single lightness plane");
        assert_eq!(
            (shape[2], shape[3]),
            (self.plan.input, self.plan.input),
            "input size does not match the plan"
        );
        if level != Level::Final {
            match &self.temp_head {
                Some((l, _)) if *l == level => {}
                Some((l, _)) => panic!(
                    "temp head is attached for {} but forward was asked for {}",
                    l.label(),
                    level.label()
                ),
                None => panic!("gated level {} requires an attached temp head", level.label()),
            }
        }
        fn chw(t: &Array4<f64>) -> [usize; 3] {
            let s = t.shape();
            [s[1], s[2], s[3]]
        }
        let mut record = |name: &str, shape: [usize; 3]| {
            if let Some(r) = rec.as_deref_mut() {
                r.push((name.to_string(), shape));
            }
        };

        let m = self.pre.forward(l_norm, train);
        record("pre", chw(&m));
        let d1 = self.dbd[0].forward(&m, train);
        record("dbd1", chw(&d1));
        let d2 = self.dbd[1].forward(&d1, train);
        record("dbd2", chw(&d2));
        let d3 = self.dbd[2].forward(&d2, train);
        record("dbd3", chw(&d3));
        let d4 = self.dbd[3].forward(&d3, train);
        record("dbd4", chw(&d4));

        let v = self.pcd.forward(&d4, train);
        // entity capsules: [n_out, k_hat] per item
        record("pcd", [v[0].shape()[0], v[0].shape()[1], 1]);
        let x = self.pcu.forward(&v, train);
        record("pcu", chw(&x));

        self.last_level = Some(level);
        if level == Level::Pcu {
            let (z_hat, ab_hat) = self.temp_head.as_mut().unwrap().1.forward(&x, train);
            return ForwardOutput { z_hat, ab_hat, level };
        }

        let y1 = self.dbu[0].forward(&x, train);
        record("dbu1", chw(&y1));
        if level == Level::Up(1) {
            let (z_hat, ab_hat) = self.temp_head.as_mut().unwrap().1.forward(&y1, train);
            return ForwardOutput { z_hat, ab_hat, level };
        }

        let y2 = self.dbu[1].forward(&concat_channels(&y1, &d4), train);
        record("dbu2", chw(&y2));
        if level == Level::Up(2) {
            let (z_hat, ab_hat) = self.temp_head.as_mut().unwrap().1.forward(&y2, train);
            return ForwardOutput { z_hat, ab_hat, level };
        }

        let y3 = self.dbu[2].forward(&concat_channels(&y2, &d3), train);
        record("dbu3", chw(&y3));
        if level == Level::Up(3) {
            let (z_hat, ab_hat) = self.temp_head.as_mut().unwrap().1.forward(&y3, train);
            return ForwardOutput { z_hat, ab_hat, level };
        }

        let y4 = self.dbu[3].forward(&concat_channels(&y3, &d2), train);
        record("dbu4", chw(&y4));
        if level == Level::Up(4) {
            let (z_hat, ab_hat) = self.temp_head.as_mut().unwrap().1.forward(&y4, train);
            return ForwardOutput { z_hat, ab_hat, level };
        }

        let n = self.post.forward(&concat_channels(&y4, &d1), train);
        record("post", chw(&n));
        let fused = &n + &m;
        let (z_hat, ab_hat) = self.heads.forward(&fused, train);
        record("quant", chw(&z_hat));
        record("chroma", chw(&ab_hat));
        ForwardOutput { z_hat, ab_hat, level }
    }

    /// Backpropagate loss gradients on the two outputs of the last forward.
    /// Parameter gradients accumulate into the layers; the return value is
    /// the gradient on the lightness input.
    pub fn backward(&mut self, dz_hat: &Array4<f64>, dab_hat: &Array4<f64>) -> Array4<f64> {
        let level = self.last_level.expect("backward without a preceding forward");
        // Skip gradients waiting for the encoder sweep, indexed d1..d4.
        let mut skip: [Option<Array4<f64>>; 4] = [None, None, None, None];
        let mut dm_residual: Option<Array4<f64>> = None;

        // Decoder sweep: from the output down to the capsule seed.
        let mut dx = match level {
            Level::Final => {
                let d_fused = self.heads.backward(dz_hat, dab_hat);
                dm_residual = Some(d_fused.clone());
                let d_post_in = self.post.backward(&d_fused);
                let (dy4, dd1) = split_channels(&d_post_in, self.plan.dbu_channels[3]);
                skip[0] = Some(dd1);
                let d_in4 = self.dbu[3].backward(&dy4);
                let (dy3, dd2) = split_channels(&d_in4, self.plan.dbu_channels[2]);
                skip[1] = Some(dd2);
                let d_in3 = self.dbu[2].backward(&dy3);
                let (dy2, dd3) = split_channels(&d_in3, self.plan.dbu_channels[1]);
                skip[2] = Some(dd3);
                let d_in2 = self.dbu[1].backward(&dy2);
                let (dy1, dd4) = split_channels(&d_in2, self.plan.dbu_channels[0]);
                skip[3] = Some(dd4);
                self.dbu[0].backward(&dy1)
            }
            gated => {
                let head = &mut self.temp_head.as_mut().expect("temp head missing in backward").1;
                let mut dy = head.backward(dz_hat, dab_hat);
                // walk down from the gated block to dbu1
                let top = gated.index(); // Up(i) → i, Pcu → 0
                for j in (2..=top).rev() {
                    let d_in = self.dbu[j - 1].backward(&dy);
                    let (dprev, dskip) = split_channels(&d_in, self.plan.dbu_channels[j - 2]);
                    skip[5 - j] = Some(dskip); // dbu_j consumed d_{5-j}
                    dy = dprev;
                }
                if top >= 1 {
                    self.dbu[0].backward(&dy)
                } else {
                    dy // level Pcu: gradient is already on the capsule seed
                }
            }
        };

        // Capsule bottleneck.
        let dv = self.pcu.backward(&dx);
        dx = self.pcd.backward(&dv);

        // Encoder sweep with skip accumulation: dx currently holds dd4.
        let mut dd = dx;
        for i in (0..4).rev() {
            if let Some(dskip) = skip[i].take() {
                dd += &dskip;
            }
            dd = self.dbd[i].backward(&dd);
        }
        if let Some(dm) = dm_residual {
            dd += &dm;
        }
        self.pre.backward(&dd)
    }

    /// Run an eval-mode forward at the given level, recording stage shapes
    /// and routing statistics.
    pub fn inspect(&mut self, l_norm: &Array4<f64>, level: Level) -> (ForwardOutput, InspectionReport) {
        let mut shapes = Vec::new();
        let out = self.forward_impl(l_norm, level, false, Some(&mut shapes));
        let mut entropy_sum = 0.0;
        let mut rows = 0usize;
        let mut max_c = 0.0f64;
        for c in &self.pcd.last_couplings {
            for row in c.rows() {
                let mut h = 0.0;
                for &p in row {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                    max_c = max_c.max(p);
                }
                entropy_sum += h;
                rows += 1;
            }
        }
        let report = InspectionReport {
            stage_shapes: shapes,
            coupling_mean_entropy: if rows > 0 { entropy_sum / rows as f64 } else { 0.0 },
            coupling_max: max_c,
            plan_text: self.plan.describe(),
        };
        (out, report)
    }
}

impl Tensors for TucanNet {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
        self.pre.visit(&crate::nn::join(prefix, "pre"), v);
        for (i, b) in self.dbd.iter_mut().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("dbd{}", i + 1)), v);
        }
        self.pcd.visit(&crate::nn::join(prefix, "pcd"), v);
        self.pcu.visit(&crate::nn::join(prefix, "pcu"), v);
        for (i, b) in self.dbu.iter_mut().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("dbu{}", i + 1)), v);
        }
        self.post.visit(&crate::nn::join(prefix, "post"), v);
        self.heads.visit(&crate::nn::join(prefix, "head"), v);
        if let Some((_, head)) = self.temp_head.as_mut() {
            head.visit(&crate::nn::join(prefix, "temp_head"), v);
        }
    }
}
