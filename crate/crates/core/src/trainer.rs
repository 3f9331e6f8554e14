//! Optimization, the training schedules, checkpoints, and the run loop.
//!
//! Three ways to train: end-to-end (the whole network from the start),
//! progressive (the decoder grows level by level, each gated phase training
//! through temporary heads), and finetune (resume a trained network with
//! small learning rates on the convolutional stages and a larger one on the
//! capsule stages). All three share the same epoch body: deterministic
//! batches, soft-encoded palette targets with class-rebalancing weights, the
//! combined quantization + chroma loss, and Adam.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewMutD, IxDyn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::colorspace::{
    rebalancing_weights, smooth_prior, BinTable, PRIOR_SIGMA, REBALANCE_LAMBDA,
};
use crate::datapipe::{level_targets, shuffled_batches, stack_lightness, Sample};
use crate::losses::{color_error_loss, quantization_loss, LossReport};
use crate::net::{Level, NetConfigError, NetworkConfig, TucanNet};
use crate::nn::{zero_grads, TensorKind, TensorVisitor, Tensors};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] NetConfigError),
}

// ---------------------------------------------------------------- optimizer

/// First/second moment state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
    /// Updates applied to this slot (bias correction counts per slot, so a
    /// parameter created mid-run — a fresh temp head — is corrected as new).
    pub t: u64,
}

/// Adam with per-parameter state keyed by the dotted tensor name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: BTreeMap::new() }
    }

    /// Apply one update to every parameter for which `lr` returns a rate;
    /// parameters mapped to `None` are left untouched (state included).
    pub fn step(&mut self, root: &mut impl Tensors, mut lr: impl FnMut(&str) -> Option<f64>) {
        struct V<'a> {
            adam: &'a mut Adam,
            lr: &'a mut dyn FnMut(&str) -> Option<f64>,
        }
        impl TensorVisitor for V<'_> {
            fn visit(
                &mut self,
                name: &str,
                kind: TensorKind,
                mut value: ArrayViewMutD<'_, f64>,
                grad: Option<ArrayViewMutD<'_, f64>>,
            ) {
                if kind != TensorKind::Param {
                    return;
                }
                let Some(rate) = (self.lr)(name) else { return };
                let grad = grad.expect("parameter without gradient storage");
                let slot = self.adam.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                    m: ArrayD::zeros(value.raw_dim()),
                    v: ArrayD::zeros(value.raw_dim()),
                    t: 0,
                });
                assert_eq!(
                    slot.m.shape(),
                    value.shape(),
                    "optimizer state shape diverged for {name}"
                );
                slot.t += 1;
                let b1 = self.adam.beta1;
                let b2 = self.adam.beta2;
                let eps = self.adam.eps;
                let bc1 = 1.0 - b1.powi(slot.t as i32);
                let bc2 = 1.0 - b2.powi(slot.t as i32);
                ndarray::Zip::from(&mut value)
                    .and(&mut slot.m)
                    .and(&mut slot.v)
                    .and(grad.view())
                    .for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= rate * mh / (vh.sqrt() + eps);
                    });
            }
        }
        let mut v = V { adam: self, lr: &mut lr };
        root.visit("", &mut v);
    }

    /// Drop state for names the predicate rejects (detached temp heads).
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.slots.retain(|name, _| keep(name));
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot)> {
        self.slots.iter()
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------- schedules

/// How a run trains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Everything at once through the real heads.
    EndToEnd,
    /// Grow the decoder: `rho` epochs per gated level, then `xi` final epochs.
    Progressive { rho: usize, xi: usize },
    /// Polish a trained network: slow convolutional stages, faster capsules.
    Finetune { conv_lr: f64, caps_lr: f64 },
}

/// Runtime hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epoch count for end-to-end and finetune runs (progressive runs derive
    /// theirs from the phase lengths).
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate (finetune uses the per-group rates instead).
    pub lr: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn end_to_end() -> Self {
        TrainConfig { epochs: 40, batch_size: 32, lr: 2e-3, seed: 0, mode: TrainMode::EndToEnd }
    }

    pub fn progressive() -> Self {
        TrainConfig {
            epochs: 0, // derived: 5·rho + xi
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            mode: TrainMode::Progressive { rho: 10, xi: 20 },
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            epochs: 35,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            mode: TrainMode::Finetune { conv_lr: 2e-4, caps_lr: 2e-3 },
        }
    }

    /// The phase list: `(level, epochs)` in training order.
    pub fn phases(&self) -> Vec<(Level, usize)> {
        match self.mode {
            TrainMode::EndToEnd | TrainMode::Finetune { .. } => vec![(Level::Final, self.epochs)],
            TrainMode::Progressive { rho, xi } => vec![
                (Level::Pcu, rho),
                (Level::Up(1), rho),
                (Level::Up(2), rho),
                (Level::Up(3), rho),
                (Level::Up(4), rho),
                (Level::Final, xi),
            ],
        }
    }

    /// Total epochs across all phases.
    pub fn total_epochs(&self) -> usize {
        self.phases().iter().map(|(_, e)| e).sum()
    }

    /// The level a given global epoch index trains at, or `None` past the end.
    pub fn level_for_epoch(&self, epoch: usize) -> Option<Level> {
        let mut start = 0;
        for (level, epochs) in self.phases() {
            if epoch < start + epochs {
                return Some(level);
            }
            start += epochs;
        }
        None
    }

    /// The per-parameter learning rate policy for this mode.
    pub fn rate_for(&self, name: &str) -> Option<f64> {
        match self.mode {
            TrainMode::EndToEnd | TrainMode::Progressive { .. } => Some(self.lr),
            TrainMode::Finetune { conv_lr, caps_lr } => {
                if name.starts_with("pcd.") || name.starts_with("pcu.") {
                    Some(caps_lr)
                } else {
                    Some(conv_lr)
                }
            }
        }
    }
}

// --------------------------------------------------------------- fingerprints

impl NetworkConfig {
    /// Stable textual identity of the architecture, for checkpoint matching.
    pub fn descriptor(&self) -> String {
        format!(
            "input={} base={} pre={:?} dbd={:?} caps={:?} dbu_ch={:?} dbu_conv={:?} q={} bn=({:e},{:e})",
            self.input_size,
            self.base_channels,
            self.pre_conv,
            self.dbd,
            self.caps,
            self.dbu_channels,
            self.dbu_conv,
            self.q,
            self.bn_momentum,
            self.bn_eps,
        )
    }

    /// Hex SHA-256 of [`NetworkConfig::descriptor`].
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.descriptor().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// --------------------------------------------------------------- checkpoints

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TUCN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run progress stored alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Epochs fully completed.
    pub epoch_done: u64,
    /// Level the run was training when saved.
    pub level: Level,
    /// Class-rebalancing weights fitted at run start (length Q).
    pub bin_weights: Vec<f64>,
}

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}
fn w_array(w: &mut impl Write, a: &ArrayD<f64>) -> std::io::Result<()> {
    w_u64(w, a.ndim() as u64)?;
    for &d in a.shape() {
        w_u64(w, d as u64)?;
    }
    for &x in a.iter() {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}
fn r_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_str(r: &mut impl Read) -> Result<String, TrainError> {
    let n = r_u64(r)? as usize;
    if n > 1 << 20 {
        return Err(TrainError::Format(format!("string length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TrainError::Format(format!("non-utf8 string: {e}")))
}
fn r_array(r: &mut impl Read) -> Result<ArrayD<f64>, TrainError> {
    let ndim = r_u64(r)? as usize;
    if ndim > 8 {
        return Err(TrainError::Format(format!("tensor rank {ndim} is implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let d = r_u64(r)? as usize;
        len = len.saturating_mul(d);
        shape.push(d);
    }
    if len > 1 << 28 {
        return Err(TrainError::Format(format!("tensor of {len} elements is implausible")));
    }
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        data.push(f64::from_bits(u64::from_le_bytes(b)));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| TrainError::Format(format!("tensor shape: {e}")))
}

/// Serialize the network, optimizer, and run progress.
///
/// The file opens with fingerprints of the architecture and the palette;
/// [`load_checkpoint`] refuses files whose fingerprints do not match what the
/// caller is about to train, instead of silently mixing incompatible tensors.
pub fn save_checkpoint(
    path: &Path,
    net: &mut TucanNet,
    adam: &Adam,
    state: &RunState,
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w_u32(&mut w, CHECKPOINT_VERSION)?;
    w_str(&mut w, &net.cfg.fingerprint())?;
    w_str(&mut w, &BinTable::canonical().fingerprint())?;
    w_u64(&mut w, state.epoch_done)?;
    w_u64(&mut w, state.level.index() as u64)?;
    w_u64(&mut w, state.bin_weights.len() as u64)?;
    for &x in &state.bin_weights {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }

    let tensors = crate::nn::collect_tensors(net);
    w_u64(&mut w, tensors.len() as u64)?;
    for (name, kind, value) in &tensors {
        w_str(&mut w, name)?;
        w.write_all(&[match kind {
            TensorKind::Param => 0u8,
            TensorKind::State => 1u8,
        }])?;
        w_array(&mut w, value)?;
    }

    w_u64(&mut w, adam.len() as u64)?;
    for (name, slot) in adam.slots() {
        w_str(&mut w, name)?;
        w_u64(&mut w, slot.t)?;
        w_array(&mut w, &slot.m)?;
        w_array(&mut w, &slot.v)?;
    }
    w.flush()?;
    Ok(())
}

/// Restore a checkpoint for the given architecture.
pub fn load_checkpoint(
    path: &Path,
    cfg: &NetworkConfig,
) -> Result<(TucanNet, Adam, RunState), TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_fp = r_str(&mut r)?;
    if cfg_fp != cfg.fingerprint() {
        return Err(TrainError::Mismatch(
            "checkpoint was written for a different network configuration".into(),
        ));
    }
    let bins_fp = r_str(&mut r)?;
    if bins_fp != BinTable::canonical().fingerprint() {
        return Err(TrainError::Mismatch(
            "checkpoint was written against a different palette table".into(),
        ));
    }
    let epoch_done = r_u64(&mut r)?;
    let level_idx = r_u64(&mut r)? as usize;
    let level = *Level::schedule_order()
        .get(level_idx)
        .ok_or_else(|| TrainError::Format(format!("level index {level_idx} out of range")))?;
    let n_weights = r_u64(&mut r)? as usize;
    if n_weights > 1 << 20 {
        return Err(TrainError::Format("weight table length is implausible".into()));
    }
    let mut bin_weights = Vec::with_capacity(n_weights);
    let mut b8 = [0u8; 8];
    for _ in 0..n_weights {
        r.read_exact(&mut b8)?;
        bin_weights.push(f64::from_bits(u64::from_le_bytes(b8)));
    }

    let mut net = TucanNet::new(cfg.clone(), 0)?;
    if level != Level::Final {
        net.attach_temp_head(level, 0); // shapes only; values come from the file
    }

    let n_tensors = r_u64(&mut r)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r_str(&mut r)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let value = r_array(&mut r)?;
        map.insert(name, value);
    }
    crate::nn::assign_tensors(&mut net, &map).map_err(TrainError::Format)?;

    let mut adam = Adam::new();
    let n_slots = r_u64(&mut r)? as usize;
    for _ in 0..n_slots {
        let name = r_str(&mut r)?;
        let t = r_u64(&mut r)?;
        let m = r_array(&mut r)?;
        let v = r_array(&mut r)?;
        adam.insert_slot(name, AdamSlot { m, v, t });
    }

    Ok((net, adam, RunState { epoch_done, level, bin_weights }))
}

/// Checkpoint header fields, readable without knowing the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub net_fingerprint: String,
    pub bins_fingerprint: String,
    pub epoch_done: u64,
    pub level: Level,
}

/// Read only the header of a checkpoint (for reporting, not restoring).
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let net_fingerprint = r_str(&mut r)?;
    let bins_fingerprint = r_str(&mut r)?;
    let epoch_done = r_u64(&mut r)?;
    let level_idx = r_u64(&mut r)? as usize;
    let level = *Level::schedule_order()
        .get(level_idx)
        .ok_or_else(|| TrainError::Format(format!("level index {level_idx} out of range")))?;
    Ok(CheckpointMeta { version, net_fingerprint, bins_fingerprint, epoch_done, level })
}

// ----------------------------------------------------------------- run loop

/// Per-epoch aggregate losses (sample-weighted means over the epoch).
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub level: Level,
    pub quant: f64,
    pub color: f64,
    pub total: f64,
}

/// Owns the network, the optimizer, the prepared samples, and the fitted
/// rebalancing weights, and drives the configured schedule.
pub struct Trainer {
    pub net: TucanNet,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub samples: Vec<Sample>,
    pub bin_weights: Vec<f64>,
    pub epoch_done: usize,
    pub active_level: Level,
}

impl Trainer {
    /// Fit the rebalancing weights from the samples and stand up a fresh run.
    pub fn new(net: TucanNet, cfg: TrainConfig, samples: Vec<Sample>) -> Self {
        // Targets and rebalancing weights are encoded over the canonical
        // palette, so a head of any other width would index out of range.
        assert_eq!(
            net.cfg.q,
            BinTable::canonical().q(),
            "training requires q to match the canonical palette"
        );
        let bin_weights = fit_bin_weights(&net, &samples);
        let active_level = cfg.phases()[0].0;
        Trainer { net, cfg, adam: Adam::new(), samples, bin_weights, epoch_done: 0, active_level }
    }

    /// Resume from restored parts (checkpoint load path).
    pub fn resume(
        net: TucanNet,
        cfg: TrainConfig,
        adam: Adam,
        samples: Vec<Sample>,
        state: RunState,
    ) -> Self {
        Trainer {
            net,
            cfg,
            adam,
            samples,
            bin_weights: state.bin_weights,
            epoch_done: state.epoch_done as usize,
            active_level: state.level,
        }
    }

    /// Make the network match a phase's level: attach (or keep) the phase's
    /// temp head, or drop it for the final level. Optimizer state for old
    /// temp heads is discarded with them.
    fn enter_phase(&mut self, level: Level) {
        if level == Level::Final {
            if self.net.temp_head_level().is_some() {
                self.net.detach_temp_head();
                self.adam.retain(|n| !n.starts_with("temp_head"));
            }
        } else if self.net.temp_head_level() != Some(level) {
            self.adam.retain(|n| !n.starts_with("temp_head"));
            // head init depends only on (seed, level), so a restart at a
            // phase boundary recreates the identical head
            self.net.attach_temp_head(level, self.cfg.seed ^ (0xA5A5_0000 + level.index() as u64));
        }
        self.active_level = level;
    }

    /// One pass over the dataset at `level`; `epoch` is the global index
    /// (it keys the shuffle, so resumed runs see the same batch order).
    pub fn train_epoch(&mut self, level: Level, epoch: usize) -> EpochStats {
        let plan = self.net.plan.clone();
        let (z_size, ab_size) = match level {
            Level::Final => (plan.post_out, plan.chroma_out),
            gated => (plan.level_size(gated), plan.level_size(gated)),
        };
        let bins = BinTable::canonical();
        let batches =
            shuffled_batches(self.samples.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64);
        let mut quant_sum = 0.0;
        let mut color_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in &batches {
            let l = stack_lightness(&self.samples, batch);
            let mut encodings = Vec::with_capacity(batch.len());
            let mut ab_targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = level_targets(&self.samples[i].ab, z_size, ab_size, bins);
                encodings.push(t.encoding);
                ab_targets.push(t.ab);
            }
            let out = self.net.forward(&l, level, true);
            let (quant, dz) = quantization_loss(&out.z_hat, &encodings, Some(&self.bin_weights));
            let (color, dab) = color_error_loss(&out.ab_hat, &ab_targets);
            zero_grads(&mut self.net);
            self.net.backward(&dz, &dab);
            let cfg = self.cfg.clone();
            self.adam.step(&mut self.net, |name| cfg.rate_for(name));
            quant_sum += quant * batch.len() as f64;
            color_sum += color * batch.len() as f64;
            n_seen += batch.len();
        }
        let quant = quant_sum / n_seen as f64;
        let color = color_sum / n_seen as f64;
        EpochStats { epoch, level, quant, color, total: quant + color }
    }

    /// Drive the configured schedule to completion, starting after any
    /// already-completed epochs. `checkpoint_to` (if given) is rewritten
    /// after every epoch; `on_epoch` observes each epoch's stats.
    pub fn run(
        &mut self,
        checkpoint_to: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>, TrainError> {
        let mut stats = Vec::new();
        let mut global = 0usize;
        for (level, epochs) in self.cfg.phases() {
            if global + epochs <= self.epoch_done {
                global += epochs; // phase fully behind us
                continue;
            }
            self.enter_phase(level);
            for _ in 0..epochs {
                if global < self.epoch_done {
                    global += 1; // completed before resume
                    continue;
                }
                let s = self.train_epoch(level, global);
                global += 1;
                self.epoch_done = global;
                if let Some(path) = checkpoint_to {
                    self.save(path)?;
                }
                on_epoch(&s);
                stats.push(s);
            }
        }
        Ok(stats)
    }

    pub fn save(&mut self, path: &Path) -> Result<(), TrainError> {
        let state = RunState {
            epoch_done: self.epoch_done as u64,
            level: self.active_level,
            bin_weights: self.bin_weights.clone(),
        };
        save_checkpoint(path, &mut self.net, &self.adam, &state)
    }

    /// Mean losses over the whole dataset at the final level, without
    /// touching parameters (evaluation-mode forward).
    pub fn dataset_loss(&mut self) -> LossReport {
        let plan = self.net.plan.clone();
        let bins = BinTable::canonical();
        let batches: Vec<Vec<usize>> = (0..self.samples.len())
            .collect::<Vec<_>>()
            .chunks(self.cfg.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect();
        let mut quant_sum = 0.0;
        let mut color_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in &batches {
            let l = stack_lightness(&self.samples, batch);
            let mut encodings = Vec::with_capacity(batch.len());
            let mut ab_targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = level_targets(&self.samples[i].ab, plan.post_out, plan.chroma_out, bins);
                encodings.push(t.encoding);
                ab_targets.push(t.ab);
            }
            let out = self.net.forward(&l, Level::Final, false);
            let (quant, _) = quantization_loss(&out.z_hat, &encodings, Some(&self.bin_weights));
            let (color, _) = color_error_loss(&out.ab_hat, &ab_targets);
            quant_sum += quant * batch.len() as f64;
            color_sum += color * batch.len() as f64;
            n_seen += batch.len();
        }
        LossReport { quant: quant_sum / n_seen as f64, color: color_sum / n_seen as f64 }
    }
}

/// Soft-encode every sample at the palette-head resolution, fit the
/// empirical prior, smooth it, and derive the rebalancing weights.
fn fit_bin_weights(net: &TucanNet, samples: &[Sample]) -> Vec<f64> {
    use crate::colorspace::{soft_encode_sparse, SOFT_ENCODE_K, SOFT_ENCODE_SIGMA};
    let bins = BinTable::canonical();
    let z = net.plan.post_out;
    let encodings: Vec<_> = samples
        .iter()
        .map(|s| {
            let ab = crate::datapipe::resize_ab(&s.ab, z, z);
            soft_encode_sparse(&ab, bins, SOFT_ENCODE_SIGMA, SOFT_ENCODE_K)
        })
        .collect();
    let prior = crate::datapipe::fit_empirical_prior(&encodings, bins.q());
    let smoothed = smooth_prior(bins, &prior, PRIOR_SIGMA);
    rebalancing_weights(bins, &smoothed, REBALANCE_LAMBDA)
}

/// Write the run's summary key/value lines (a small, greppable format).
pub fn write_run_manifest(path: &Path, entries: &[(String, String)]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in entries {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Level;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};

    /// Minimal parameter holder for optimizer unit tests.
    struct Pair {
        a: ArrayD<f64>,
        ga: ArrayD<f64>,
        b: ArrayD<f64>,
        gb: ArrayD<f64>,
    }

    impl Pair {
        fn new() -> Self {
            Pair {
                a: ArrayD::from_elem(IxDyn(&[2]), 0.5),
                ga: ArrayD::from_elem(IxDyn(&[2]), 0.2),
                b: ArrayD::from_elem(IxDyn(&[3]), 1.0),
                gb: ArrayD::from_elem(IxDyn(&[3]), -0.4),
            }
        }
    }

    impl Tensors for Pair {
        fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor) {
            v.visit(
                &crate::nn::join(prefix, "a"),
                TensorKind::Param,
                self.a.view_mut(),
                Some(self.ga.view_mut()),
            );
            v.visit(
                &crate::nn::join(prefix, "b"),
                TensorKind::Param,
                self.b.view_mut(),
                Some(self.gb.view_mut()),
            );
        }
    }

    #[test]
    fn adam_matches_the_reference_trajectory() {
        // constant gradient 0.2, lr 0.1: the update magnitude approaches lr
        let mut p = Pair::new();
        let mut adam = Adam::new();
        adam.step(&mut p, |_| Some(0.1));
        assert_abs_diff_eq!(p.a[[0]], 0.4000000049999997, epsilon = 1e-15);
        adam.step(&mut p, |_| Some(0.1));
        assert_abs_diff_eq!(p.a[[0]], 0.3000000100000002, epsilon = 1e-15);
    }

    #[test]
    fn adam_leaves_frozen_parameters_untouched() {
        let mut p = Pair::new();
        let mut adam = Adam::new();
        adam.step(&mut p, |name| if name == "a" { Some(0.1) } else { None });
        assert_ne!(p.a[[0]], 0.5);
        assert_eq!(p.b[[0]], 1.0);
        assert_eq!(adam.len(), 1, "no state for the frozen parameter");
    }

    #[test]
    fn adam_retain_restarts_bias_correction() {
        let mut p = Pair::new();
        let mut adam = Adam::new();
        adam.step(&mut p, |_| Some(0.1));
        let after_first = p.a[[0]];
        adam.step(&mut p, |_| Some(0.1));
        adam.retain(|n| n != "a");
        // a fresh slot behaves like step one again: same-size update
        let before = p.a[[0]];
        adam.step(&mut p, |_| Some(0.1));
        let delta_fresh = before - p.a[[0]];
        let delta_first = 0.5 - after_first;
        assert_abs_diff_eq!(delta_fresh, delta_first, epsilon = 1e-12);
    }

    #[test]
    fn progressive_schedule_is_five_rho_plus_xi() {
        let cfg = TrainConfig::progressive();
        let phases = cfg.phases();
        assert_eq!(
            phases,
            vec![
                (Level::Pcu, 10),
                (Level::Up(1), 10),
                (Level::Up(2), 10),
                (Level::Up(3), 10),
                (Level::Up(4), 10),
                (Level::Final, 20),
            ]
        );
        assert_eq!(cfg.total_epochs(), 70);
    }

    #[test]
    fn finetune_rates_split_by_stage_family() {
        let cfg = TrainConfig::finetune();
        assert_eq!(cfg.rate_for("pcd.votes.w"), Some(2e-3));
        assert_eq!(cfg.rate_for("pcu.map3.w"), Some(2e-3));
        assert_eq!(cfg.rate_for("dbd2.s1.conv.w"), Some(2e-4));
        assert_eq!(cfg.rate_for("head.quant.w"), Some(2e-4));
        assert_eq!(cfg.rate_for("pre.conv.w"), Some(2e-4));
    }

    fn micro_config() -> NetworkConfig {
        use crate::net::{CapsuleSpec, ConvSpec, DbdSpec};
        NetworkConfig {
            input_size: 48,
            base_channels: 4,
            pre_conv: ConvSpec::new(3, 1, 1),
            dbd: [
                DbdSpec { out_channels: 6, conv1: ConvSpec::new(3, 2, 1), conv2: ConvSpec::new(3, 2, 1) },
                DbdSpec { out_channels: 8, conv1: ConvSpec::new(2, 1, 0), conv2: ConvSpec::new(3, 1, 1) },
                DbdSpec { out_channels: 8, conv1: ConvSpec::new(2, 1, 0), conv2: ConvSpec::new(3, 1, 1) },
                DbdSpec { out_channels: 8, conv1: ConvSpec::new(2, 1, 0), conv2: ConvSpec::new(3, 1, 1) },
            ],
            caps: CapsuleSpec {
                k: 4,
                k_hat: 6,
                n_out: 5,
                kernel: 2,
                map_channels: 3,
                routing_iterations: 3,
            },
            dbu_channels: [8, 8, 6, 4],
            dbu_conv: ConvSpec::new(3, 1, 1),
            q: 313,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    fn micro_samples(count: usize, seed: u64) -> Vec<Sample> {
        let dir = tempfile::tempdir().unwrap();
        let paths =
            crate::datapipe::synth::write_synthetic_dataset(dir.path(), count, 48, seed).unwrap();
        paths.iter().map(|p| crate::datapipe::prepare_sample(p, 48).unwrap()).collect()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = micro_config();
        let net = TucanNet::new(cfg.clone(), 4).unwrap();
        let mut trainer = Trainer::new(
            net,
            TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, seed: 3, mode: TrainMode::EndToEnd },
            micro_samples(4, 11),
        );
        trainer.run(None, |_| {}).unwrap(); // one epoch so Adam has state

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        trainer.save(&path).unwrap();

        let (mut net2, adam2, state) = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(state.epoch_done, 1);
        assert_eq!(state.level, Level::Final);
        assert_eq!(state.bin_weights, trainer.bin_weights);
        assert_eq!(
            crate::nn::param_fingerprint(&mut net2, ""),
            crate::nn::param_fingerprint(&mut trainer.net, "")
        );
        // optimizer state survives exactly
        let a: Vec<_> = trainer.adam.slots().map(|(n, s)| (n.clone(), s.clone())).collect();
        let b: Vec<_> = adam2.slots().map(|(n, s)| (n.clone(), s.clone())).collect();
        assert_eq!(a, b);

        // and the restored net computes the very same function
        let l = stack_lightness(&trainer.samples, &[0, 1]);
        let o1 = trainer.net.forward(&l, Level::Final, false);
        let o2 = net2.forward(&l, Level::Final, false);
        assert_eq!(o1.z_hat, o2.z_hat);
        assert_eq!(o1.ab_hat, o2.ab_hat);
    }

    #[test]
    fn checkpoint_refuses_foreign_config_and_garbage() {
        let cfg = micro_config();
        let mut net = TucanNet::new(cfg.clone(), 4).unwrap();
        let adam = Adam::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let state =
            RunState { epoch_done: 0, level: Level::Final, bin_weights: vec![1.0; 313] };
        save_checkpoint(&path, &mut net, &adam, &state).unwrap();

        let mut other = micro_config();
        other.base_channels = 8;
        match load_checkpoint(&path, &other) {
            Err(TrainError::Mismatch(msg)) => {
                assert!(msg.contains("configuration"), "got: {msg}")
            }
            Err(e) => panic!("expected Mismatch, got {e:?}"),
            Ok(_) => panic!("expected Mismatch, got Ok"),
        }

        let garbage = dir.path().join("garbage.bin");
        std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
        match load_checkpoint(&garbage, &cfg) {
            Err(TrainError::Format(msg)) => assert!(msg.contains("magic"), "got: {msg}"),
            Err(e) => panic!("expected Format, got {e:?}"),
            Ok(_) => panic!("expected Format, got Ok"),
        }
    }

    #[test]
    fn end_to_end_smoke_training_reduces_loss() {
        let cfg = micro_config();
        let net = TucanNet::new(cfg, 1).unwrap();
        let mut trainer = Trainer::new(
            net,
            TrainConfig { epochs: 4, batch_size: 4, lr: 2e-3, seed: 0, mode: TrainMode::EndToEnd },
            micro_samples(8, 5),
        );
        let stats = trainer.run(None, |_| {}).unwrap();
        assert_eq!(stats.len(), 4);
        assert!(stats.iter().all(|s| s.total.is_finite()));
        assert!(
            stats[3].total < stats[0].total,
            "loss should drop: {} → {}",
            stats[0].total,
            stats[3].total
        );
    }

    #[test]
    fn gated_phase_trains_only_below_the_gate() {
        let cfg = micro_config();
        let net = TucanNet::new(cfg, 2).unwrap();
        let mut trainer = Trainer::new(
            net,
            TrainConfig {
                epochs: 0,
                batch_size: 4,
                lr: 1e-3,
                seed: 1,
                mode: TrainMode::Progressive { rho: 1, xi: 1 },
            },
            micro_samples(4, 6),
        );
        trainer.enter_phase(Level::Pcu);
        let frozen_before: Vec<String> = ["dbu1", "dbu2", "dbu3", "dbu4", "post", "head"]
            .iter()
            .map(|p| crate::nn::param_fingerprint(&mut trainer.net, p))
            .collect();
        let active_before = crate::nn::param_fingerprint(&mut trainer.net, "pcd");
        trainer.train_epoch(Level::Pcu, 0);
        let frozen_after: Vec<String> = ["dbu1", "dbu2", "dbu3", "dbu4", "post", "head"]
            .iter()
            .map(|p| crate::nn::param_fingerprint(&mut trainer.net, p))
            .collect();
        assert_eq!(frozen_before, frozen_after, "stages beyond the gate moved");
        assert_ne!(
            active_before,
            crate::nn::param_fingerprint(&mut trainer.net, "pcd"),
            "capsule stage did not train"
        );
    }

    #[test]
    fn progressive_run_walks_all_phases_and_detaches_heads() {
        let cfg = micro_config();
        let net = TucanNet::new(cfg, 3).unwrap();
        let mut trainer = Trainer::new(
            net,
            TrainConfig {
                epochs: 0,
                batch_size: 4,
                lr: 1e-3,
                seed: 2,
                mode: TrainMode::Progressive { rho: 1, xi: 1 },
            },
            micro_samples(4, 7),
        );
        let stats = trainer.run(None, |_| {}).unwrap();
        let levels: Vec<Level> = stats.iter().map(|s| s.level).collect();
        assert_eq!(
            levels,
            vec![
                Level::Pcu,
                Level::Up(1),
                Level::Up(2),
                Level::Up(3),
                Level::Up(4),
                Level::Final
            ]
        );
        assert!(trainer.net.temp_head_level().is_none(), "final phase must drop temp heads");
        assert!(stats.iter().all(|s| s.total.is_finite()));
        assert!(
            trainer.adam.slots().all(|(n, _)| !n.starts_with("temp_head")),
            "temp-head optimizer state must be dropped"
        );
    }

    #[test]
    fn resumed_run_matches_the_uninterrupted_one() {
        let cfg = micro_config();
        let samples = micro_samples(6, 9);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            seed: 4,
            mode: TrainMode::EndToEnd,
        };

        // uninterrupted: two epochs straight
        let net = TucanNet::new(cfg.clone(), 5).unwrap();
        let mut straight = Trainer::new(net, tc.clone(), clone_samples(&samples));
        straight.run(None, |_| {}).unwrap();

        // interrupted: one epoch, checkpoint, reload, continue
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let net = TucanNet::new(cfg.clone(), 5).unwrap();
        let mut first = Trainer::new(
            net,
            TrainConfig { epochs: 1, ..tc.clone() },
            clone_samples(&samples),
        );
        first.run(Some(&path), |_| {}).unwrap();
        drop(first);

        let (net2, adam2, state) = load_checkpoint(&path, &cfg).unwrap();
        let mut resumed = Trainer::resume(net2, tc, adam2, clone_samples(&samples), state);
        resumed.run(None, |_| {}).unwrap();

        assert_eq!(
            crate::nn::param_fingerprint(&mut straight.net, ""),
            crate::nn::param_fingerprint(&mut resumed.net, ""),
            "resume must continue the exact trajectory"
        );
    }

    fn clone_samples(samples: &[Sample]) -> Vec<Sample> {
        samples
            .iter()
            .map(|s| Sample { l_norm: s.l_norm.clone(), ab: s.ab.clone() })
            .collect()
    }

    #[test]
    fn run_manifest_is_plain_key_value_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_run_manifest(
            &path,
            &[("epochs".into(), "4".into()), ("final_total".into(), "1.25".into())],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epochs=4\nfinal_total=1.25\n");
    }

    #[test]
    fn epoch_to_level_mapping_covers_the_default_progressive_plan() {
        let cfg = TrainConfig::progressive();
        assert_eq!(cfg.total_epochs(), 70);
        for epoch in 0..70 {
            let want = match epoch {
                0..=9 => Level::Pcu,
                10..=19 => Level::Up(1),
                20..=29 => Level::Up(2),
                30..=39 => Level::Up(3),
                40..=49 => Level::Up(4),
                _ => Level::Final,
            };
            assert_eq!(cfg.level_for_epoch(epoch), Some(want), "epoch {epoch}");
        }
        assert_eq!(cfg.level_for_epoch(70), None);
        // Non-progressive modes sit on the final level for their whole run.
        let e2e = TrainConfig::end_to_end();
        assert_eq!(e2e.level_for_epoch(0), Some(Level::Final));
        assert_eq!(e2e.level_for_epoch(39), Some(Level::Final));
        assert_eq!(e2e.level_for_epoch(40), None);
    }

    #[test]
    fn checkpoint_meta_reads_the_header_without_the_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.ckpt");
        let cfg = micro_config();
        let mut net = TucanNet::new(cfg.clone(), 3).unwrap();
        net.attach_temp_head(Level::Up(2), 9);
        let state = RunState {
            epoch_done: 23,
            level: Level::Up(2),
            bin_weights: vec![1.0; cfg.q],
        };
        save_checkpoint(&path, &mut net, &Adam::new(), &state).unwrap();

        let meta = read_checkpoint_meta(&path).unwrap();
        assert_eq!(meta.version, CHECKPOINT_VERSION);
        assert_eq!(meta.net_fingerprint, cfg.fingerprint());
        assert_eq!(meta.bins_fingerprint, BinTable::canonical().fingerprint());
        assert_eq!(meta.epoch_done, 23);
        assert_eq!(meta.level, Level::Up(2));

        let bogus = dir.path().join("bogus.ckpt");
        std::fs::write(&bogus, b"PNG\x00not really").unwrap();
        match read_checkpoint_meta(&bogus) {
            Err(TrainError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {:?}", other.map(|m| m.epoch_done)),
        }
    }
}
