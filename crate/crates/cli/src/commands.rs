//! The five subcommands, kept free of process-exit concerns.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array4, Axis};

use tucan_core::colorspace::{lab_to_rgb, rgb_to_lab, LabImage};
use tucan_core::datapipe::{prepare_from_rgb, scan_dataset, DataError, Sample};
use tucan_core::evalkit::{
    self, named_samples, CommandLpips, EvalError, EvalReport, LpipsPlugin,
};
use tucan_core::net::NetConfigError;
use tucan_core::nn::{param_count, BilinearResize};
use tucan_core::trainer::{
    load_checkpoint, read_checkpoint_meta, write_run_manifest, TrainError, Trainer,
};
use tucan_core::{Level, TucanNet};

use crate::config::{ConfigError, Scheme, Settings};

/// Command failure, split by contract: config problems exit 2, broken or
/// unreadable artifacts (checkpoints, images, datasets) exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Artifact(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Artifact(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<NetConfigError> for CliError {
    fn from(e: NetConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(inner) => CliError::Config(inner.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}

/// Attach the checkpoint path to artifact failures, so a typo'd path names
/// itself instead of surfacing as a bare i/o error.
fn named_checkpoint_error(path: &Path, e: TrainError) -> CliError {
    match CliError::from(e) {
        CliError::Artifact(m) => {
            CliError::Artifact(format!("checkpoint {}: {m}", path.display()))
        }
        other => other,
    }
}

/// Name of the checkpoint a training run keeps rewriting.
pub const CHECKPOINT_FILE: &str = "tucan.ckpt";
/// Name of the manifest describing a run's full configuration.
pub const MANIFEST_FILE: &str = "run_manifest.txt";
/// Name of the written evaluation report.
pub const REPORT_FILE: &str = "eval_report.txt";

fn require_canonical_palette(settings: &Settings) -> Result<(), CliError> {
    let canonical = tucan_core::BinTable::canonical().q();
    if settings.q != canonical {
        return Err(CliError::Config(format!(
            "net.q: training targets are encoded over the canonical {canonical}-bin palette; \
             set q = {canonical} (got {})",
            settings.q
        )));
    }
    Ok(())
}

fn load_dataset(settings: &Settings) -> Result<(PathBuf, Vec<PathBuf>, Vec<Sample>), CliError> {
    let root = settings.resolve_data_root()?;
    let paths = scan_dataset(&root)?;
    let size = settings.network_config().input_size;
    let mut samples = Vec::with_capacity(paths.len());
    for p in &paths {
        samples.push(tucan_core::datapipe::prepare_sample(p, size)?);
    }
    Ok((root, paths, samples))
}

fn manifest_entries(
    settings: &Settings,
    root: &Path,
    images: usize,
    extra: &[(String, String)],
) -> Vec<(String, String)> {
    let cfg = settings.train_config().expect("validated by the caller");
    let mut rows: Vec<(String, String)> = vec![
        ("scheme".into(), settings.scheme.label().into()),
        (
            "arch".into(),
            match settings.arch {
                crate::config::Arch::Canonical => "canonical".into(),
                crate::config::Arch::Toy => "toy".into(),
            },
        ),
        ("q".into(), settings.q.to_string()),
        ("input_size".into(), settings.network_config().input_size.to_string()),
        ("epochs".into(), cfg.total_epochs().to_string()),
        ("batch_size".into(), settings.batch_size.to_string()),
    ];
    match settings.scheme {
        Scheme::Progressive => {
            rows.push(("rho".into(), settings.rho.to_string()));
            rows.push(("xi".into(), settings.xi.to_string()));
            rows.push(("lr".into(), settings.lr.to_string()));
        }
        Scheme::EndToEnd => rows.push(("lr".into(), settings.lr.to_string())),
        Scheme::Finetune => {
            rows.push(("conv_lr".into(), settings.conv_lr.to_string()));
            rows.push(("caps_lr".into(), settings.caps_lr.to_string()));
        }
    }
    rows.push(("net_seed".into(), settings.net_seed.to_string()));
    rows.push(("shuffle_seed".into(), settings.train_seed.to_string()));
    rows.push(("data_root".into(), root.display().to_string()));
    rows.push(("images".into(), images.to_string()));
    rows.extend(extra.iter().cloned());
    rows
}

fn run_trainer(mut trainer: Trainer, out: &Path) -> Result<(), CliError> {
    let ck = out.join(CHECKPOINT_FILE);
    let total = trainer.cfg.total_epochs();
    let stats = trainer.run(Some(&ck), |s| {
        println!(
            "epoch {}/{} level {} quant {:.4} color {:.4} total {:.4}",
            s.epoch + 1,
            total,
            s.level.label(),
            s.quant,
            s.color,
            s.total
        );
    })?;
    if let Some(last) = stats.last() {
        println!("done: final loss {:.4}, checkpoint {}", last.total, ck.display());
    } else {
        println!("done: nothing left to train, checkpoint {}", ck.display());
    }
    Ok(())
}

/// `train`: fit from scratch under the configured scheme.
pub fn cmd_train(settings: &Settings, out: &Path) -> Result<(), CliError> {
    if settings.scheme == Scheme::Finetune {
        return Err(CliError::Config(
            "train.scheme: finetune needs a starting checkpoint; use the finetune command".into(),
        ));
    }
    require_canonical_palette(settings)?;
    let train_cfg = settings.train_config()?;
    let net_cfg = settings.network_config();
    let net = TucanNet::new(net_cfg, settings.net_seed)?;
    let (root, paths, samples) = load_dataset(settings)?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(
        &out.join(MANIFEST_FILE),
        &manifest_entries(settings, &root, paths.len(), &[]),
    )?;
    println!(
        "training {} on {} images for {} epochs",
        settings.scheme.label(),
        samples.len(),
        train_cfg.total_epochs()
    );
    run_trainer(Trainer::new(net, train_cfg, samples), out)
}

/// `finetune`: resume a trained network under the two-rate schedule.
///
/// The optimizer restarts fresh and the class-rebalancing weights are
/// refitted on the finetune dataset, which may differ from the original one.
pub fn cmd_finetune(
    settings: &Settings,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let mut settings = settings.clone();
    settings.scheme = Scheme::Finetune;
    require_canonical_palette(&settings)?;
    let train_cfg = settings.train_config()?;
    let net_cfg = settings.network_config();
    let (net, _, state) =
        load_checkpoint(checkpoint, &net_cfg).map_err(|e| named_checkpoint_error(checkpoint, e))?;
    let (root, paths, samples) = load_dataset(&settings)?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(
        &out.join(MANIFEST_FILE),
        &manifest_entries(
            &settings,
            &root,
            paths.len(),
            &[
                ("finetuned_from".into(), checkpoint.display().to_string()),
                ("source_epochs".into(), state.epoch_done.to_string()),
            ],
        ),
    )?;
    println!(
        "finetuning from {} ({} epochs trained) on {} images",
        checkpoint.display(),
        state.epoch_done,
        samples.len()
    );
    run_trainer(Trainer::new(net, train_cfg, samples), out)
}

/// Colourise one image at its own resolution.
///
/// The network sees the lightness at its input size; the predicted chroma is
/// bilinearly upsampled back to the source resolution and recombined with the
/// original full-resolution lightness, so detail is never lost to the resize.
pub fn colorize_image(net: &mut TucanNet, img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let full = rgb_to_lab(img);
    let sample = prepare_from_rgb(img, net.cfg.input_size);
    let size = net.cfg.input_size;
    let mut input = Array4::zeros((1, 1, size, size));
    input.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(&sample.l_norm);
    let out = net.forward(&input, Level::Final, false);
    let ab_full = if (h, w) == (size, size) {
        out.ab_hat
    } else {
        BilinearResize::new(h, w).forward(&out.ab_hat, false)
    };
    let ab = ab_full.index_axis(Axis(0), 0);
    lab_to_rgb(&LabImage {
        l: full.l,
        a: ab.index_axis(Axis(0), 0).to_owned(),
        b: ab.index_axis(Axis(0), 1).to_owned(),
    })
}

/// `colorize`: recolour files, writing `<stem>_colorized.png` next to each
/// input (or into `--out`).
pub fn cmd_colorize(
    settings: &Settings,
    checkpoint: &Path,
    inputs: &[PathBuf],
    out: Option<&Path>,
) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Config("no input images given".into()));
    }
    let net_cfg = settings.network_config();
    let (mut net, _, _) =
        load_checkpoint(checkpoint, &net_cfg).map_err(|e| named_checkpoint_error(checkpoint, e))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    for path in inputs {
        let img = image::open(path)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let coloured = colorize_image(&mut net, &img);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        let stem = stem.unwrap_or_else(|| "image".into());
        let dir = match out {
            Some(dir) => dir.to_path_buf(),
            None => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        let target = dir.join(format!("{stem}_colorized.png"));
        coloured
            .save(&target)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", target.display())))?;
        println!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

/// Which model stands behind an evaluation run.
pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// Score the reference against itself (metric upper bound).
    PerfectStub,
    /// Score the zero-chroma image against the reference.
    GrayStub,
}

/// `evaluate`: score the model (or a stub) on a dataset and write the report.
pub fn cmd_evaluate(
    settings: &Settings,
    source: EvalSource<'_>,
    lpips_flag: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let root = settings.resolve_data_root()?;
    let paths = scan_dataset(&root)?;
    let size = settings.network_config().input_size;
    let named = named_samples(&paths, size)?;

    let command = lpips_flag.map(str::to_owned).or_else(|| settings.lpips.clone());
    let plugin: Option<CommandLpips> = match &command {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| CliError::Config("eval.lpips: empty command".into()))?;
            Some(CommandLpips::new(program, parts.collect()))
        }
        None => None,
    };
    let plugin_ref = plugin.as_ref().map(|p| p as &dyn LpipsPlugin);

    let report: EvalReport = match source {
        EvalSource::Checkpoint(ck) => {
            let (mut net, _, _) = load_checkpoint(ck, &settings.network_config())
                .map_err(|e| named_checkpoint_error(ck, e))?;
            evalkit::evaluate(&mut net, &named, plugin_ref)?
        }
        EvalSource::PerfectStub => {
            let pairs = named.iter().map(|(name, s)| {
                let reference = evalkit::reference_rgb(s);
                (name.clone(), reference.clone(), reference)
            });
            evalkit::evaluate_pairs(pairs, plugin_ref)?
        }
        EvalSource::GrayStub => {
            let pairs = named.iter().map(|(name, s)| {
                (name.clone(), evalkit::gray_rgb(s), evalkit::reference_rgb(s))
            });
            evalkit::evaluate_pairs(pairs, plugin_ref)?
        }
    };

    std::fs::create_dir_all(out)?;
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, report.serialize(plugin.as_ref().map(|p| p.name())))?;
    print!("{}", report.render());
    if plugin.is_none() {
        println!("lpips: n/a (no scorer configured)");
    }
    println!("report written to {}", report_path.display());
    Ok(())
}

/// `inspect --checkpoint`: print the header of a checkpoint.
pub fn cmd_inspect_checkpoint(path: &Path) -> Result<(), CliError> {
    let meta = read_checkpoint_meta(path).map_err(|e| named_checkpoint_error(path, e))?;
    println!("checkpoint: {}", path.display());
    println!("format_version: {}", meta.version);
    println!("epochs_done: {}", meta.epoch_done);
    println!("level: {}", meta.level.label());
    println!("network_fingerprint: {}", meta.net_fingerprint);
    println!("palette_fingerprint: {}", meta.bins_fingerprint);
    Ok(())
}

/// `inspect` (config form): run a probe forward pass and print what the
/// network actually did — the shape plan, every stage's output, and how
/// concentrated the routing ended up.
pub fn cmd_inspect_config(settings: &Settings) -> Result<(), CliError> {
    let cfg = settings.network_config();
    let mut net = TucanNet::new(cfg.clone(), settings.net_seed)?;
    println!("parameters: {}", param_count(&mut net));

    let plan = net.plan.clone();
    println!("trace: {:?}", plan.trace());
    print!("head resolutions:");
    for level in Level::schedule_order() {
        print!(" {}={}", level.label(), plan.level_size(level));
    }
    println!(" (chroma output {})", plan.chroma_out);

    let probe = probe_input(cfg.input_size);
    let (_, report) = net.inspect(&probe, Level::Final);
    println!("{}", report.plan_text.trim_end());
    println!("stages:");
    for (name, [c, h, w]) in &report.stage_shapes {
        println!("  {name:<10} {c:>4} x {h:>3} x {w:>3}");
    }
    println!(
        "routing: mean coupling entropy {:.4} nats, max coefficient {:.4}",
        report.coupling_mean_entropy, report.coupling_max
    );
    Ok(())
}

/// A deterministic, mildly structured probe image (diagonal ramp).
fn probe_input(size: usize) -> Array4<f64> {
    let plane =
        Array2::from_shape_fn((size, size), |(y, x)| (x + y) as f64 / (2 * size) as f64);
    let mut input = Array4::zeros((1, 1, size, size));
    input.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(&plane);
    input
}
