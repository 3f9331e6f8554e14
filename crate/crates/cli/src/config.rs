//! Run configuration: a sectioned key=value file plus `--set` overrides.
//!
//! The full schema (defaults in parentheses):
//!
//! ```text
//! [net]
//! arch = canonical | toy     network scale (canonical)
//! q = <int>                  palette size (313)
//! seed = <int>               weight initialization seed (7)
//!
//! [train]
//! scheme = end_to_end | progressive | finetune   (end_to_end)
//! epochs = <int>             end_to_end/finetune only; progressive derives
//!                            its length from rho and xi (40 / 35)
//! batch_size = <int>         (32)
//! lr = <float>               base Adam rate for end_to_end/progressive (2e-3)
//! rho = <int>                epochs per grown level (10)
//! xi = <int>                 epochs of final polishing (20)
//! conv_lr = <float>          finetune rate for convolutional stages (2e-4)
//! caps_lr = <float>          finetune rate for capsule stages (2e-3)
//! seed = <int>               shuffle seed (1)
//!
//! [data]
//! root = <path>              dataset directory; falls back to the
//!                            TUCAN_DATA_ROOT environment variable
//!
//! [eval]
//! lpips = <command>          external perceptual scorer invoked with two
//!                            image paths appended (unset: metric omitted)
//! ```
//!
//! Unknown sections or keys are rejected, naming the first offender; so are
//! unparseable values. `--set section.key=value` overrides the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use tucan_core::trainer::{TrainConfig, TrainMode};
use tucan_core::NetworkConfig;

/// A configuration problem; the message starts with the offending key.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Canonical,
    Toy,
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "canonical" => Ok(Arch::Canonical),
            "toy" => Ok(Arch::Toy),
            other => Err(format!("unknown arch {other:?} (expected canonical or toy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EndToEnd,
    Progressive,
    Finetune,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::EndToEnd => "end_to_end",
            Scheme::Progressive => "progressive",
            Scheme::Finetune => "finetune",
        }
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "end_to_end" => Ok(Scheme::EndToEnd),
            "progressive" => Ok(Scheme::Progressive),
            "finetune" => Ok(Scheme::Finetune),
            other => Err(format!(
                "unknown scheme {other:?} (expected end_to_end, progressive, or finetune)"
            )),
        }
    }
}

/// Everything the commands read, resolved to typed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub arch: Arch,
    pub q: usize,
    pub net_seed: u64,
    pub scheme: Scheme,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: usize,
    pub xi: usize,
    pub conv_lr: f64,
    pub caps_lr: f64,
    pub train_seed: u64,
    pub data_root: Option<PathBuf>,
    pub lpips: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            arch: Arch::Canonical,
            q: 313,
            net_seed: 7,
            scheme: Scheme::EndToEnd,
            epochs: None,
            batch_size: 32,
            lr: 2e-3,
            rho: 10,
            xi: 20,
            conv_lr: 2e-4,
            caps_lr: 2e-3,
            train_seed: 1,
            data_root: None,
            lpips: None,
        }
    }
}

fn bad(key: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{key}: {why}"))
}

impl Settings {
    /// Read a config file (optional) and apply `--set` overrides in order.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Settings, ConfigError> {
        let mut s = Settings::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            s.apply_file(&text)?;
        }
        for item in sets {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| bad(item, "--set expects section.key=value"))?;
            let (section, name) = key
                .split_once('.')
                .ok_or_else(|| bad(key, "--set expects section.key=value"))?;
            s.apply(section, name, value.trim())?;
        }
        Ok(s)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "net" | "train" | "data" | "eval") {
                    return Err(bad(&section, "unknown section"));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", idx + 1)))?;
            if section.is_empty() {
                return Err(bad(key.trim(), "key appears before any [section]"));
            }
            self.apply(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let full = format!("{section}.{key}");
        fn num<T: FromStr>(full: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| bad(full, format!("invalid value {v:?}: {e}")))
        }
        match (section, key) {
            ("net", "arch") => self.arch = value.parse().map_err(|e| bad(&full, e))?,
            ("net", "q") => self.q = num(&full, value)?,
            ("net", "seed") => self.net_seed = num(&full, value)?,
            ("train", "scheme") => self.scheme = value.parse().map_err(|e| bad(&full, e))?,
            ("train", "epochs") => self.epochs = Some(num(&full, value)?),
            ("train", "batch_size") => self.batch_size = num(&full, value)?,
            ("train", "lr") => self.lr = num(&full, value)?,
            ("train", "rho") => self.rho = num(&full, value)?,
            ("train", "xi") => self.xi = num(&full, value)?,
            ("train", "conv_lr") => self.conv_lr = num(&full, value)?,
            ("train", "caps_lr") => self.caps_lr = num(&full, value)?,
            ("train", "seed") => self.train_seed = num(&full, value)?,
            ("data", "root") => self.data_root = Some(PathBuf::from(value)),
            ("eval", "lpips") => self.lpips = Some(value.to_string()),
            ("net" | "train" | "data" | "eval", _) => {
                return Err(bad(&full, "unknown key"));
            }
            _ => return Err(bad(section, "unknown section")),
        }
        if self.batch_size == 0 {
            return Err(bad("train.batch_size", "must be at least 1"));
        }
        if self.q == 0 {
            return Err(bad("net.q", "must be at least 1"));
        }
        Ok(())
    }

    /// The architecture these settings describe.
    pub fn network_config(&self) -> NetworkConfig {
        match self.arch {
            Arch::Canonical => NetworkConfig::canonical(self.q),
            Arch::Toy => NetworkConfig::toy(self.q),
        }
    }

    /// The training schedule, with scheme-specific epoch defaults.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let mode = match self.scheme {
            Scheme::EndToEnd => TrainMode::EndToEnd,
            Scheme::Progressive => TrainMode::Progressive { rho: self.rho, xi: self.xi },
            Scheme::Finetune => {
                TrainMode::Finetune { conv_lr: self.conv_lr, caps_lr: self.caps_lr }
            }
        };
        let epochs = match (self.scheme, self.epochs) {
            (Scheme::Progressive, Some(_)) => {
                return Err(bad(
                    "train.epochs",
                    "progressive length is derived from rho and xi; unset it",
                ));
            }
            (Scheme::Progressive, None) => 0, // derived by the phase list
            (Scheme::EndToEnd, e) => e.unwrap_or(40),
            (Scheme::Finetune, e) => e.unwrap_or(35),
        };
        Ok(TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.train_seed,
            mode,
        })
    }

    /// Dataset root: the config value, else `TUCAN_DATA_ROOT`.
    pub fn resolve_data_root(&self) -> Result<PathBuf, ConfigError> {
        self.data_root_from(std::env::var_os("TUCAN_DATA_ROOT"))
    }

    fn data_root_from(&self, env: Option<std::ffi::OsString>) -> Result<PathBuf, ConfigError> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        if let Some(v) = env {
            if !v.is_empty() {
                return Ok(PathBuf::from(v));
            }
        }
        Err(bad("data.root", "not set, and TUCAN_DATA_ROOT is not in the environment"))
    }

    /// Force both seeds from the `--seed` flag.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.net_seed = seed;
            self.train_seed = seed;
        }
    }

    /// Force the scheme from the `--scheme` flag.
    pub fn override_scheme(&mut self, scheme: Option<&str>) -> Result<(), ConfigError> {
        if let Some(s) = scheme {
            self.scheme = s.parse().map_err(|e| bad("--scheme", e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
# comment
[net]
arch = toy
q = 41
seed = 12

[train]
scheme = progressive
batch_size = 8
lr = 0.001
rho = 2
xi = 3
seed = 5

[data]
root = /tmp/pics

[eval]
lpips = python3 scorer.py --net vgg
";

    #[test]
    fn a_full_file_parses_into_typed_settings() {
        let s = Settings::load(None, &[]).unwrap();
        assert_eq!(s, Settings::default());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, FULL).unwrap();
        let s = Settings::load(Some(&path), &[]).unwrap();
        assert_eq!(s.arch, Arch::Toy);
        assert_eq!(s.q, 41);
        assert_eq!(s.net_seed, 12);
        assert_eq!(s.scheme, Scheme::Progressive);
        assert_eq!(s.batch_size, 8);
        assert_eq!(s.lr, 0.001);
        assert_eq!((s.rho, s.xi), (2, 3));
        assert_eq!(s.train_seed, 5);
        assert_eq!(s.data_root.as_deref(), Some(Path::new("/tmp/pics")));
        assert_eq!(s.lpips.as_deref(), Some("python3 scorer.py --net vgg"));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");

        std::fs::write(&path, "[net]\ncolour = blue\n").unwrap();
        let err = Settings::load(Some(&path), &[]).unwrap_err();
        assert!(err.0.starts_with("net.colour"), "{err}");

        std::fs::write(&path, "[serving]\nport = 80\n").unwrap();
        let err = Settings::load(Some(&path), &[]).unwrap_err();
        assert!(err.0.starts_with("serving"), "{err}");

        std::fs::write(&path, "arch = toy\n").unwrap();
        let err = Settings::load(Some(&path), &[]).unwrap_err();
        assert!(err.0.contains("before any"), "{err}");

        std::fs::write(&path, "[train]\nepochs = soon\n").unwrap();
        let err = Settings::load(Some(&path), &[]).unwrap_err();
        assert!(err.0.starts_with("train.epochs"), "{err}");
    }

    #[test]
    fn set_overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "[net]\narch = toy\nq = 41\n").unwrap();
        let s = Settings::load(
            Some(&path),
            &["net.q=17".to_string(), "train.batch_size=4".to_string()],
        )
        .unwrap();
        assert_eq!(s.q, 17);
        assert_eq!(s.batch_size, 4);
        assert_eq!(s.arch, Arch::Toy);

        let err = Settings::load(Some(&path), &["net.q".to_string()]).unwrap_err();
        assert!(err.0.contains("section.key=value"), "{err}");
        let err = Settings::load(Some(&path), &["speed=9".to_string()]).unwrap_err();
        assert!(err.0.contains("section.key=value"), "{err}");
    }

    #[test]
    fn scheme_defaults_match_the_published_schedules() {
        let mut s = Settings::default();
        let cfg = s.train_config().unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size), (40, 32));
        assert_eq!(cfg.mode, TrainMode::EndToEnd);

        s.scheme = Scheme::Progressive;
        let cfg = s.train_config().unwrap();
        assert_eq!(cfg.mode, TrainMode::Progressive { rho: 10, xi: 20 });
        assert_eq!(cfg.total_epochs(), 70);

        s.scheme = Scheme::Finetune;
        let cfg = s.train_config().unwrap();
        assert_eq!(cfg.epochs, 35);
        assert_eq!(cfg.mode, TrainMode::Finetune { conv_lr: 2e-4, caps_lr: 2e-3 });

        s.scheme = Scheme::Progressive;
        s.epochs = Some(9);
        let err = s.train_config().unwrap_err();
        assert!(err.0.starts_with("train.epochs"), "{err}");
    }

    #[test]
    fn the_data_root_falls_back_to_the_environment() {
        let mut s = Settings::default();
        s.data_root = Some(PathBuf::from("/a"));
        assert_eq!(
            s.data_root_from(Some("/b".into())).unwrap(),
            PathBuf::from("/a"),
            "config wins over the environment"
        );
        s.data_root = None;
        assert_eq!(s.data_root_from(Some("/b".into())).unwrap(), PathBuf::from("/b"));
        let err = s.data_root_from(None).unwrap_err();
        assert!(err.0.starts_with("data.root"), "{err}");
        let err = s.data_root_from(Some("".into())).unwrap_err();
        assert!(err.0.starts_with("data.root"), "{err}");
    }

    #[test]
    fn flag_overrides_apply_to_both_seeds_and_the_scheme() {
        let mut s = Settings::default();
        s.override_seed(Some(99));
        assert_eq!((s.net_seed, s.train_seed), (99, 99));
        s.override_scheme(Some("progressive")).unwrap();
        assert_eq!(s.scheme, Scheme::Progressive);
        let err = s.override_scheme(Some("warp")).unwrap_err();
        assert!(err.0.starts_with("--scheme"), "{err}");
    }
}
