use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prior::PriorMode;

/// Keys accepted in `key=value` configuration files.
pub const KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "d_c",
    "d_s",
    "k",
    "seed",
    "prior_mode",
    "checkpoint_path",
    "log_path",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub content_dim: usize,
    pub style_dim: usize,
    pub k: usize,
    pub seed: u64,
    pub prior_mode: PriorMode,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            content_dim: 10,
            style_dim: 10,
            k: 6,
            seed: 0,
            prior_mode: PriorMode::Ordinal,
            checkpoint_path: PathBuf::from("model.ckpt"),
            log_path: PathBuf::from("train_log.csv"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

impl TrainConfig {
    /// Set one field by its configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "d_c" => self.content_dim = parse(key, value)?,
            "d_s" => self.style_dim = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "prior_mode" => {
                self.prior_mode = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("prior_mode must be ordinal or iid, got {value:?}")))?
            }
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(value.trim()),
            "log_path" => self.log_path = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_c", self.content_dim),
            ("d_s", self.style_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < self.k {
            return Err(Error::Config(format!(
                "batch_size {} smaller than k = {}",
                self.batch_size, self.k
            )));
        }
        Ok(())
    }

    /// The fields that determine training results, as `key=value` lines.
    /// Output paths are left out so that runs differing only in where they
    /// write produce identical checkpoints.
    pub fn model_echo(&self) -> String {
        let mut s = String::new();
        for (key, value) in [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("d_c", self.content_dim.to_string()),
            ("d_s", self.style_dim.to_string()),
            ("k", self.k.to_string()),
            ("seed", self.seed.to_string()),
            ("prior_mode", self.prior_mode.to_string()),
        ] {
            writeln!(s, "{key}={value}").expect("string write");
        }
        s
    }
}
