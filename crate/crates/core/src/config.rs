//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::relation::RlLossForm;
use crate::stae::StaeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key} = {value}: {detail}")]
    Value { key: String, value: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub resolution: usize,
    pub k: usize,
    pub channels: [usize; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_grd: f64,
    pub lambda_mot: f64,
    pub lambda_rl: f64,
    pub rl_loss_form: RlLossForm,
    /// Divide masked object pooling by the full map area.
    pub literal_gap: bool,
    /// Aggregate test-time plausibility by masked sum instead of mean.
    pub plausibility_sum: bool,
    /// Pool negative clips over the whole map instead of under the mask.
    pub negative_global_pool: bool,
    pub seed: u64,
    /// Mean-filter window for the fused score.
    pub smoothing: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Keep extracted region masks in memory across epochs.
    pub cache_masks: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            resolution: 64,
            k: 4,
            channels: [16, 32, 64],
            lr: 1e-5,
            batch_size: 4,
            epochs: 50,
            lambda_grd: 1.0,
            lambda_mot: 1.0,
            lambda_rl: 0.5,
            rl_loss_form: RlLossForm::Literal,
            literal_gap: false,
            plausibility_sum: false,
            negative_global_pool: false,
            seed: 7,
            smoothing: 15,
            checkpoint_every: 0,
            cache_masks: false,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "resolution",
    "k",
    "channels",
    "d",
    "lr",
    "batch_size",
    "epochs",
    "lambda_grd",
    "lambda_mot",
    "lambda_rl",
    "rl_loss_form",
    "literal_gap",
    "plausibility_sum",
    "negative_global_pool",
    "seed",
    "smoothing",
    "checkpoint_every",
    "cache_masks",
    "stae_only",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        detail: e.to_string(),
    })
}

impl Config {
    pub fn stae(&self) -> StaeConfig {
        StaeConfig {
            k: self.k,
            channels: self.channels,
        }
    }

    pub fn depth(&self) -> usize {
        self.channels[2]
    }

    /// Bottleneck extent.
    pub fn feature_size(&self) -> usize {
        self.resolution / 8
    }

    /// Set one key from its text form. `d` is the last channel width;
    /// `stae_only = true` is shorthand for `lambda_rl = 0`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "resolution" => self.resolution = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        detail: "expected three comma-separated widths".into(),
                    });
                }
                for (slot, p) in self.channels.iter_mut().zip(parts) {
                    *slot = parse(key, p)?;
                }
            }
            "d" => self.channels[2] = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda_grd" => self.lambda_grd = parse(key, value)?,
            "lambda_mot" => self.lambda_mot = parse(key, value)?,
            "lambda_rl" => self.lambda_rl = parse(key, value)?,
            "rl_loss_form" => self.rl_loss_form = parse(key, value)?,
            "literal_gap" => self.literal_gap = parse(key, value)?,
            "plausibility_sum" => self.plausibility_sum = parse(key, value)?,
            "negative_global_pool" => self.negative_global_pool = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "smoothing" => self.smoothing = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "cache_masks" => self.cache_masks = parse(key, value)?,
            "stae_only" => {
                if parse::<bool>(key, value)? {
                    self.lambda_rl = 0.0;
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return fail(format!("resolution {} is not a positive multiple of 8", self.resolution));
        }
        if self.k < 2 {
            return fail(format!("k = {} is below 2", self.k));
        }
        if self.channels.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr = {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [("lambda_grd", self.lambda_grd), ("lambda_mot", self.lambda_mot), ("lambda_rl", self.lambda_rl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} = {v} must be non-negative"));
            }
        }
        if self.smoothing % 2 == 0 {
            return fail(format!("smoothing window {} must be odd", self.smoothing));
        }
        Ok(())
    }

    /// Text form that [`Config::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c0, c1, c2] = self.channels;
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "channels = {c0},{c1},{c2}");
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lambda_grd = {:?}", self.lambda_grd);
        let _ = writeln!(s, "lambda_mot = {:?}", self.lambda_mot);
        let _ = writeln!(s, "lambda_rl = {:?}", self.lambda_rl);
        let _ = writeln!(s, "rl_loss_form = {}", self.rl_loss_form);
        let _ = writeln!(s, "literal_gap = {}", self.literal_gap);
        let _ = writeln!(s, "plausibility_sum = {}", self.plausibility_sum);
        let _ = writeln!(s, "negative_global_pool = {}", self.negative_global_pool);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "smoothing = {}", self.smoothing);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "cache_masks = {}", self.cache_masks);
        s
    }
}
