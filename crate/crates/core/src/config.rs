//! Experiment configuration: a flat `key = value` text format with CLI
//! overrides, shared by config files and run manifests.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use crate::data::SynthSpec;
use crate::stcm::Depth;

/// Which parts of the network a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Memory and attention branches as designed.
    Full,
    /// Attention weights pinned to one.
    NoAttention,
    /// Raw coordinate planes straight into the convolutional stack.
    StcmOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no_attention",
            Variant::StcmOnly => "stcm_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "no_attention" => Some(Variant::NoAttention),
            "stcm_only" => Some(Variant::StcmOnly),
            _ => None,
        }
    }
}

/// Resolved settings of one run. Defaults mirror the reference recipe:
/// 50×50 grid, 64 BiGRU units, ratio 16, SGD at lr 0.1 with momentum 0.9
/// and no weight decay, 100 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub t: usize,
    pub n: usize,
    pub k: usize,
    pub alpha: usize,
    pub depth: Depth,
    pub variant: Variant,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub shortcuts: bool,
    pub attention_bias: bool,
    /// `synthetic` for the built-in generated corpus, otherwise a corpus
    /// directory path.
    pub data: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            t: 50,
            n: 50,
            k: 64,
            alpha: 16,
            depth: Depth::Mans9,
            variant: Variant::Full,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 100,
            seed: 1,
            num_classes: 4,
            shortcuts: true,
            attention_bias: true,
            data: "synthetic".into(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "t",
    "n",
    "k",
    "alpha",
    "depth",
    "variant",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "num_classes",
    "shortcuts",
    "attention_bias",
    "data",
];

#[derive(Debug)]
pub enum ConfigError {
    Io(io::Error),
    Syntax { line: usize, message: String },
    UnknownKey { key: String },
    BadValue { key: String, value: String, expected: &'static str },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "config i/o error: {e}"),
            Self::Syntax { line, message } => {
                write!(f, "config syntax error at line {line}: {message}")
            }
            Self::UnknownKey { key } => write!(
                f,
                "unknown config key '{key}' (valid keys: {})",
                CONFIG_KEYS.join(", ")
            ),
            Self::BadValue { key, value, expected } => {
                write!(f, "bad value '{value}' for '{key}' (expected {expected})")
            }
            Self::Invalid(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<io::Error> for ConfigError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// Splits flat `key = value` text into (line, key, value) entries. `#`
/// starts a comment, blank lines are skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        entries.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(
            key: &str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                expected,
            })
        }
        match key {
            "t" => self.t = num(key, value, "positive integer")?,
            "n" => self.n = num(key, value, "positive integer")?,
            "k" => self.k = num(key, value, "positive integer")?,
            "alpha" => self.alpha = num(key, value, "positive integer")?,
            "depth" => {
                self.depth = Depth::parse(value).ok_or(ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "mans9 | mans33 | mans61 | mans9-reduced",
                })?
            }
            "variant" => {
                self.variant = Variant::parse(value).ok_or(ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "full | no_attention | stcm_only",
                })?
            }
            "lr" => self.lr = num(key, value, "float")?,
            "momentum" => self.momentum = num(key, value, "float")?,
            "weight_decay" => self.weight_decay = num(key, value, "float")?,
            "batch_size" => self.batch_size = num(key, value, "positive integer")?,
            "epochs" => self.epochs = num(key, value, "positive integer")?,
            "seed" => self.seed = num(key, value, "u64")?,
            "num_classes" => self.num_classes = num(key, value, "positive integer")?,
            "shortcuts" => self.shortcuts = num(key, value, "true | false")?,
            "attention_bias" => self.attention_bias = num(key, value, "true | false")?,
            "data" => self.data = value.to_string(),
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (_, key, value) in parse_flat(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` command-line overrides on top of the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or(ConfigError::Syntax {
                line: 0,
                message: format!("override '{item}' is not key=value"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives = [
            ("t", self.t),
            ("n", self.n),
            ("k", self.k),
            ("alpha", self.alpha),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.alpha > self.t {
            return Err(ConfigError::Invalid(format!(
                "alpha ({}) must not exceed t ({})",
                self.alpha, self.t
            )));
        }
        if !(self.lr.is_finite() && self.momentum.is_finite() && self.weight_decay.is_finite()) {
            return Err(ConfigError::Invalid("optimizer settings must be finite".into()));
        }
        Ok(())
    }

    /// Canonical flat rendering: parsing it back reproduces the config.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match *key {
                "t" => self.t.to_string(),
                "n" => self.n.to_string(),
                "k" => self.k.to_string(),
                "alpha" => self.alpha.to_string(),
                "depth" => self.depth.name().to_string(),
                "variant" => self.variant.name().to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "seed" => self.seed.to_string(),
                "num_classes" => self.num_classes.to_string(),
                "shortcuts" => self.shortcuts.to_string(),
                "attention_bias" => self.attention_bias.to_string(),
                "data" => self.data.clone(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// Parses a synthetic-corpus spec file (same flat format).
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec, ConfigError> {
    let mut spec = SynthSpec::default();
    for (line, key, value) in parse_flat(text)? {
        let bad = |expected: &'static str| ConfigError::BadValue {
            key: key.clone(),
            value: value.clone(),
            expected,
        };
        match key.as_str() {
            "num_classes" => spec.num_classes = value.parse().map_err(|_| bad("integer"))?,
            "samples_per_class" => {
                spec.samples_per_class = value.parse().map_err(|_| bad("integer"))?
            }
            "frames_min" => spec.frames_min = value.parse().map_err(|_| bad("integer"))?,
            "frames_max" => spec.frames_max = value.parse().map_err(|_| bad("integer"))?,
            "joints" => spec.joints = value.parse().map_err(|_| bad("integer"))?,
            "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad("float"))?,
            "speed_warp" => spec.speed_warp = value.parse().map_err(|_| bad("float"))?,
            "rotation_jitter" => {
                spec.rotation_jitter = value.parse().map_err(|_| bad("float"))?
            }
            "freq_base" => spec.freq_base = value.parse().map_err(|_| bad("float"))?,
            "freq_step" => spec.freq_step = value.parse().map_err(|_| bad("float"))?,
            "seed" => spec.seed = value.parse().map_err(|_| bad("u64"))?,
            _ => {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("unknown synth spec key '{key}'"),
                })
            }
        }
    }
    spec.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(spec)
}
