use crate::arch::NetworkConfig;
use crate::data::WindowSpec;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once an epoch's mean loss drops below this.
    pub early_stop_loss: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub window: WindowSpec,
    pub net: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 1,
            max_epochs: 500,
            early_stop_loss: 5e-4,
            loss: LossKind::Dice,
            seed: 0,
            window: WindowSpec::default(),
            net: NetworkConfig::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: [&str; 13] = [
    "lr",
    "batch_size",
    "max_epochs",
    "early_stop_loss",
    "loss",
    "seed",
    "wl",
    "ww",
    "levels",
    "base_channels",
    "encoder",
    "decoder",
    "attention",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.early_stop_loss > 0.0) {
            return Err(Error::Config(format!(
                "early_stop_loss must be positive, got {}",
                self.early_stop_loss
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.window.validate()?;
        self.net.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "early_stop_loss" => self.early_stop_loss = parse(key, value)?,
            "loss" => self.loss = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "wl" => self.window.wl = parse(key, value)?,
            "ww" => self.window.ww = parse(key, value)?,
            "levels" => self.net.levels = parse(key, value)?,
            "base_channels" => self.net.base_channels = parse(key, value)?,
            "encoder" => self.net.encoder = value.parse()?,
            "decoder" => self.net.decoder = value.parse()?,
            "attention" => self.net.attention = value.parse()?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}', expected one of: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and
    /// `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    i + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let pairs: [(&str, String); 13] = [
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("early_stop_loss", self.early_stop_loss.to_string()),
            ("loss", self.loss.to_string()),
            ("seed", self.seed.to_string()),
            ("wl", self.window.wl.to_string()),
            ("ww", self.window.ww.to_string()),
            ("levels", self.net.levels.to_string()),
            ("base_channels", self.net.base_channels.to_string()),
            ("encoder", self.net.encoder.to_string()),
            ("decoder", self.net.decoder.to_string()),
            ("attention", self.net.attention.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
