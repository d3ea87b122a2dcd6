//! Training configuration: a flat TOML document plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::DEFAULT_COLOR_STEP;
use crate::losses::CycleMode;
use crate::networks::{DiscriminatorSpec, GeneratorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hr_size: usize,
    pub lr_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub num_scales: usize,
    pub blocks_per_scale: usize,
    pub bottleneck_blocks: usize,
    pub disc_base_channels: usize,
    pub disc_max_channels: usize,
    pub spectral_norm: bool,

    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_cyc: f64,
    pub rec_weight: f64,
    pub r1_gamma: f64,
    /// Color resolution `r` of the difference map.
    pub color_step: f64,
    /// Radius of the LR neighbourhood counted as a hit in reports.
    pub epsilon: f64,
    pub generator_adv: bool,
    pub cycle_mode: CycleMode,

    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub sample_interval: u64,

    /// Image folder; when absent a synthetic dataset is generated.
    pub dataset_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorSpec::default();
        let d = DiscriminatorSpec::default();
        TrainConfig {
            hr_size: g.hr_size,
            lr_size: g.lr_size,
            base_channels: g.base_channels,
            max_channels: g.max_channels,
            num_scales: g.num_scales,
            blocks_per_scale: g.blocks_per_scale,
            bottleneck_blocks: g.bottleneck_blocks,
            disc_base_channels: d.base_channels,
            disc_max_channels: d.max_channels,
            spectral_norm: true,
            batch_size: 8,
            lr_g: 1e-3,
            lr_d: 4e-3,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            lambda_cyc: 1.0,
            rec_weight: 1.0,
            r1_gamma: 0.5,
            color_step: DEFAULT_COLOR_STEP,
            epsilon: 0.0,
            generator_adv: true,
            cycle_mode: CycleMode::Paired,
            max_steps: 20_000,
            seed: 0,
            checkpoint_interval: 1000,
            log_interval: 100,
            sample_interval: 1000,
            dataset_dir: None,
            synthetic_count: 500,
            synthetic_seed: 0,
            val_fraction: crate::data::DEFAULT_VAL_FRACTION,
        }
    }
}

impl TrainConfig {
    /// The 64x64 / LR 4x4 synthetic profile.
    pub fn toy() -> Self {
        TrainConfig {
            hr_size: 64,
            lr_size: 4,
            base_channels: 32,
            max_channels: 256,
            num_scales: 4,
            disc_base_channels: 32,
            disc_max_channels: 256,
            ..TrainConfig::default()
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            hr_size: self.hr_size,
            lr_size: self.lr_size,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            num_scales: self.num_scales,
            blocks_per_scale: self.blocks_per_scale,
            bottleneck_blocks: self.bottleneck_blocks,
            spectral_norm: self.spectral_norm,
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            hr_size: self.hr_size,
            lr_size: self.lr_size,
            base_channels: self.disc_base_channels,
            max_channels: self.disc_max_channels,
            spectral_norm: self.spectral_norm,
        }
    }

    pub fn downscale_factor(&self) -> usize {
        self.hr_size / self.lr_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::field("batch_size", "must be at least 2"));
        }
        let positive = [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
            ("color_step", self.color_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::field(name, "must be positive"));
            }
        }
        if self.lr_d < self.lr_g {
            return Err(Error::field("lr_d", "must be at least lr_g (two time-scale rule)"));
        }
        let non_negative = [
            ("lambda_cyc", self.lambda_cyc),
            ("rec_weight", self.rec_weight),
            ("r1_gamma", self.r1_gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::field(name, "must be non-negative"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::field(name, "must lie in [0, 1)"));
            }
        }
        for (name, v) in [
            ("checkpoint_interval", self.checkpoint_interval),
            ("log_interval", self.log_interval),
            ("sample_interval", self.sample_interval),
        ] {
            if v == 0 {
                return Err(Error::field(name, "must be positive"));
            }
        }
        // TOML integers are signed 64-bit
        for (name, v) in [("seed", self.seed), ("synthetic_seed", self.synthetic_seed)] {
            if v > i64::MAX as u64 {
                return Err(Error::field(name, "must fit in a signed 64-bit integer"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::field("val_fraction", "must lie in [0, 1)"));
        }
        if self.dataset_dir.is_none() && self.synthetic_count < 2 {
            return Err(Error::field("synthetic_count", "need at least 2 images"));
        }
        self.generator_spec().validate()?;
        self.discriminator_spec().validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides. Values are parsed as TOML literals and
    /// fall back to strings; keys must name existing fields.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut current = &mut table;
            let mut parts = key.split('.').peekable();
            while let Some(part) = parts.next() {
                if parts.peek().is_none() {
                    current.insert(part.to_string(), value.clone());
                } else {
                    current = current
                        .entry(part.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                        .as_table_mut()
                        .ok_or_else(|| Error::field(key, "is not a table"))?;
                }
            }
        }
        let out: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(out)
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
