//! Run configuration: presets, TOML loading, validation and digest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cgm::FusionVariant;
use crate::data::DatasetSpec;
use crate::error::{CcpeError, Result};
use crate::metrics::ThresholdRule;

/// Attention heads used throughout; the model width must be a multiple.
pub const HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `d` of visual and text features.
    pub dim: usize,
    /// Number of learnable queries `M`.
    pub num_queries: usize,
    pub depth: usize,
    /// Fusion width `n`.
    pub fusion_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 512,
            num_queries: 8,
            depth: 1,
            fusion_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which parts of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Caption prompts.
    pub icpg: bool,
    /// Query prompts.
    pub lcpg: bool,
    /// Gated language fusion (and the circulant fusion variant).
    pub cgm: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components::FULL
    }
}

impl Components {
    pub const FULL: Components = Components {
        icpg: true,
        lcpg: true,
        cgm: true,
    };

    pub fn both_branches(&self) -> bool {
        self.icpg && self.lcpg
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.icpg, "ICPG"), (self.lcpg, "LCPG"), (self.cgm, "CGM")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for Components {
    type Err = CcpeError;

    /// Parses `ICPG+LCPG+CGM`-style lists, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = Components {
            icpg: false,
            lcpg: false,
            cgm: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "icpg" => c.icpg = true,
                "lcpg" => c.lcpg = true,
                "cgm" => c.cgm = true,
                other => return Err(CcpeError::Config(format!("unknown component `{other}`"))),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

impl FromStr for Preset {
    type Err = CcpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(CcpeError::Config(format!("unknown preset `{other}` (expected paper or toy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub fusion: FusionVariant,
    pub threshold: ThresholdRule,
    pub caption_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub components: Components,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub dataset: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 32,
            steps: 2000,
            fusion: FusionVariant::Cgm,
            threshold: ThresholdRule::Eer,
            caption_file: None,
            output_dir: PathBuf::from("runs"),
            components: Components::FULL,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    /// Full-width model with the published learning rate.
    pub fn paper() -> Self {
        RunConfig::default()
    }

    /// Reduced widths and a larger learning rate for single-core runs.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig {
                dim: 32,
                num_queries: 8,
                depth: 1,
                fusion_dim: 16,
            },
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => RunConfig::paper(),
            Preset::Toy => RunConfig::toy(),
        }
    }

    /// Parses TOML. An optional top-level `preset` key picks the base
    /// configuration that the remaining keys override.
    pub fn from_toml_str(text: &str, default_preset: Preset) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| CcpeError::Config(e.to_string()))?;
        let preset = match table.remove("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(CcpeError::Config(format!("preset must be a string, got {other}"))),
            None => default_preset,
        };
        let base = toml::Table::try_from(RunConfig::preset(preset))
            .map_err(|e| CcpeError::Internal(format!("serializing preset: {e}")))?;
        let merged = merge_tables(base, table);
        let config: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CcpeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, default_preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CcpeError::io(path, e))?;
        RunConfig::from_toml_str(&text, default_preset)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(CcpeError::Config(msg));
        let m = &self.model;
        if m.dim == 0 || m.dim % HEADS != 0 {
            return cfg(format!("model dim {} must be a positive multiple of {HEADS}", m.dim));
        }
        if m.num_queries < 1 {
            return cfg("num_queries must be at least 1".into());
        }
        if m.depth < 1 {
            return cfg("depth must be at least 1".into());
        }
        if m.fusion_dim < 2 {
            return cfg(format!("fusion_dim must be at least 2, got {}", m.fusion_dim));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return cfg(format!("learning rate must be finite and ≥ 0, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return cfg(format!("Adam betas must lie in [0, 1), got {} and {}", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) {
            return cfg(format!("Adam eps must be positive, got {}", o.eps));
        }
        let c = &self.components;
        if !c.icpg && !c.lcpg {
            return cfg("at least one prompt branch (ICPG or LCPG) must be enabled".into());
        }
        if !c.cgm && self.fusion == FusionVariant::Cgm {
            return cfg("fusion variant `cgm` requires the CGM component".into());
        }
        if let ThresholdRule::Fixed(t) = self.threshold {
            if !t.is_finite() {
                return cfg(format!("fixed threshold must be finite, got {t}"));
            }
        }
        self.dataset.validate()
    }

    /// SHA-256 over the canonical TOML form, excluding output locations.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml_string().as_bytes()))
    }
}

fn merge_tables(mut base: toml::Table, overrides: toml::Table) -> toml::Table {
    for (key, value) in overrides {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge_tables(b, o)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
