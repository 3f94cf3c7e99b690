//! Run configuration files (TOML).
//!
//! ```toml
//! [data]
//! dataset = "configs/ml-100k.toml"
//!
//! [split]
//! seed = 0
//!
//! [model]
//! preset = "dacona"
//! d_s = 10
//!
//! [training]
//! learning_rate = 1e-3
//!
//! [experiments]
//! repeats = 3
//!
//! [output]
//! dir = "runs/ml-100k"
//! ```
//!
//! Every key is optional. Command-line flags override file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_data_root, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{AdaptationInit, AdaptationMode, NetworkInit, ParamGroup};
use crate::reductions::HyperOverrides;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset descriptor file.
    pub dataset: Option<PathBuf>,
    /// Directory the descriptor's relative paths resolve against.
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: Option<f64>,
    pub val_frac_of_train: Option<f64>,
    pub seed: Option<u64>,
}

/// Preset and structural overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub d_c: Option<usize>,
    pub d_s: Option<usize>,
    pub d_c_adapted: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub use_activation: Option<bool>,
    pub adaptation_mode: Option<AdaptationMode>,
    pub network_init: Option<NetworkInit>,
    pub adaptation_init: Option<AdaptationInit>,
    pub frozen: Option<BTreeSet<ParamGroup>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsSection {
    pub repeats: Option<usize>,
    pub ds_values: Option<Vec<usize>>,
    pub presets: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// `[lo, hi]` range test predictions are clipped into.
    pub clamp: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub experiments: ExperimentsSection,
    #[serde(default)]
    pub output: OutputSection,
}

pub const DEFAULT_PRESET: &str = "dacona";
pub const DEFAULT_REPEATS: usize = 3;
pub const DEFAULT_DS_VALUES: [usize; 5] = [0, 5, 10, 15, 19];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(&self) -> &str {
        self.model.preset.as_deref().unwrap_or(DEFAULT_PRESET)
    }

    pub fn split_spec(&self) -> SplitSpec {
        let d = SplitSpec::default();
        SplitSpec {
            train_frac: self.split.train_frac.unwrap_or(d.train_frac),
            val_frac_of_train: self.split.val_frac_of_train.unwrap_or(d.val_frac_of_train),
            seed: self.split.seed.unwrap_or(d.seed),
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(default_data_root)
    }

    pub fn repeats(&self) -> usize {
        self.experiments.repeats.unwrap_or(DEFAULT_REPEATS)
    }

    pub fn ds_values(&self) -> Vec<usize> {
        self.experiments.ds_values.clone().unwrap_or_else(|| DEFAULT_DS_VALUES.to_vec())
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.output.clamp.map(|[lo, hi]| (lo, hi))
    }

    pub fn overrides(&self) -> HyperOverrides {
        let (m, t) = (&self.model, &self.training);
        HyperOverrides {
            d_c: m.d_c,
            d_s: m.d_s,
            d_c_adapted: m.d_c_adapted,
            layers: m.layers.clone(),
            use_activation: m.use_activation,
            adaptation_mode: m.adaptation_mode,
            network_init: m.network_init,
            adaptation_init: m.adaptation_init,
            frozen: m.frozen.clone(),
            alpha: t.alpha,
            beta: t.beta,
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_delta: t.min_delta,
            batch_size: t.batch_size,
            seed: t.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.preset(), "dacona");
        assert_eq!(c.split_spec(), SplitSpec::default());
        assert_eq!(c.repeats(), 3);
        assert_eq!(c.overrides(), HyperOverrides::default());
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
            [data]
            dataset = "configs/ml-100k.toml"
            [split]
            seed = 4
            [model]
            preset = "dacona_sep"
            layers = [20, 10]
            frozen = [{ network = "RatingX" }]
            [training]
            lambda = 1e-5
            alpha = 0.9
            [output]
            clamp = [1.0, 5.0]
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.preset(), "dacona_sep");
        assert_eq!(c.split_spec().seed, 4);
        assert_eq!(c.clamp(), Some((1.0, 5.0)));
        let o = c.overrides();
        assert_eq!(o.layers, Some(vec![20, 10]));
        assert_eq!(o.lambda, Some(1e-5));
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[training]\nlearning_rte = 0.1").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }
}
