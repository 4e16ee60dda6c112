//! Run configuration file (TOML).
//!
//! ```toml
//! output_dir = "runs/blobs"      # relative paths are taken from the config's directory
//! stored_bits = 4                # optional; defaults to the widest low-bit mode
//!
//! [model]
//! kind = "mlp"                   # or "smallconv"
//! sizes = [2, 32, 3]
//! width_multiplier = 1.0         # scales hidden widths
//!
//! [network]                      # all optional
//! variant = "bsbn_b"             # "shared", "bsbn_a" or "bsbn_b"
//! family = "aligned"
//! exempt_first_last = true
//! seed = 0
//!
//! [data]
//! source = "blobs"               # or "idx" / "csv"
//! per_class = 167
//! classes = 3
//! dimension = 2
//! separation = 5.0
//! seed = 0
//! holdout = 0                    # 0 evaluates on the training set
//!
//! [train]                        # all optional
//! epochs = 30
//! batch_size = 32
//! learning_rate = 0.05
//! lr_decay_epochs = []
//! lr_decay = 0.1
//! momentum = 0.9
//! seed = 0
//! modes = [1, 2, 4, 32]
//! include_1bit = true
//! loss = "consistency"           # or "cross_entropy"
//!
//! [train.objective]
//! temperature = 2.0
//! weight_decay = 0.0
//! scale_by_t2 = false
//! alpha = { "32" = 1.0, "4" = 1.0 }
//! ```

use std::path::{Path, PathBuf};

use qdnn::data::{load_csv, load_idx, synthetic_blobs, Dataset};
use qdnn::mode::BitMode;
use qdnn::network::{build_mlp, build_smallconv, scale_widths, NetOptions, QuantizableNet};
use qdnn::quantize::Family;
use qdnn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stored_bits: Option<BitMode>,
    pub model: ModelConfig,
    #[serde(default)]
    pub network: NetOptions,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        sizes: Vec<usize>,
        #[serde(default = "one")]
        width_multiplier: f64,
    },
    Smallconv {
        #[serde(default = "one")]
        width_multiplier: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        per_class: usize,
        classes: usize,
        dimension: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        /// Samples held out for evaluation; 0 evaluates on the training set.
        #[serde(default)]
        holdout: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl RunConfig {
    /// Reads, parses and resolves a config file. Errors name the offending
    /// key path.
    pub fn load(path: &Path) -> Result<RunConfig, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        config.resolve(path.parent().unwrap_or(Path::new("")));
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            format!("invalid config at key `{path}`: {}", inner.message())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Makes paths absolute relative to `base` and fills defaulted values.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.data {
            DataConfig::Blobs { .. } => {}
            DataConfig::Idx { train_images, train_labels, test_images, test_labels } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataConfig::Csv { train, test } => {
                fix(train);
                fix(test);
            }
        }
        let modes = self.train.train_modes();
        self.stored_bits.get_or_insert_with(|| modes.iter().rev().copied().find(|m| !m.is_full()).unwrap_or(BitMode::FULL));
    }

    fn validate(&self) -> Result<(), Failure> {
        self.train.validate().map_err(|e| Failure::usage(format!("[train]: {e}")))?;
        let stored = self.stored_bits();
        if !self.train.train_modes().contains(&stored) {
            return Err(Failure::usage(format!("stored_bits {} is not one of the training modes", stored.bits())));
        }
        if self.network.family == Family::Legacy {
            return Err(Failure::usage("[network].family: legacy quantizers cannot be stored (no switch function); use \"aligned\""));
        }
        if let DataConfig::Blobs { per_class, holdout, classes, .. } = self.data {
            if holdout > 0 && holdout >= per_class * classes {
                return Err(Failure::usage("[data].holdout must leave training samples"));
            }
        }
        Ok(())
    }

    pub fn stored_bits(&self) -> BitMode {
        self.stored_bits.unwrap_or(BitMode::FULL)
    }

    pub fn build_net(&self) -> Result<QuantizableNet, Failure> {
        let modes = self.train.train_modes();
        let net = match &self.model {
            ModelConfig::Mlp { sizes, width_multiplier } => {
                let sizes = scale_widths(sizes, *width_multiplier).map_err(|e| Failure::usage(format!("[model]: {e}")))?;
                build_mlp(&sizes, &modes, &self.network)
            }
            ModelConfig::Smallconv { width_multiplier } => build_smallconv(*width_multiplier, &modes, &self.network),
        };
        net.map_err(|e| Failure::usage(format!("[model]: {e}")))
    }

    /// Training and evaluation sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), Failure> {
        let data = |e: qdnn::Error| Failure::data(format!("[data]: {e}"));
        match &self.data {
            DataConfig::Blobs { per_class, classes, dimension, separation, seed, holdout } => {
                let all = synthetic_blobs(*per_class, *classes, *dimension, *separation, *seed).map_err(data)?;
                if *holdout == 0 {
                    Ok((all.clone(), all))
                } else {
                    all.shuffled_split(all.len() - holdout, *seed).map_err(data)
                }
            }
            DataConfig::Idx { train_images, train_labels, test_images, test_labels } => {
                Ok((load_idx(train_images, train_labels).map_err(data)?, load_idx(test_images, test_labels).map_err(data)?))
            }
            DataConfig::Csv { train, test } => Ok((load_csv(train).map_err(data)?, load_csv(test).map_err(data)?)),
        }
    }
}

/// Checks that a dataset fits a network's input and output sizes.
pub fn check_fit(net: &QuantizableNet, data: &Dataset) -> Result<(), Failure> {
    if data.features() != net.input_len() {
        return Err(Failure::data(format!("data has {} features but the model expects {}", data.features(), net.input_len())));
    }
    if data.classes() > net.classes() {
        return Err(Failure::data(format!("data has {} classes but the model has {} outputs", data.classes(), net.classes())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[model]
kind = "mlp"
sizes = [2, 8, 3]
[data]
source = "blobs"
per_class = 10
classes = 3
dimension = 2
separation = 5.0
"#;

    #[test]
    fn defaults_fill_in() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.resolve(Path::new("/base"));
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
        assert_eq!(c.stored_bits(), BitMode::new(4).unwrap());
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.resolve(Path::new("/base"));
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let text = MINIMAL.replace("per_class = 10", "per_class = 10\nwidth = 3");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("data"), "{err}");
        let text = format!("{MINIMAL}[train]\nepochz = 3\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("train") && err.contains("epochz"), "{err}");
        let text = format!("{MINIMAL}[train.objective]\ntemperature = \"hot\"\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.contains("train.objective.temperature"), "{err}");
    }

    #[test]
    fn stored_bits_must_be_trained() {
        let mut c = RunConfig::parse(&format!("stored_bits = 8\n{MINIMAL}")).unwrap();
        c.resolve(Path::new(""));
        assert_eq!(c.validate().unwrap_err().code, 2);
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let config = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(config.build_net().is_ok(), "{}", path.display());
        }
    }
}
