//! Declarative experiment configuration.
//!
//! A single root seed drives every stochastic stage through fixed derivation
//! domains: `dataset` (template generation and printing), `split`
//! (partitioning), `train-init` (parameter init), `train` (augmentation,
//! shuffling, noise draws), and `eval` (per-probe trial streams). The
//! resolved config is serialized next to every output together with its
//! SHA-256 fingerprint, so any artifact traces back to the exact
//! configuration that produced it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, Hyperparams};
use crate::error::{Error, Result};
use crate::eval::AugmentParams;
use crate::rng;
use crate::schedule::ScheduleSpec;
use crate::synthcdp::{default_classes, validate_classes, PrinterClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_templates: usize,
    pub image_side: usize,
    /// `None` selects the default six-class configuration.
    pub classes: Option<Vec<PrinterClass>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_templates: 120,
            image_side: 32,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Restrict training to these class labels (the unseen-counterfeit
    /// protocol trains on four of six).
    pub class_filter: Option<Vec<String>>,
    pub no_template: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 32,
            lr: 2e-4,
            warmup_steps: 200,
            weight_decay: 0.0,
            class_filter: None,
            no_template: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub n_trials: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { n_trials: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fractions: (f64, f64, f64),
    pub augment: AugmentParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fractions: (0.7, 0.1, 0.2),
            augment: AugmentParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSpec,
    pub model: DenoiserConfig,
    pub train: TrainSection,
    pub classify: ClassifySection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "out".into(),
            dataset: DatasetSection::default(),
            schedule: ScheduleSpec::default(),
            model: DenoiserConfig::default(),
            train: TrainSection::default(),
            classify: ClassifySection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn classes(&self) -> Vec<PrinterClass> {
        self.dataset.classes.clone().unwrap_or_else(default_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_classes(&self.classes())?;
        self.schedule.build()?;
        if self.dataset.n_templates < 3 {
            return Err(Error::invalid_configuration(
                "dataset.n_templates must be >= 3 to split",
            ));
        }
        if self.model.image_side != self.dataset.image_side {
            return Err(Error::invalid_configuration(format!(
                "model.image_side {} != dataset.image_side {}",
                self.model.image_side, self.dataset.image_side
            )));
        }
        let factor = 1usize << (self.model.depth - 1);
        if self.eval.augment.crop_side % factor != 0 {
            return Err(Error::invalid_configuration(format!(
                "eval.augment.crop_side must be divisible by {factor} for depth {}",
                self.model.depth
            )));
        }
        self.eval.augment.validate(self.dataset.image_side)?;
        if self.classify.n_trials < 1 {
            return Err(Error::invalid_configuration("classify.n_trials must be >= 1"));
        }
        let (a, b, c) = self.eval.fractions;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_configuration(
                "eval.fractions must be positive and sum to 1",
            ));
        }
        if let Some(filter) = &self.train.class_filter {
            let classes = self.classes();
            for label in filter {
                if !classes.iter().any(|c| &c.label == label) {
                    return Err(Error::invalid_configuration(format!(
                        "train.class_filter names unknown class {label:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_digest(&hasher.finalize())
    }

    pub fn dataset_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "dataset", &[])
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "split", &[])
    }

    pub fn train_init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "train-init", &[])
    }

    pub fn eval_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "eval", &[])
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            weight_decay: self.train.weight_decay,
            seed: rng::derive_seed(self.seed, "train", &[]),
            augment: self.eval.augment.clone(),
            no_template: self.train.no_template,
        }
    }

    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(raw).map_err(|e| Error::invalid_configuration(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
