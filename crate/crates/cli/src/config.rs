//! Run configuration: one TOML or JSON file, every section optional.
//!
//! ```toml
//! [dataset]
//! kind = "mnist"           # or "image_folder" with train_dir, test_dir, height, width
//! dir = "data/mnist"       # relative paths are resolved against the config file
//!
//! [model]
//! arch = "mnist_reference" # or "six_conv" (image folders); width_divisor shrinks either
//!
//! [train]
//! epochs = 5
//! batch_size = 100
//! learning_rate = 0.001
//! optimizer = "adam"
//! seed = 0
//!
//! [finetune]               # fine-tuning after each prune
//! target_accuracy = 0.985
//! delta_loss = 1e-6
//! max_epochs = 30
//!
//! [sensitivity]
//! runs = 5
//! num_batches = 10
//! batch_size = 100
//!
//! [autoprune]
//! ratio = 0.3333
//! stop_accuracy = 0.985
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cnnprune::criteria::SensitivityConfig;
use cnnprune::finetune::FineTuneConfig;
use cnnprune::numkernel::OptimizerKind;
use cnnprune::tree::DatasetSpec;
use cnnprune::{Architecture, LayerSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    pub sensitivity: SensitivityConfig,
    pub autoprune: AutoPruneConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Mnist {
                dir: PathBuf::from("data/mnist"),
                train_limit: None,
                test_limit: None,
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FineTuneConfig::default(),
            sensitivity: SensitivityConfig::default(),
            autoprune: AutoPruneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    #[default]
    MnistReference,
    SixConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchChoice,
    /// Divides every channel count of the six-conv architecture.
    pub width_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchChoice::MnistReference,
            width_divisor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 100,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoPruneConfig {
    pub ratio: Option<f64>,
    pub stop_accuracy: Option<f64>,
}

/// A problem with the configuration or the command line (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Config {
    /// Parses `path` as TOML, or as JSON when it ends in `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// The file at `path` if given, otherwise defaults.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Mnist { dir, .. } => fix(dir),
            DatasetSpec::ImageFolder {
                train_dir, test_dir, ..
            } => {
                fix(train_dir);
                fix(test_dir);
            }
            DatasetSpec::InMemory => {}
        }
    }

    /// Semantic checks the schema cannot express.
    pub fn validate(&self) -> anyhow::Result<()> {
        let missing = |p: &Path| usage(format!("dataset directory {} does not exist", p.display()));
        match &self.dataset {
            DatasetSpec::Mnist { dir, .. } => {
                if !dir.is_dir() {
                    return Err(missing(dir));
                }
            }
            DatasetSpec::ImageFolder {
                train_dir,
                test_dir,
                height,
                width,
            } => {
                for d in [train_dir, test_dir] {
                    if !d.is_dir() {
                        return Err(missing(d));
                    }
                }
                if *height == 0 || *width == 0 {
                    return Err(usage("image_folder height and width must be positive"));
                }
            }
            DatasetSpec::InMemory => return Err(usage("dataset.kind must be mnist or image_folder")),
        }
        if self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return Err(usage("train.batch_size and train.learning_rate must be positive"));
        }
        if self.model.width_divisor == 0 {
            return Err(usage("model.width_divisor must be positive"));
        }
        self.finetune.validate().map_err(|e| usage(format!("finetune: {e}")))?;
        if self.sensitivity.runs == 0 || self.sensitivity.batch_size == 0 || self.sensitivity.num_batches == 0 {
            return Err(usage("sensitivity runs, num_batches and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, input_shape: [usize; 3], class_names: Vec<String>) -> anyhow::Result<Architecture> {
        let arch = match self.model.arch {
            ArchChoice::MnistReference => {
                let mut a = Architecture::mnist_reference();
                if a.input_shape != input_shape || a.num_classes() != class_names.len() {
                    bail!(usage(format!(
                        "mnist_reference expects 1x28x28 images and 10 classes, the dataset has {input_shape:?} and {}",
                        class_names.len()
                    )));
                }
                a.class_names = class_names;
                let d = self.model.width_divisor;
                if d > 1 {
                    let (c1, c2) = ((32 / d).max(1), (64 / d).max(1));
                    a.layers[0] = LayerSpec::conv(1, c1, 3);
                    a.layers[3] = LayerSpec::conv(c1, c2, 3);
                    a.layers[7] = LayerSpec::linear(c2 * 25, 10);
                }
                a
            }
            ArchChoice::SixConv => {
                if input_shape[0] != 3 || input_shape[1] != input_shape[2] {
                    bail!(usage("six_conv expects square 3-channel images"));
                }
                Architecture::six_conv_reference(input_shape[1], class_names, self.model.width_divisor)
                    .context("building six_conv architecture")?
            }
        };
        Ok(arch)
    }
}

/// Accepts a decimal (`0.3333`) or a fraction (`1/3`).
pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?,
    };
    if !(v > 0.0 && v < 1.0) {
        return Err(format!("ratio must lie strictly between 0 and 1, got {s}"));
    }
    Ok(v)
}
