//! Run configuration: a TOML file plus `key=value` overrides.
//!
//! Every section and key is optional; missing keys take the defaults
//! below. Unknown keys are rejected.

use pfq_core::data::{
    load_cifar_binary, make_synthetic, split_validation, CifarVariant, Dataset, SplitSpec, SyntheticSpec,
};
use pfq_core::models::{plain_cnn, separable_net, SeparableNetSpec};
use pfq_core::train::{EarlyStopPolicy, LRSchedule, TrainConfig};
use pfq_core::workflow::WorkflowConfig;
use pfq_core::graph::ModelGraph;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for convolution; 0 picks one per core.
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Pre-training.
    pub train: TrainSection,
    /// Activation fine-tuning budget.
    pub stage_a: TrainSection,
    /// Weight fine-tuning budget.
    pub stage_w: TrainSection,
    pub quant: QuantSection,
    pub pfq: PfqSection,
    /// Early-stop margin in accuracy points; needs a validation split.
    pub accuracy_drop: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    /// Held out of the training set per class; 0 disables validation.
    pub val_per_class: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Separable,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// `[out_channels, stride]` per separable block.
    pub blocks: Vec<[usize; 2]>,
    pub relu6: bool,
    /// Conv widths of the plain net.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub period: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ste {
    Clipped,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub act_bits: u32,
    pub weight_bits: u32,
    pub act_momentum: f64,
    pub ste: Ste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfqSection {
    pub enabled: bool,
    pub epsilon: f64,
    pub quantize_act_of_beta: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            threads: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection {
                epochs: 8,
                warmup_epochs: 1,
                period: 7.0,
                ..TrainSection::default()
            },
            stage_a: TrainSection::fine_tune(),
            stage_w: TrainSection::fine_tune(),
            quant: QuantSection::default(),
            pfq: PfqSection::default(),
            accuracy_drop: None,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            classes: 4,
            val_per_class: 25,
            per_class: 200,
            test_per_class: 50,
            shape: [3, 16, 16],
            noise: 2.0,
            train_path: None,
            test_path: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let toy = SeparableNetSpec::toy(1, 0);
        ModelConfig {
            arch: Arch::Separable,
            stem_channels: toy.stem_channels,
            stem_stride: toy.stem_stride,
            blocks: toy.blocks.iter().map(|&(c, s)| [c, s]).collect(),
            relu6: false,
            widths: vec![16, 32],
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 8,
            batch_size: 32,
            lr: 0.05,
            warmup_epochs: 0,
            period: 8.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainSection {
    fn fine_tune() -> Self {
        TrainSection {
            epochs: 3,
            lr: 0.005,
            period: 3.0,
            ..TrainSection::default()
        }
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LRSchedule {
                base_lr: self.lr,
                warmup_epochs: self.warmup_epochs,
                period: self.period,
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            stop: EarlyStopPolicy::FixedEpochs,
            calibrate_epochs: None,
        }
    }
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            act_bits: 4,
            weight_bits: 4,
            act_momentum: pfq_core::quant::DEFAULT_ACT_MOMENTUM,
            ste: Ste::Clipped,
        }
    }
}

impl Default for PfqSection {
    fn default() -> Self {
        PfqSection {
            enabled: true,
            epsilon: pfq_core::bn::DEFAULT_EPSILON,
            quantize_act_of_beta: false,
        }
    }
}

/// Sets `key` (dotted path) to `raw`, read as a TOML value when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), String> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| format!("empty key in `{key}`"))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides`, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| flatten(&e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| format!("override `{o}` is not key=value"))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| flatten(&e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [("train", &self.train), ("stage_a", &self.stage_a), ("stage_w", &self.stage_w)] {
            t.to_train_config(self.seed).validate().map_err(|e| format!("{name}: {e}"))?;
        }
        if self.data.classes == 0 {
            return Err("data.classes must be positive".into());
        }
        if self.data.kind == DataKind::Cifar {
            CifarVariant::from_classes(self.data.classes as u32).map_err(|e| e.to_string())?;
        }
        if self.pfq.epsilon.is_nan() || self.pfq.epsilon <= 0.0 {
            return Err(format!("pfq.epsilon must be positive, got {}", self.pfq.epsilon));
        }
        if self.accuracy_drop.is_some_and(|d| d.is_nan() || d < 0.0) {
            return Err("accuracy_drop must be >= 0".into());
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.data.kind {
            DataKind::Synthetic => self.data.shape,
            DataKind::Cifar => [3, 32, 32],
        }
    }

    pub fn build_model(&self) -> pfq_core::Result<ModelGraph> {
        let m = &self.model;
        match m.arch {
            Arch::Plain => plain_cnn(self.input_shape(), &m.widths, self.data.classes, self.seed),
            Arch::Separable => separable_net(&SeparableNetSpec {
                input: self.input_shape(),
                stem_channels: m.stem_channels,
                stem_stride: m.stem_stride,
                blocks: m.blocks.iter().map(|&[c, s]| (c, s)).collect(),
                classes: self.data.classes,
                relu6: m.relu6,
                seed: self.seed,
            }),
        }
    }

    /// Training, validation and test sets.
    pub fn load_data(&self) -> pfq_core::Result<Splits> {
        let d = &self.data;
        let (full, test) = match d.kind {
            DataKind::Synthetic => {
                let spec = |per_class, seed| SyntheticSpec {
                    class_count: d.classes,
                    per_class,
                    shape: d.shape,
                    seed,
                    noise: d.noise,
                };
                // the test set shares the class means but draws fresh noise
                let all = make_synthetic(&spec(d.per_class + d.test_per_class, self.seed))?;
                let train_idx: Vec<usize> = (0..d.classes * d.per_class).collect();
                let test_idx: Vec<usize> = (d.classes * d.per_class..all.len()).collect();
                (all.subset(&train_idx)?, all.subset(&test_idx)?)
            }
            DataKind::Cifar => {
                let variant = CifarVariant::from_classes(d.classes as u32)?;
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| pfq_core::Error::Data(format!("data.{key} is required for cifar")))
                };
                (
                    load_cifar_binary(&need(&d.train_path, "train_path")?, variant)?,
                    load_cifar_binary(&need(&d.test_path, "test_path")?, variant)?,
                )
            }
        };
        let (train, val) = if d.val_per_class == 0 {
            (full, None)
        } else {
            let (t, v) = split_validation(
                &full,
                SplitSpec {
                    per_class: d.val_per_class,
                    seed: self.seed,
                },
            )?;
            (t, Some(v))
        };
        Ok(Splits { train, val, test })
    }

    pub fn workflow_config(&self) -> WorkflowConfig {
        let mut w = WorkflowConfig::new(
            self.quant.act_bits,
            self.quant.weight_bits,
            self.stage_a.to_train_config(self.seed),
            self.stage_w.to_train_config(self.seed),
        );
        w.act_momentum = self.quant.act_momentum;
        w.epsilon = self.pfq.epsilon;
        w.pfq_enabled = self.pfq.enabled;
        w.accuracy_drop = self.accuracy_drop;
        w
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

fn flatten(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}
