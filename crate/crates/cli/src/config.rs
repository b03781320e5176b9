//! Experiment configuration: TOML in, fully resolved settings out.
//!
//! Every optional key has a default; keys that depend on others (the
//! unlabeled batch size, warmup length) are resolved after parsing. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use calibratemix::augment::AugmentationSpec;
use calibratemix::margins::MarginRule;
use calibratemix::mixup::{GammaMode, PairingConfig, Representation};
use calibratemix::model::LrSchedule;
use calibratemix::trainer::{MixupMode, TrainerConfig, WarmupGate};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Gaussian {
        classes: usize,
        dim: usize,
        samples: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_std")]
        std: f64,
        #[serde(default)]
        layout: BlobLayout,
        /// Generator seed; each run seed is added to it.
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    TwoMoons {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobLayout {
    /// Class `c` offset along axis `c mod D`.
    #[default]
    Axis,
    /// Orthogonal means spread over every coordinate.
    Hadamard,
}

fn default_separation() -> f64 {
    2.0
}
fn default_std() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_data_seed() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub labels_per_class: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    None,
    Calibratemix,
    RandomMixup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    Mixup,
    MixupAndUnlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AumForm {
    Mean,
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeySpace {
    Raw,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    HalfCosine,
    SevenSixteenths,
}

/// Trainer block as written; `None` means "use the default".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub steps: Option<u64>,
    pub mode: Option<Mode>,
    pub threshold: Option<f64>,
    pub lambda_u: Option<f64>,
    pub labeled_batch: Option<usize>,
    pub unlabeled_batch: Option<usize>,
    pub mixup_batch: Option<usize>,
    pub warmup_fraction: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub warmup_gate: Option<Gate>,
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    /// Fixed mixing weight instead of Beta(α, α) draws.
    pub gamma: Option<f64>,
    pub representation: Option<KeySpace>,
    pub mix_all: Option<bool>,
    pub restrict_pools: Option<bool>,
    pub label_smoothing: Option<f64>,
    pub apm_delta: Option<f64>,
    pub aum: Option<AumForm>,
    pub momentum: Option<f64>,
    pub learning_rate: Option<f64>,
    pub schedule: Option<Schedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub weak_jitter: f64,
    pub strong_jitter: f64,
    pub strong_dropout: f64,
    pub flip: bool,
    pub shift: bool,
    pub erase: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationSpec::default().into()
    }
}

impl From<AugmentationSpec> for AugmentationConfig {
    fn from(s: AugmentationSpec) -> Self {
        Self {
            weak_jitter: s.weak_jitter,
            strong_jitter: s.strong_jitter,
            strong_dropout: s.strong_dropout,
            flip: s.flip,
            shift: s.shift,
            erase: s.erase,
        }
    }
}

impl AugmentationConfig {
    pub fn spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            weak_jitter: self.weak_jitter,
            strong_jitter: self.strong_jitter,
            strong_dropout: self.strong_dropout,
            flip: self.flip,
            shift: self.shift,
            erase: self.erase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bins: usize,
    pub log_every: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bins: calibratemix::calibration::DEFAULT_BINS,
            log_every: 100,
        }
    }
}

/// The file layout.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetConfig,
    split: SplitConfig,
    #[serde(default)]
    model: ModelConfig,
    trainer: TrainerSection,
    #[serde(default)]
    augmentation: AugmentationConfig,
    #[serde(default)]
    evaluation: EvaluationConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Trainer settings with every default applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedTrainer {
    pub steps: u64,
    pub mode: Mode,
    pub threshold: f64,
    pub lambda_u: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub mixup_batch: usize,
    pub warmup_steps: u64,
    pub warmup_gate: Gate,
    pub k: f64,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub representation: KeySpace,
    pub mix_all: bool,
    pub restrict_pools: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_smoothing: Option<f64>,
    pub apm_delta: f64,
    pub aum: AumForm,
    pub momentum: f64,
    pub learning_rate: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub trainer: ResolvedTrainer,
    pub augmentation: AugmentationConfig,
    pub evaluation: EvaluationConfig,
    /// The unresolved trainer block, kept so arm overrides can re-derive
    /// dependent defaults. Not part of the dump.
    #[serde(skip)]
    pub trainer_section: TrainerSection,
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        location: key.to_string(),
        message: message.into(),
    }
}

impl TrainerSection {
    /// Fills defaults and checks ranges; `key` errors name the offending key.
    pub fn resolve(&self) -> Result<ResolvedTrainer> {
        let steps = self
            .steps
            .ok_or_else(|| invalid("trainer.steps", "missing required key"))?;
        let labeled_batch = self.labeled_batch.unwrap_or(64);
        let warmup_steps = match (self.warmup_steps, self.warmup_fraction) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "trainer.warmup_steps",
                    "give warmup_steps or warmup_fraction, not both",
                ))
            }
            (Some(w), None) => w,
            (None, f) => {
                let f = f.unwrap_or(0.1);
                if !(0.0..1.0).contains(&f) {
                    return Err(invalid("trainer.warmup_fraction", format!("{f} not in [0, 1)")));
                }
                (f * steps as f64).round() as u64
            }
        };
        let t = ResolvedTrainer {
            steps,
            mode: self.mode.unwrap_or(Mode::Calibratemix),
            threshold: self.threshold.unwrap_or(0.95),
            lambda_u: self.lambda_u.unwrap_or(1.0),
            labeled_batch,
            unlabeled_batch: self.unlabeled_batch.unwrap_or(7 * labeled_batch),
            mixup_batch: self.mixup_batch.unwrap_or(64),
            warmup_steps,
            warmup_gate: self.warmup_gate.unwrap_or(Gate::Mixup),
            k: self.k.unwrap_or(5.0),
            alpha: self.alpha.unwrap_or(0.4),
            gamma: self.gamma,
            representation: self.representation.unwrap_or(KeySpace::Raw),
            mix_all: self.mix_all.unwrap_or(false),
            restrict_pools: self.restrict_pools.unwrap_or(true),
            label_smoothing: self.label_smoothing,
            apm_delta: self.apm_delta.unwrap_or(calibratemix::margins::DEFAULT_DELTA),
            aum: self.aum.unwrap_or(AumForm::Mean),
            momentum: self.momentum.unwrap_or(0.9),
            learning_rate: self.learning_rate.unwrap_or(0.03),
            schedule: self.schedule.unwrap_or(Schedule::HalfCosine),
        };
        t.validate()?;
        Ok(t)
    }
}

impl ResolvedTrainer {
    fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid(
                "trainer.threshold",
                format!("{} not in (0, 1]", self.threshold),
            ));
        }
        if !(self.lambda_u >= 0.0) {
            return Err(invalid("trainer.lambda_u", format!("{} < 0", self.lambda_u)));
        }
        if self.labeled_batch == 0 {
            return Err(invalid("trainer.labeled_batch", "must be >= 1"));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(invalid(
                "trainer.warmup_steps",
                format!("{} must be below steps = {}", self.warmup_steps, self.steps),
            ));
        }
        if !(0.0..=100.0).contains(&self.k) {
            return Err(invalid("trainer.k", format!("{} not in [0, 100]", self.k)));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("trainer.alpha", format!("{} must be > 0", self.alpha)));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(invalid("trainer.gamma", format!("{g} not in [0, 1]")));
            }
        }
        if let Some(f) = self.label_smoothing {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid("trainer.label_smoothing", format!("{f} not in [0, 1)")));
            }
        }
        if !(self.apm_delta > 0.0 && self.apm_delta < 2.0) {
            return Err(invalid(
                "trainer.apm_delta",
                format!("{} not in (0, 2)", self.apm_delta),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(
                "trainer.momentum",
                format!("{} not in [0, 1)", self.momentum),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid(
                "trainer.learning_rate",
                format!("{} must be > 0", self.learning_rate),
            ));
        }
        Ok(())
    }

    /// Core trainer settings for a dataset with `classes` classes.
    pub fn trainer_config(&self, classes: usize, hidden: &[usize], eval: &EvaluationConfig) -> TrainerConfig {
        let mut cfg = TrainerConfig::new(classes, self.steps);
        cfg.hidden = hidden.to_vec();
        cfg.threshold = self.threshold;
        cfg.lambda_u = self.lambda_u;
        cfg.labeled_batch = self.labeled_batch;
        cfg.unlabeled_batch = self.unlabeled_batch;
        cfg.mixup_batch = self.mixup_batch;
        cfg.warmup_steps = self.warmup_steps;
        cfg.warmup_gate = match self.warmup_gate {
            Gate::Mixup => WarmupGate::MixupOnly,
            Gate::MixupAndUnlabeled => WarmupGate::MixupAndUnlabeled,
        };
        cfg.mixup = match self.mode {
            Mode::None => MixupMode::None,
            Mode::Calibratemix => MixupMode::CalibrateMix,
            Mode::RandomMixup => MixupMode::RandomMixup,
        };
        cfg.pairing = PairingConfig {
            k_percent: self.k,
            gamma: match self.gamma {
                Some(g) => GammaMode::Fixed(g),
                None => GammaMode::Beta { alpha: self.alpha },
            },
            representation: match self.representation {
                KeySpace::Raw => Representation::RawInput,
                KeySpace::Penultimate => Representation::Penultimate,
            },
            mix_all: self.mix_all,
        };
        cfg.label_smoothing = self.label_smoothing;
        cfg.restrict_pools = self.restrict_pools;
        cfg.apm_delta = self.apm_delta;
        cfg.aum_rule = match self.aum {
            AumForm::Mean => MarginRule::RunningMean,
            AumForm::Ema => MarginRule::Ema {
                delta: self.apm_delta,
            },
        };
        cfg.momentum = self.momentum;
        cfg.learning_rate = self.learning_rate;
        cfg.schedule = match self.schedule {
            Schedule::HalfCosine => LrSchedule::HalfCosine,
            Schedule::SevenSixteenths => LrSchedule::SevenSixteenths,
        };
        cfg.log_every = eval.log_every;
        cfg.eval_bins = eval.bins;
        cfg
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config {
            location: match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "config".into(),
            },
            message: e.message().to_string(),
        })?;
        Self::from_raw(raw, base_dir)
    }

    /// Reads and validates `path`; relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config { location, message } => CliError::Config {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    fn from_raw(raw: RawConfig, base_dir: &Path) -> Result<Self> {
        let mut dataset = raw.dataset;
        let resolve = |p: &mut PathBuf, key: &str| -> Result<()> {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
            if !p.is_file() {
                return Err(invalid(key, format!("file {} does not exist", p.display())));
            }
            Ok(())
        };
        match &mut dataset {
            DatasetConfig::Gaussian {
                classes,
                dim,
                samples,
                std,
                layout,
                ..
            } => {
                if *classes < 2 {
                    return Err(invalid("dataset.classes", "need at least 2 classes"));
                }
                if *dim == 0 {
                    return Err(invalid("dataset.dim", "must be >= 1"));
                }
                if *samples == 0 {
                    return Err(invalid("dataset.samples", "must be >= 1"));
                }
                if !(*std >= 0.0) {
                    return Err(invalid("dataset.std", "must be >= 0"));
                }
                if *layout == BlobLayout::Hadamard && (!dim.is_power_of_two() || *dim <= *classes) {
                    return Err(invalid(
                        "dataset.layout",
                        "hadamard needs a power-of-two dim above the class count",
                    ));
                }
            }
            DatasetConfig::TwoMoons { samples, noise, .. } => {
                if *samples < 2 {
                    return Err(invalid("dataset.samples", "must be >= 2"));
                }
                if !(*noise >= 0.0) {
                    return Err(invalid("dataset.noise", "must be >= 0"));
                }
            }
            DatasetConfig::Csv { path } => resolve(path, "dataset.path")?,
            DatasetConfig::Idx { images, labels } => {
                resolve(images, "dataset.images")?;
                resolve(labels, "dataset.labels")?;
            }
        }
        if raw.split.labels_per_class == 0 {
            return Err(invalid("split.labels_per_class", "must be >= 1"));
        }
        if !(raw.split.test_fraction > 0.0 && raw.split.test_fraction < 1.0) {
            return Err(invalid("split.test_fraction", "not in (0, 1)"));
        }
        if raw.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", "layer widths must be >= 1"));
        }
        let augmentation = raw.augmentation;
        augmentation
            .spec()
            .validate()
            .map_err(|e| invalid("augmentation", e.to_string()))?;
        if raw.evaluation.bins == 0 {
            return Err(invalid("evaluation.bins", "must be >= 1"));
        }
        if raw.evaluation.log_every == 0 {
            return Err(invalid("evaluation.log_every", "must be >= 1"));
        }
        if raw.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed"));
        }
        Ok(Self {
            seeds: raw.seeds,
            output_dir: raw.output_dir,
            dataset,
            split: raw.split,
            model: raw.model,
            trainer: raw.trainer.resolve()?,
            augmentation,
            evaluation: raw.evaluation,
            trainer_section: raw.trainer,
        })
    }

    /// The resolved settings as TOML.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("resolved config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "two_moons"
samples = 200

[split]
labels_per_class = 4

[trainer]
steps = 1000
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new(".")).unwrap();
        let t = &cfg.trainer;
        assert_eq!(t.threshold, 0.95);
        assert_eq!(t.lambda_u, 1.0);
        assert_eq!(t.alpha, 0.4);
        assert_eq!(t.k, 5.0);
        assert_eq!(t.unlabeled_batch, 7 * t.labeled_batch);
        assert_eq!(t.warmup_steps, 100);
        assert_eq!(cfg.evaluation.bins, 15);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.model.hidden, vec![64, 64]);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let bad = MINIMAL.replace("steps = 1000", "steps = 1000\nk = -1");
        let err = ExperimentConfig::parse(&bad, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("trainer.k"), "{err}");

        let missing = MINIMAL.replace("steps = 1000", "");
        let err = ExperimentConfig::parse(&missing, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("trainer.steps"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let unknown = MINIMAL.replace("steps = 1000", "steps = 1000\nlearning_rat = 0.1");
        let err = ExperimentConfig::parse(&unknown, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(err.to_string().contains("line"), "{err}");

        let mistyped = MINIMAL.replace("steps = 1000", "steps = \"many\"");
        assert!(ExperimentConfig::parse(&mistyped, Path::new(".")).is_err());
    }

    #[test]
    fn missing_data_files_are_reported() {
        let text = MINIMAL.replace(
            "kind = \"two_moons\"\nsamples = 200",
            "kind = \"csv\"\npath = \"nope.csv\"",
        );
        let err = ExperimentConfig::parse(&text, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("dataset.path"), "{err}");
    }

    #[test]
    fn warmup_conflicts() {
        let both = MINIMAL.replace(
            "steps = 1000",
            "steps = 1000\nwarmup_steps = 5\nwarmup_fraction = 0.2",
        );
        assert!(ExperimentConfig::parse(&both, Path::new(".")).is_err());
        let long = MINIMAL.replace("steps = 1000", "steps = 1000\nwarmup_steps = 1000");
        assert!(ExperimentConfig::parse(&long, Path::new(".")).is_err());
    }
}
