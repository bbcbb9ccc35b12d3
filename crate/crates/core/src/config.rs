//! Run configuration: one TOML document describing the experiment
//! end-to-end — network, data source, attacks, curriculum, optimizer, and
//! diagnostic toggles. Parsing is strict: unknown keys are rejected
//! everywhere, and each section's cross-field rules are validated before a
//! run starts. All randomness derives from the single root `seed` via
//! stable, documented tags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::curriculum::{CurriculumConfig, MetricKind, Schedule};
use crate::data::{self, Dataset};
use crate::derive_seed;
use crate::diagnostics::GridSpec;
use crate::hessian::ProbeConfig;
use crate::network::NetworkSpec;
use crate::trainer::{SmoothnessConfig, TrainConfig};
use crate::{Error, Result};

fn default_momentum() -> f64 {
    0.9
}

fn default_n_samples() -> usize {
    64
}

fn default_every() -> usize {
    1
}

/// Network architecture section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Layer widths from input to output, e.g. `[784, 64, 10]`.
    pub layer_sizes: Vec<usize>,
}

/// IDX file pairs for train and test splits, with optional subsampling for
/// desk-scale runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only this many training samples (seeded draw).
    #[serde(default)]
    pub limit_train: Option<usize>,
    /// Keep only this many test samples (seeded draw).
    #[serde(default)]
    pub limit_test: Option<usize>,
}

/// Synthetic dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    /// Generator: `gaussians` (needs `separation`) or `blocks`.
    pub kind: String,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub separation: Option<f64>,
    /// Data seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Exactly one dataset source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        match (&self.idx, &self.synthetic) {
            (Some(_), None) => Ok(()),
            (None, Some(s)) => {
                match s.kind.as_str() {
                    "gaussians" => {
                        if s.separation.is_none() {
                            return Err(Error::InvalidConfig(
                                "synthetic kind \"gaussians\" needs `separation`".into(),
                            ));
                        }
                    }
                    "blocks" => {
                        if s.separation.is_some() {
                            return Err(Error::InvalidConfig(
                                "synthetic kind \"blocks\" does not take `separation`".into(),
                            ));
                        }
                    }
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown synthetic kind {other:?} (expected \"gaussians\" or \"blocks\")"
                        )))
                    }
                }
                Ok(())
            }
            _ => Err(Error::InvalidConfig(
                "data section needs exactly one of `idx` or `synthetic`".into(),
            )),
        }
    }
}

/// One λ schedule in flat form; `kind` selects which fields apply and the
/// others must stay unset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// `constant`, `step`, or `linear`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_value: Option<f64>,
}

impl ScheduleSection {
    pub fn to_schedule(&self) -> Result<Schedule> {
        let stray = |names: &[&str]| -> Result<()> {
            let set: Vec<&str> = [
                ("value", self.value.is_some()),
                ("knots", self.knots.is_some()),
                ("start_epoch", self.start_epoch.is_some()),
                ("start_value", self.start_value.is_some()),
                ("end_epoch", self.end_epoch.is_some()),
                ("end_value", self.end_value.is_some()),
            ]
            .iter()
            .filter(|(n, present)| *present && !names.contains(n))
            .map(|(n, _)| *n)
            .collect();
            if set.is_empty() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "schedule kind {:?} does not take {set:?}",
                    self.kind
                )))
            }
        };
        let need = |name: &str| Error::InvalidConfig(format!("schedule kind {:?} needs `{name}`", self.kind));
        match self.kind.as_str() {
            "constant" => {
                stray(&["value"])?;
                Ok(Schedule::Constant { value: self.value.ok_or_else(|| need("value"))? })
            }
            "step" => {
                stray(&["knots"])?;
                Ok(Schedule::Step { knots: self.knots.clone().ok_or_else(|| need("knots"))? })
            }
            "linear" => {
                stray(&["start_epoch", "start_value", "end_epoch", "end_value"])?;
                Ok(Schedule::Linear {
                    start_epoch: self.start_epoch.ok_or_else(|| need("start_epoch"))?,
                    start_value: self.start_value.ok_or_else(|| need("start_value"))?,
                    end_epoch: self.end_epoch.ok_or_else(|| need("end_epoch"))?,
                    end_value: self.end_value.ok_or_else(|| need("end_value"))?,
                })
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule kind {other:?} (expected constant, step, or linear)"
            ))),
        }
    }
}

/// Curriculum selection; with `metric = "none"` the run is the plain
/// adversarial baseline and the other fields stay at their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSection {
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian_recompute_every: Option<usize>,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self { metric: MetricKind::None, schedule: None, probe: None, hessian_recompute_every: None }
    }
}

impl CurriculumSection {
    pub fn to_curriculum(&self) -> Result<CurriculumConfig> {
        let defaults = CurriculumConfig::default();
        Ok(CurriculumConfig {
            metric: self.metric,
            schedule: match &self.schedule {
                Some(s) => s.to_schedule()?,
                None => defaults.schedule,
            },
            probe: self.probe.clone().unwrap_or(defaults.probe),
            hessian_recompute_every: self
                .hessian_recompute_every
                .unwrap_or(defaults.hessian_recompute_every),
        })
    }
}

/// Per-epoch smoothness tracking toggle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessSection {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_every")]
    pub every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

/// End-of-run landscape slice toggle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Attack for the per-cell adversarial loss; the eval attack when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self { grid: GridSpec::default(), n_samples: default_n_samples(), attack: None }
    }
}

/// The whole experiment in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: Vec<(usize, f64)>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub network: NetworkSection,
    pub data: DataSection,
    pub attack: AttackConfig,
    /// Evaluation attack; defaults to the training attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_attack: Option<AttackConfig>,
    #[serde(default)]
    pub curriculum: CurriculumSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<SmoothnessSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeSection>,
}

impl RunConfig {
    /// Parses and validates a TOML config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("cannot parse config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if let Some(l) = &self.landscape {
            l.grid.validate()?;
            if l.n_samples < 1 {
                return Err(Error::InvalidConfig("landscape n_samples must be >= 1".into()));
            }
            if let Some(a) = &l.attack {
                a.validate()?;
            }
        }
        // The assembled TrainConfig re-checks every numeric range, the
        // schedule shape, and the attack configs.
        self.to_train_config()?;
        Ok(())
    }

    /// The network spec with its init stream derived from the run seed.
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.network.layer_sizes.clone(), derive_seed(self.seed, "init"))
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            spec: self.network_spec(),
            attack: self.attack.clone(),
            eval_attack: self.eval_attack.clone().unwrap_or_else(|| self.attack.clone()),
            curriculum: self.curriculum.to_curriculum()?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            smoothness: self.smoothness.as_ref().map(|s| SmoothnessConfig {
                n_samples: s.n_samples,
                every: s.every,
                probe: s.probe.clone().unwrap_or_default(),
            }),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the configured train/test splits. Synthetic data derives its
    /// seeds from the run seed unless the section pins its own.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        self.data.validate()?;
        if let Some(idx) = &self.data.idx {
            let mut train = data::load_idx(&idx.train_images, &idx.train_labels)?;
            let mut test = data::load_idx(&idx.test_images, &idx.test_labels)?;
            if let Some(n) = idx.limit_train {
                train = train.seeded_subset(n, derive_seed(self.seed, "data/limit_train"))?;
            }
            if let Some(n) = idx.limit_test {
                test = test.seeded_subset(n, derive_seed(self.seed, "data/limit_test"))?;
            }
            return Ok((train, test));
        }
        let s = self.data.synthetic.as_ref().expect("validated above");
        let base = s.seed.unwrap_or_else(|| derive_seed(self.seed, "data"));
        let (train_seed, test_seed) = (derive_seed(base, "train"), derive_seed(base, "test"));
        match s.kind.as_str() {
            "gaussians" => {
                let sep = s.separation.expect("validated above");
                Ok((
                    data::synth_gaussians(s.n_train_per_class, s.dim, sep, s.classes, train_seed)?,
                    data::synth_gaussians(s.n_test_per_class, s.dim, sep, s.classes, test_seed)?,
                ))
            }
            "blocks" => Ok((
                data::synth_blocks(s.n_train_per_class, s.dim, s.classes, train_seed)?,
                data::synth_blocks(s.n_test_per_class, s.dim, s.classes, test_seed)?,
            )),
            _ => unreachable!("validated above"),
        }
    }
}
