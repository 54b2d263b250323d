//! Experiment configuration and training manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::architectures::{ArchitectureKind, ArchitectureSpec};
use crate::baselines::default_state_count;
use crate::datagen::{default_window_width, HouseId, HouseSplit, WindowSpec, DEFAULT_STD_SAMPLE_COUNT};
use crate::disaggregate::{DisaggConfig, DEFAULT_PROBABILITY_THRESHOLD};
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::timeseries::{ActivationParams, DEFAULT_SAMPLE_PERIOD};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "nilm-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Paper,
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected paper or desk"))),
        }
    }
}

/// Scale-down factors applied by the desk profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskScale {
    pub window_divisor: usize,
    pub min_window: usize,
    pub width_divisor: usize,
    pub budget_divisor: usize,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            window_divisor: 4,
            min_window: 32,
            width_divisor: 16,
            budget_divisor: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseFiles {
    pub aggregate: PathBuf,
    #[serde(default)]
    pub channels: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceConfig {
    pub id: String,
    #[serde(default)]
    pub activation: Option<ActivationParams>,
    #[serde(default)]
    pub window_width: Option<usize>,
    pub train_houses: Vec<HouseId>,
    pub test_houses: Vec<HouseId>,
    #[serde(default)]
    pub baseline_states: Option<usize>,
}

impl ApplianceConfig {
    pub fn activation_params(&self) -> Result<ActivationParams> {
        self.activation
            .or_else(|| ActivationParams::for_appliance(&self.id))
            .ok_or_else(|| Error::Config(format!("no activation parameters for appliance {:?}", self.id)))
    }

    pub fn split(&self) -> Result<HouseSplit> {
        HouseSplit::new(self.train_houses.iter().cloned(), self.test_houses.iter().cloned())
            .map_err(|_| Error::Config(format!("{}: a house is assigned to both train and test", self.id)))
    }

    pub fn baseline_state_count(&self) -> usize {
        self.baseline_states.unwrap_or_else(|| default_state_count(&self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSettings {
    pub update_budget: Option<usize>,
    pub batch_size: Option<usize>,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
    pub std_sample_count: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            update_budget: None,
            batch_size: None,
            log_every: 10,
            checkpoint_every: None,
            std_sample_count: DEFAULT_STD_SAMPLE_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisaggSettings {
    /// Defaults to a sixteenth of the window.
    pub stride: Option<usize>,
    pub probability_threshold: f64,
    /// Defaults to the appliance's on-power threshold.
    pub power_threshold: Option<f64>,
}

impl Default for DisaggSettings {
    fn default() -> Self {
        DisaggSettings {
            stride: None,
            probability_threshold: DEFAULT_PROBABILITY_THRESHOLD,
            power_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "default_sample_period")]
    pub sample_period: u32,
    pub output_dir: PathBuf,
    pub houses: BTreeMap<HouseId, HouseFiles>,
    pub appliances: Vec<ApplianceConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub disaggregation: DisaggSettings,
    #[serde(default)]
    pub desk: DeskScale,
}

fn default_sample_period() -> u32 {
    DEFAULT_SAMPLE_PERIOD
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against the config's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for h in self.houses.values_mut() {
            fix(&mut h.aggregate);
            h.channels.values_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}; expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.sample_period == 0 {
            return Err(Error::Config("sample_period must be positive".into()));
        }
        if self.appliances.is_empty() {
            return Err(Error::Config("no appliances configured".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &self.appliances {
            if !seen.insert(&a.id) {
                return Err(Error::Config(format!("appliance {:?} listed twice", a.id)));
            }
            a.split()?;
            a.activation_params()?.validate()?;
            for h in a.train_houses.iter().chain(&a.test_houses) {
                if !self.houses.contains_key(h) {
                    return Err(Error::Config(format!("{}: house {h:?} is not defined", a.id)));
                }
            }
        }
        for files in self.houses.values() {
            for p in std::iter::once(&files.aggregate).chain(files.channels.values()) {
                if !p.exists() {
                    return Err(Error::Config(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn appliance(&self, id: &str) -> Result<&ApplianceConfig> {
        self.appliances.iter().find(|a| a.id == id).ok_or_else(|| {
            let known: Vec<&str> = self.appliances.iter().map(|a| a.id.as_str()).collect();
            Error::Config(format!("unknown appliance {id:?}; configured: {}", known.join(", ")))
        })
    }

    pub fn window_width(&self, appliance: &ApplianceConfig, profile: Profile) -> Result<usize> {
        let full = appliance
            .window_width
            .or_else(|| default_window_width(&appliance.id))
            .ok_or_else(|| Error::Config(format!("no window width for appliance {:?}", appliance.id)))?;
        Ok(match profile {
            Profile::Paper => full,
            Profile::Desk => (full / self.desk.window_divisor.max(1)).max(self.desk.min_window),
        })
    }

    pub fn architecture(&self, appliance: &ApplianceConfig, kind: ArchitectureKind, profile: Profile) -> Result<ArchitectureSpec> {
        let width = self.window_width(appliance, profile)?;
        let mut spec = ArchitectureSpec::paper(kind, width);
        if profile == Profile::Desk {
            spec = spec.scaled(self.desk.width_divisor, self.desk.budget_divisor);
        }
        if let Some(b) = self.training.update_budget {
            spec.update_budget = b;
        }
        if let Some(b) = self.training.batch_size {
            spec.batch_size = b;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn disagg_config(&self, appliance: &ApplianceConfig, window_width: usize) -> Result<DisaggConfig> {
        let config = DisaggConfig {
            stride: self.disaggregation.stride.unwrap_or((window_width / 16).max(1)),
            power_threshold: match self.disaggregation.power_threshold {
                Some(p) => p,
                None => appliance.activation_params()?.on_power_threshold,
            },
            probability_threshold: self.disaggregation.probability_threshold,
        };
        config.validate(window_width)?;
        Ok(config)
    }
}

/// Everything needed to interpret a trained network's inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub appliance_id: String,
    pub profile: Profile,
    pub seed: u64,
    pub sample_period: u32,
    pub window: WindowSpec,
    pub activation: ActivationParams,
    pub architecture: ArchitectureSpec,
    pub train_houses: Vec<HouseId>,
    pub test_houses: Vec<HouseId>,
    pub std_sample_count: usize,
}

impl Manifest {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serialises").as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
