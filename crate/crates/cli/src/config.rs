//! Pipeline configuration: profile defaults, JSON overrides, seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aerorom::aero::SolverSettings;
use aerorom::cnn::{Architecture, Target, TrainConfig};
use aerorom::geometry::BoundsConfig;
use aerorom::levelset::GridSpec;
use aerorom::optimizer::WingSettings;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const WORKSPACE_ENV: &str = "AEROROM_WORKSPACE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(CliError::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub workspace: PathBuf,
    /// The remaining paths are relative to the workspace.
    pub dataset: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            workspace: PathBuf::from("aerorom-workspace"),
            dataset: PathBuf::from("dataset"),
            models: PathBuf::from("models"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub samples: usize,
    /// Planned train/val/test sizes; scaled down if some designs fail.
    pub split: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    /// Number of starts drawn from the test split.
    pub starts: usize,
    pub wing: WingSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub paths: Paths,
    pub bounds: BoundsConfig,
    pub grid: GridSpec,
    pub solver: SolverSettings,
    pub campaign: CampaignConfig,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub optimizer: OptimizeConfig,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (campaign, training, starts) = match profile {
            Profile::Paper => (
                CampaignConfig {
                    samples: 17_500,
                    split: [15_000, 1_500, 1_000],
                },
                TrainConfig::default(),
                50,
            ),
            Profile::Desk => (
                CampaignConfig {
                    samples: 2_000,
                    split: [1_600, 200, 200],
                },
                TrainConfig {
                    initial_lr: 2.5e-4,
                    lr_decay: 0.9,
                    epochs: 20,
                    batch_size: 25,
                    seed: 0,
                },
                10,
            ),
        };
        PipelineConfig {
            version: CONFIG_VERSION,
            profile,
            seed: 0,
            paths: Paths::default(),
            bounds: BoundsConfig::default(),
            grid: GridSpec::default(),
            solver: SolverSettings::default(),
            campaign,
            architecture: Architecture::default(),
            training,
            optimizer: OptimizeConfig {
                starts,
                wing: WingSettings::default(),
            },
        }
    }

    /// Resolve the effective configuration: profile defaults (flag, then
    /// file, then desk), overlaid by the file, then the seed flag and the
    /// workspace environment variable.
    pub fn resolve(
        file: Option<&Path>,
        profile: Option<Profile>,
        seed: Option<u64>,
        workspace_env: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
                }
                Some(v)
            }
            None => None,
        };
        let file_profile = match overlay.as_ref().and_then(|v| v.get("profile")) {
            Some(p) => Some(
                serde_json::from_value::<Profile>(p.clone())
                    .map_err(|e| CliError::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut base = serde_json::to_value(PipelineConfig::for_profile(profile)).expect("config serializes");
        if let Some(mut v) = overlay {
            // an explicit flag wins over the file's profile
            v["profile"] = serde_json::to_value(profile).expect("profile serializes");
            merge(&mut base, v);
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(base).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(w) = workspace_env {
            cfg.paths.workspace = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: aerorom::Error| CliError::Config(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("unsupported config version {}", self.version)));
        }
        self.bounds.validate().map_err(bad)?;
        self.grid.validate().map_err(bad)?;
        self.architecture.validate().map_err(bad)?;
        self.architecture.block_dims(self.grid.dims).map_err(bad)?;
        self.training.validate().map_err(bad)?;
        self.optimizer.wing.validate().map_err(bad)?;
        if self.campaign.samples == 0 {
            return Err(CliError::Config("campaign needs at least one sample".into()));
        }
        if self.campaign.split.iter().sum::<usize>() != self.campaign.samples {
            return Err(CliError::Config(format!(
                "split {:?} does not sum to {} samples",
                self.campaign.split, self.campaign.samples
            )));
        }
        if self.solver.panels < 8 || self.solver.stations == 0 || self.solver.coeffs != self.solver.stations {
            return Err(CliError::Config(
                "solver needs at least 8 panels and as many coefficients as stations".into(),
            ));
        }
        Ok(())
    }

    pub fn workspace(&self) -> &Path {
        &self.paths.workspace
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.workspace.join(&self.paths.dataset)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.paths.workspace.join(&self.paths.models)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.workspace.join(&self.paths.reports)
    }

    pub fn checkpoint_path(&self, target: Target) -> PathBuf {
        self.models_dir().join(format!("{}.ckpt", target.label()))
    }
}

/// Independent seed streams derived from the pipeline seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Sampling,
    Split,
    Init(Target),
    Shuffle(Target),
    Starts,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let tag: u64 = match stream {
        SeedStream::Sampling => 1,
        SeedStream::Split => 2,
        SeedStream::Init(Target::Cl) => 3,
        SeedStream::Init(Target::Cdi) => 4,
        SeedStream::Shuffle(Target::Cl) => 5,
        SeedStream::Shuffle(Target::Cdi) => 6,
        SeedStream::Starts => 7,
    };
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Recursively overlay `patch` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
