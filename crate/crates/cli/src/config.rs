//! Run configuration: a JSON file whose blocks mirror the subcommands.
//! Flags override file values, and the resolved configuration is hashed so
//! every artifact can name the exact settings that produced it.

use std::path::Path;

use cers_core::bags::SyntheticSpec;
use cers_core::metrics::BootstrapConfig;
use cers_core::mil::{MilArch, TrainConfig};
use cers_core::open_set::ArplConfig;
use cers_core::tiler::{GridParams, RefineParams, SamplingStrategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "CERS_SEED";
pub const THREADS_ENV: &str = "CERS_THREADS";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub tile: TileBlock,
    pub synth: SynthBlock,
    pub mil: MilBlock,
    pub arpl: ArplBlock,
    pub probe: ProbeBlock,
    pub eval: EvalBlock,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileBlock {
    pub grid: GridParams,
    pub refine: RefineParams,
    pub sample: Option<SamplingStrategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBlock {
    pub bags_per_class: usize,
    pub instances_per_bag: usize,
    pub dim: usize,
    pub signal_instances: usize,
    pub separation: f64,
    pub ood_shift: f64,
    pub ood_bags: usize,
}

impl Default for SynthBlock {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SynthBlock {
            bags_per_class: s.bags_per_class,
            instances_per_bag: s.instances_per_bag,
            dim: s.dim,
            signal_instances: s.signal_instances,
            separation: s.separation,
            ood_shift: s.ood_shift,
            ood_bags: s.ood_bags,
        }
    }
}

impl SynthBlock {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            bags_per_class: self.bags_per_class,
            instances_per_bag: self.instances_per_bag,
            dim: self.dim,
            signal_instances: self.signal_instances,
            separation: self.separation,
            ood_shift: self.ood_shift,
            ood_bags: self.ood_bags,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilBlock {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub test_fold: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub multi_branch: bool,
}

impl Default for MilBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = MilArch::default();
        MilBlock {
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            folds: 5,
            test_fold: 0,
            latent_dim: a.latent_dim,
            hidden_dim: a.hidden_dim,
            dropout: a.dropout,
            multi_branch: a.multi_branch,
        }
    }
}

impl MilBlock {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }

    pub fn arch(&self, in_dim: usize, n_classes: usize) -> MilArch {
        MilArch {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            multi_branch: self.multi_branch,
            ..MilArch::with_input(in_dim, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 3 {
            return Err(CliError::Config(format!("mil.folds must be at least 3, got {}", self.folds)));
        }
        if self.test_fold >= self.folds {
            return Err(CliError::Config(format!(
                "mil.test_fold {} out of range for {} folds",
                self.test_fold, self.folds
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CliError::Config("mil.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArplBlock {
    pub gamma: f64,
    pub lambda_o: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub joint: bool,
    pub body_learning_rate: f64,
    pub n_bootstrap: usize,
}

impl Default for ArplBlock {
    fn default() -> Self {
        let a = ArplConfig::default();
        ArplBlock {
            gamma: a.gamma,
            lambda_o: a.lambda_o,
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: a.batch_size,
            joint: a.joint,
            body_learning_rate: a.body_learning_rate,
            n_bootstrap: 1000,
        }
    }
}

impl ArplBlock {
    pub fn arpl_config(&self, seed: u64) -> ArplConfig {
        ArplConfig {
            gamma: self.gamma,
            lambda_o: self.lambda_o,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            joint: self.joint,
            body_learning_rate: self.body_learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeBlock {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeBlock {
    fn default() -> Self {
        let p = cers_core::adapters::ProbeConfig::new(1, 2);
        ProbeBlock {
            learning_rate: p.learning_rate,
            max_epochs: p.max_epochs,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub metrics: Vec<String>,
    pub n_bootstrap: usize,
    pub level: f64,
    pub sensitivity_target: f64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            metrics: ["bacc", "auc", "f1", "sensitivity", "specificity"]
                .map(String::from)
                .to_vec(),
            n_bootstrap: 1000,
            level: 0.95,
            sensitivity_target: 0.8,
        }
    }
}

impl EvalBlock {
    pub fn bootstrap(&self, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            n_boot: self.n_bootstrap,
            seed,
            level: self.level,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Seed precedence: flag, then config file, then `CERS_SEED`, then 42.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => DEFAULT_SEED,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Thread cap from `CERS_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}
