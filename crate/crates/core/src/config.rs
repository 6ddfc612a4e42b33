//! Run configuration: a TOML file with `dataset`, `model`, `training`,
//! `eval` and `paths` sections. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::datasets::CorruptionKind;
use crate::error::{DrueError, Result};
use crate::training::TrainConfig;
use crate::uncertainty::UncertaintyMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub ladder_kinds: Vec<CorruptionKind>,
    pub ladder_severities: Vec<f64>,
    /// Image folders evaluated as extra OOD datasets, one rung each.
    pub external: Vec<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            image_size: 64,
            seed: 0,
            ladder_kinds: CorruptionKind::ALL.to_vec(),
            ladder_severities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            external: Vec::new(),
        }
    }
}

/// Optimiser settings of one stage; the seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl StageSection {
    fn new(learning_rate: f64, batch_size: usize, max_epochs: usize, patience: usize) -> Self {
        Self {
            learning_rate,
            batch_size,
            max_epochs,
            patience,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub classifier: StageSection,
    pub g1: StageSection,
    pub g0: StageSection,
    /// Keep the shared decoder tail at its `G1` values while training `g0`.
    pub freeze: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            classifier: StageSection::new(3e-4, 4, 10, 3),
            g1: StageSection::new(1e-3, 8, 15, 3),
            g0: StageSection::new(1e-4, 8, 20, 3),
            freeze: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Training seeds; each gets its own set of checkpoints.
    pub seeds: Vec<u64>,
    /// Method labels: `drue`, `rue`, `rue_penultimate`, `entropy`, `mc_dropout`.
    pub methods: Vec<String>,
    pub mc_passes: usize,
    pub mc_rate: f64,
    pub bins: usize,
    pub theory_scales: Vec<f64>,
    /// Test images probed by the DRUE-vs-JVP check.
    pub theory_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            methods: ["drue", "rue", "rue_penultimate", "entropy", "mc_dropout"]
                .map(String::from)
                .to_vec(),
            mc_passes: UncertaintyMethod::DEFAULT_MC_PASSES,
            mc_rate: UncertaintyMethod::DEFAULT_MC_RATE,
            bins: crate::evaluation::DEFAULT_BINS,
            theory_scales: vec![1e-1, 1e-2, 1e-3],
            theory_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: EncoderConfig,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| DrueError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| DrueError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            DrueError::Config(m) => DrueError::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Canonical serialization; the config hash and the run-directory
    /// snapshot are both taken from it.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| DrueError::config(format!("cannot serialize config: {e}")))
    }

    /// Hash of the experiment. `paths` is left out so that the same
    /// configuration run in two directories reports the same hash.
    pub fn hash(&self) -> Result<String> {
        let experiment = RunConfig {
            paths: PathsSection::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(experiment.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// `--seed N`: one run seed, used for the data and every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.eval.seeds = vec![seed];
    }

    pub fn methods(&self) -> Result<Vec<UncertaintyMethod>> {
        self.eval
            .methods
            .iter()
            .map(|m| UncertaintyMethod::from_label(m, self.eval.mc_passes, self.eval.mc_rate))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.image_size != self.dataset.image_size {
            return Err(DrueError::config(format!(
                "model.image_size {} differs from dataset.image_size {}",
                self.model.image_size, self.dataset.image_size
            )));
        }
        if self.dataset.n_per_class < 5 {
            return Err(DrueError::config("dataset.n_per_class must be at least 5"));
        }
        if self.dataset.ladder_kinds.is_empty() || self.dataset.ladder_severities.is_empty() {
            return Err(DrueError::config(
                "the ladder needs at least one kind and one severity",
            ));
        }
        if self
            .dataset
            .ladder_severities
            .windows(2)
            .any(|w| w[0] >= w[1])
            || self
                .dataset
                .ladder_severities
                .iter()
                .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(DrueError::config(
                "ladder_severities must be strictly increasing within [0, 1]",
            ));
        }
        for s in [
            &self.training.classifier,
            &self.training.g1,
            &self.training.g0,
        ] {
            s.train_config(0).validate()?;
        }
        if self.eval.seeds.is_empty() {
            return Err(DrueError::config("eval.seeds must not be empty"));
        }
        let mut seen = self.eval.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.eval.seeds.len() {
            return Err(DrueError::config("eval.seeds contains duplicates"));
        }
        if self.eval.methods.is_empty() {
            return Err(DrueError::config("eval.methods must not be empty"));
        }
        let methods = self.methods()?;
        let mut labels: Vec<String> = methods.iter().map(|m| m.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != methods.len() {
            return Err(DrueError::config("eval.methods contains duplicates"));
        }
        if self.eval.mc_passes == 0 || !(0.0..1.0).contains(&self.eval.mc_rate) {
            return Err(DrueError::config(
                "mc_passes must be positive and mc_rate in [0, 1)",
            ));
        }
        if self.eval.bins == 0 {
            return Err(DrueError::config("eval.bins must be positive"));
        }
        if self
            .eval
            .theory_scales
            .iter()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(DrueError::config("theory_scales must be positive"));
        }
        Ok(())
    }
}
