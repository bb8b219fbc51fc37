//! Run configuration: one structured TOML file covering every subsystem.
//!
//! Unknown keys are rejected; missing keys take the documented defaults.
//! The top-level `master_seed` is propagated into the dataset and training
//! sections so a whole run is reproducible from a single number; command-line
//! flags override individual values for sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dpbridge::dataset::ScenarioConfig;
use dpbridge::sampler::GMode;
use dpbridge::schedule::ScheduleParams;
use dpbridge::trainer::TrainConfig;
use dpbridge::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub factor: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection { factor: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n_steps: usize,
    /// "markov", "deterministic", or "scaled" (uses `eta`).
    pub g_mode: String,
    pub eta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_steps: 50,
            g_mode: "deterministic".into(),
            eta: 1.0,
        }
    }
}

impl SamplerSection {
    pub fn g_mode(&self) -> Result<GMode> {
        match self.g_mode.as_str() {
            "markov" => Ok(GMode::Markov),
            "deterministic" => Ok(GMode::Deterministic),
            "scaled" => Ok(GMode::Scaled(self.eta)),
            other => Err(Error::Config(format!("unknown g_mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test-split samples evaluated per row.
    pub n_eval: usize,
    pub sweep_steps: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_eval: 64,
            sweep_steps: vec![1, 2, 5, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: Option<u64>,
    pub task: Option<String>,
    pub schedule: ScheduleParams,
    pub dataset: ScenarioConfig,
    pub codec: CodecSection,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    /// Push the master seed into every section that owns one.
    pub fn propagate_seed(&mut self) {
        if let Some(seed) = self.master_seed {
            self.dataset.master_seed = seed;
            self.train.seed = seed;
        }
    }
}
