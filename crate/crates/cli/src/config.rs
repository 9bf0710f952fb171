//! One TOML file configures every pipeline stage. A master seed fans out
//! into per-stage child seeds, so a single number pins the whole
//! experiment and adding a stage never shifts another stage's stream.

use std::path::PathBuf;

use adlab_core::auction::RewardConfig;
use adlab_core::ddpg::DdpgConfig;
use adlab_core::es::EsConfig;
use adlab_core::market::MarketConfig;
use adlab_core::oracle::GridSpec;
use adlab_core::rng::child_seed;
use adlab_core::sim::SessionConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Transitions `simulate` rolls out for the offline dataset.
    pub dataset_transitions: usize,
    /// Impressions `calibrate` collects before fitting the rate maps.
    pub calibration_impressions: usize,
    pub market: MarketConfig,
    pub reward: RewardConfig,
    pub session: SessionConfig,
    pub grid: GridSpec,
    pub ddpg: DdpgConfig,
    pub es: EsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 42,
            output_dir: PathBuf::from("out"),
            dataset_transitions: 20_000,
            calibration_impressions: 10_000,
            market: MarketConfig::default(),
            reward: RewardConfig::default(),
            session: SessionConfig::default(),
            grid: GridSpec::default(),
            ddpg: DdpgConfig::default(),
            es: EsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Applies CLI overrides, then rewrites every nested seed as a child
    /// of the master seed. Seeds written in the TOML file are therefore
    /// ignored; vary `master_seed` (or pass `--seed`) instead.
    pub fn finalize(
        mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        single_thread: bool,
    ) -> Self {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        if single_thread {
            self.ddpg.workers = 1;
            self.es.threads = 1;
            self.grid.threads = 1;
        }
        self.market.seed = child_seed(self.master_seed, "cli-market", 0);
        self.session.seed = child_seed(self.master_seed, "cli-session", 0);
        self.ddpg.seed = child_seed(self.master_seed, "cli-ddpg", 0);
        self.es.seed = child_seed(self.master_seed, "cli-es", 0);
        self
    }

    pub fn dataset_seed(&self) -> u64 {
        child_seed(self.master_seed, "cli-dataset", 0)
    }

    pub fn calibration_seed(&self) -> u64 {
        child_seed(self.master_seed, "cli-calib", 0)
    }

    pub fn batch_variance_seed(&self, batch_size: usize) -> u64 {
        child_seed(self.master_seed, "cli-batch-var", batch_size as u64)
    }
}
