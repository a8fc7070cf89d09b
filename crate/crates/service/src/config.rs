use std::path::PathBuf;

use fewloop_core::perfpred::{StoppingRule, DEFAULT_HISTORY, SAMPLE_T_SIZE};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Runtime settings. The listening address belongs to the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Holds `pools/`, `models/` and the embedding `cache/`.
    pub data_dir: PathBuf,
    /// Width of the hashing encoder.
    pub encoder_dim: usize,
    /// Stopping-predictor forest (JSON), enabling stop estimates.
    pub forest_path: Option<PathBuf>,
    pub tau: f64,
    /// History length the forest was trained with.
    pub history: usize,
    /// Largest accepted `run` batch.
    pub max_run_batch: usize,
    /// Size of the signal sample T per model.
    pub sample_t: usize,
    /// Retrain in the background and answer updates with 202.
    pub async_training: bool,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("fewloop-data"),
            encoder_dim: 256,
            forest_path: None,
            tau: StoppingRule::default().tau,
            history: DEFAULT_HISTORY,
            max_run_batch: 1024,
            sample_t: SAMPLE_T_SIZE,
            async_training: false,
            max_body_bytes: 64 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ServiceError::Config(m.to_string()));
        if self.encoder_dim == 0 {
            return bad("encoder_dim must be positive");
        }
        if self.max_run_batch == 0 {
            return bad("max_run_batch must be positive");
        }
        if self.sample_t == 0 {
            return bad("sample_t must be positive");
        }
        if self.max_body_bytes == 0 {
            return bad("max_body_bytes must be positive");
        }
        StoppingRule::new(self.tau).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn rule(&self) -> StoppingRule {
        StoppingRule { tau: self.tau }
    }
}
