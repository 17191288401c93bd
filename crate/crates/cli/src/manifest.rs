//! Run manifests embedded in every report: the command, its resolved flags,
//! and the artifact version. With `SOURCE_DATE_EPOCH` set, the timestamp is
//! taken from the environment so reruns are byte-identical.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Preset name or config file path.
    pub config: Option<String>,
    pub dataset: Option<String>,
    pub flags: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub artifact_version: String,
    /// Unix seconds; honors `SOURCE_DATE_EPOCH` for reproducible output.
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH").unwrap_or_else(|_| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_else(|_| "0".to_string())
        });
        Self {
            command: command.to_string(),
            config: None,
            dataset: None,
            flags: BTreeMap::new(),
            seed: None,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
        }
    }

    pub fn with_config(mut self, config: &str) -> Self {
        self.config = Some(config.to_string());
        self
    }

    pub fn with_dataset(mut self, dataset: &str) -> Self {
        self.dataset = Some(dataset.to_string());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.insert(key.to_string(), value.to_string());
        self
    }
}
