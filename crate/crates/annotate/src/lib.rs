//! Local HTTP backend for the two-step selection protocol: volunteers pick
//! the best parameter setting of each method, then the best of those seven
//! finalists. Final votes are appended to the dataset's vote log before they
//! are acknowledged. Endpoints are documented in `API.md`.

mod assign;
mod clock;
mod service;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assign::{assign, Assignment};
pub use clock::{Clock, ManualClock, SystemClock};
pub use service::{router, serve, Service};

/// Shown to volunteers before they start and available at any time.
pub const INSTRUCTIONS: [&str; 3] = [
    "Strong edges should be preserved and blurry effects at significant edges are extremely undesired.",
    "The color of a smoothed image should be as close to the original image as possible.",
    "Under instructions 1 and 2, the smoother, the better.",
];

pub const DAY_MS: u64 = 86_400_000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] smoothbench::dataset::DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volunteer {
    pub id: String,
    /// Bearer token the volunteer authenticates with.
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub seed: u64,
    /// Distinct volunteers per image; the manifest's value when absent.
    pub votes_per_image: Option<usize>,
    /// Active time allowed per volunteer per UTC day.
    pub session_minutes: u64,
    /// Gaps between requests longer than this count as a break, not as
    /// active time.
    pub idle_minutes: u64,
    pub volunteers: Vec<Volunteer>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            votes_per_image: None,
            session_minutes: 60,
            idle_minutes: 5,
            volunteers: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServiceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), ServiceError> {
        let mut ids = std::collections::HashSet::new();
        let mut tokens = std::collections::HashSet::new();
        for v in &self.volunteers {
            if v.id.is_empty() || v.token.is_empty() {
                return Err(ServiceError::Config("volunteer ids and tokens must be non-empty".into()));
            }
            if !ids.insert(&v.id) {
                return Err(ServiceError::Config(format!("volunteer {} is listed twice", v.id)));
            }
            if !tokens.insert(&v.token) {
                return Err(ServiceError::Config(format!("volunteer {} reuses a token", v.id)));
            }
        }
        if self.session_minutes == 0 {
            return Err(ServiceError::Config("session length must be positive".into()));
        }
        Ok(())
    }
}
