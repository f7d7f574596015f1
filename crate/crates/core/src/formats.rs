//! Versioned on-disk formats shared by the library and the command line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{TabularPolicy, TabularValueFunction};

/// Written into every object-rooted JSON file; readers accept any `1.x`.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("unsupported schema version {found:?} (this build reads {SCHEMA_VERSION})")]
    SchemaVersion { found: String },
}

pub fn check_schema_version(found: &str) -> Result<(), FormatError> {
    let major = found.split('.').next().unwrap_or_default();
    let ours = SCHEMA_VERSION.split('.').next().unwrap_or_default();
    if major == ours {
        Ok(())
    } else {
        Err(FormatError::SchemaVersion {
            found: found.to_string(),
        })
    }
}

/// Output of `solve`: a greedy policy and its value table, keyed by state
/// strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub schema_version: String,
    pub gamma: f64,
    /// Smallest best-vs-second-best action-value gap, when defined.
    pub min_action_gap: Option<f64>,
    pub policy: TabularPolicy,
    pub value: TabularValueFunction,
}
