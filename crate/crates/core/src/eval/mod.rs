//! Seeded experiment harness: instance preparation, configuration, and
//! the generalization, n-hop and size experiments.

pub mod experiments;
pub mod oracle;
pub mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apg::ApgError;
use crate::formats::{FormatError, SCHEMA_VERSION};
use crate::mdp::MdpError;
use crate::prereqworld::{generate_instance, DomainError, GenerationOptions, PrereqWorld};
use crate::seed::SeedStream;
use crate::solver::{min_action_gap, solve, Solution, SolverConfig, SolverError};

pub use experiments::{
    run_generalization, run_nhop, run_size, write_csv, GeneralizationInstanceRow, GeneralizationResult,
    GeneralizationRow, NhopInstanceRow, NhopResult, NhopRow, SizeInstanceRow, SizeResult, SizeRow,
};

/// Fresh generation streams tried per instance before giving up.
pub const GENERATION_RETRIES: u64 = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Apg(#[from] ApgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the FIRM split threshold is chosen per instance. Experiments default
/// to an explicit 1, the unit step cost of PrereqWorld; on stochastic
/// instances the smallest Q gap is usually far below that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EpsilonMode {
    /// The solved instance's smallest best-vs-second-best Q gap.
    Gap,
    Explicit { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Generalization,
    Nhop,
    Size,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: String,
    pub m: usize,
    pub rho: f64,
    pub num_instances: usize,
    /// Evaluation states per instance.
    pub num_evals: usize,
    /// Fractions of non-terminal states given to the APG builder. The n-hop
    /// and size experiments use the first entry.
    pub coverage: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
    pub epsilon: EpsilonMode,
    /// Domain sizes for the size experiment.
    pub m_values: Vec<usize>,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            schema_version: SCHEMA_VERSION.to_string(),
            m: 12,
            rho: 0.0,
            num_instances: 10,
            num_evals: 200,
            coverage: vec![0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            horizon: 10,
            seed: 0,
            epsilon: EpsilonMode::Explicit { value: 1.0 },
            m_values: (7..=14).collect(),
        };
        match kind {
            ExperimentKind::Generalization => base,
            ExperimentKind::Nhop => ExperimentConfig {
                rho: 0.1,
                coverage: vec![0.5],
                ..base
            },
            ExperimentKind::Size => ExperimentConfig {
                coverage: vec![0.5],
                ..base
            },
        }
    }

    /// Reads a partial JSON object; absent keys take the defaults of `kind`.
    pub fn from_json(kind: ExperimentKind, text: &str) -> Result<Self, EvalError> {
        let overlay: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        let serde_json::Value::Object(overlay) = overlay else {
            return Err(EvalError::Config("expected a JSON object".into()));
        };
        let mut merged = serde_json::to_value(Self::defaults(kind)).expect("config serializes");
        let target = merged.as_object_mut().expect("config is an object");
        for (key, value) in overlay {
            if !target.contains_key(&key) {
                return Err(EvalError::Config(format!("unknown key {key:?}")));
            }
            target.insert(key, value);
        }
        let config: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| EvalError::Config(e.to_string()))?;
        crate::formats::check_schema_version(&config.schema_version)?;
        config.validate()?;
        Ok(config)
    }

    /// Large-scale settings: m = 15, 100 instances, 1000 evaluation states.
    pub fn full_scale(self) -> Self {
        ExperimentConfig {
            m: 15,
            num_instances: 100,
            num_evals: 1000,
            m_values: (7..=15).collect(),
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: String| Err(EvalError::Config(msg));
        if !(2..=30).contains(&self.m) {
            return bad(format!("m = {} outside 2..=30", self.m));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if self.num_instances == 0 || self.num_evals == 0 {
            return bad("num_instances and num_evals must be positive".into());
        }
        if self.coverage.is_empty() || self.coverage.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return bad("coverage levels must lie in (0, 1]".into());
        }
        if let EpsilonMode::Explicit { value } = self.epsilon {
            if !(value > 0.0) {
                return bad(format!("epsilon {value} must be positive"));
            }
        }
        if self.m_values.iter().any(|m| !(2..=30).contains(m)) {
            return bad("m_values must lie in 2..=30".into());
        }
        Ok(())
    }
}

/// A generated, solved domain with its own seed stream.
#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub domain: PrereqWorld,
    pub solution: Solution,
    pub epsilon: f64,
    pub stream: SeedStream,
}

/// Generates and solves instance `index`, moving to a fresh generation
/// stream whenever the edge budget runs out.
pub fn prepare_instance(
    m: usize,
    rho: f64,
    epsilon: EpsilonMode,
    stream: SeedStream,
    index: usize,
) -> Result<Instance, EvalError> {
    let mut last = None;
    for retry in 0..GENERATION_RETRIES {
        let mut rng = stream.rng("domain", retry);
        match generate_instance(m, rho, &mut rng, &GenerationOptions::default()) {
            Ok(domain) => {
                let solution = solve(&domain, &SolverConfig::default())?;
                let epsilon = match epsilon {
                    EpsilonMode::Explicit { value } => value,
                    EpsilonMode::Gap => min_action_gap(&solution.q)?,
                };
                return Ok(Instance {
                    index,
                    domain,
                    solution,
                    epsilon,
                    stream,
                });
            }
            Err(e @ DomainError::GenerationExhausted { .. }) => {
                log::debug!("instance {index}: generation retry {retry}: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt").into())
}
