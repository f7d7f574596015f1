//! Abstracted policy graphs for deterministic policies over binary-feature
//! MDPs, the PrereqWorld benchmark domain, a tabular solver, and an
//! experiment harness.
//!
//! Typical pipeline:
//!
//! ```
//! use apg_core::prelude::*;
//!
//! let dom = PrereqWorld::four_item();
//! let sol = solve(&dom, &SolverConfig::default()).unwrap();
//! let tuples = exhaustive_transitions(&dom, &sol.policy, &mut SeedStream::new(0).rng("t", 0)).unwrap();
//! let division = divide_abstract_states(&tuples, &sol.policy, |s| sol.values.value(s).unwrap(), 1.0).unwrap();
//! let apg = build_graph(&division, &sol.policy).unwrap();
//! assert!(apg.stochasticity_error() < 1e-9);
//! ```

pub mod apg;
pub mod dot;
pub mod eval;
pub mod firm;
pub mod formats;
pub mod manifest;
pub mod mdp;
pub mod prereqworld;
pub mod seed;
pub mod solver;

pub mod prelude {
    pub use crate::apg::{build_graph, divide_abstract_states, filter_on_policy, Apg, ApgError, Division};
    pub use crate::eval::sampling::{exhaustive_transitions, sample_trajectories, sample_transition_set};
    pub use crate::firm::{firm_all_features, ImportanceVector};
    pub use crate::mdp::{
        Action, ActionDistribution, Outcome, State, TabularMdp, TabularPolicy, TabularValueFunction,
        TransitionTuple,
    };
    pub use crate::prereqworld::{expected_steps, generate_instance, GenerationOptions, PrereqWorld};
    pub use crate::seed::SeedStream;
    pub use crate::solver::{min_action_gap, solve, value_iteration, Solution, SolverConfig};
}
