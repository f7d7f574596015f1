//! Exact references the APG predictions are scored against.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::apg::{build_graph, divide_abstract_states, Apg, ApgError};
use crate::mdp::{ActionDistribution, MdpError, Outcome, State, TabularMdp, TabularPolicy, TabularValueFunction};

use super::sampling::exhaustive_transitions;
use super::EvalError;

/// Exact distribution of the outcome `n` steps after `s0`, for every
/// `n` in `0..=horizon`, by pushing the start mass through the grounded
/// on-policy chain.
pub fn true_action_horizon<M: TabularMdp + ?Sized>(
    mdp: &M,
    policy: &TabularPolicy,
    s0: &State,
    horizon: usize,
) -> Result<Vec<ActionDistribution>, MdpError> {
    let mut mass: BTreeMap<State, f64> = BTreeMap::from([(*s0, 1.0)]);
    let mut terminated = 0.0;
    let mut out = Vec::with_capacity(horizon + 1);
    for step in 0..=horizon {
        if step > 0 {
            let mut next: BTreeMap<State, f64> = BTreeMap::new();
            for (s, p) in &mass {
                let a = policy.require(s)?;
                for &(s2, q) in mdp.transition_distribution(s, a)?.iter() {
                    if mdp.is_terminal(&s2) {
                        terminated += p * q;
                    } else {
                        *next.entry(s2).or_insert(0.0) += p * q;
                    }
                }
            }
            mass = next;
        }
        let mut dist = ActionDistribution::default();
        for (s, p) in &mass {
            dist.add(Outcome::Act(policy.require(s)?), *p);
        }
        dist.add(Outcome::Terminated, terminated);
        out.push(dist);
    }
    Ok(out)
}

pub fn true_action_distribution<M: TabularMdp + ?Sized>(
    mdp: &M,
    policy: &TabularPolicy,
    s0: &State,
    n: usize,
) -> Result<ActionDistribution, MdpError> {
    Ok(true_action_horizon(mdp, policy, s0, n)?.pop().expect("horizon is non-empty"))
}

/// Relevant-feature sets of every non-terminal state, read off a reference
/// APG built from one tuple per non-terminal state.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub apg: Apg,
    pub features: BTreeMap<State, BTreeSet<usize>>,
}

pub fn ground_truth_relevant_features<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    values: &TabularValueFunction,
    epsilon: f64,
    rng: &mut R,
) -> Result<GroundTruth, EvalError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    let tuples = exhaustive_transitions(mdp, policy, rng)?;
    let division = divide_abstract_states(&tuples, policy, |s| values.value(s).unwrap_or(f64::NAN), epsilon)?;
    let apg = build_graph(&division, policy)?;
    let features = mdp
        .non_terminal_states()
        .into_iter()
        .map(|s| Ok((s, apg.relevant_features(&s, policy)?)))
        .collect::<Result<BTreeMap<_, _>, ApgError>>()?;
    Ok(GroundTruth { apg, features })
}
