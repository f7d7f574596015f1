//! Transition-set construction for APG inputs.

use rand::seq::index;
use rand::Rng;

use crate::mdp::{MdpError, State, TabularMdp, TabularPolicy, TransitionTuple};

/// Upper bound on one episode's length in [`sample_trajectories`].
pub const MAX_EPISODE_LEN: usize = 100_000;

/// Draws `s'` from `P(.|s, pi(s))` and records the tuple.
pub fn sample_on_policy<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    s: &State,
    rng: &mut R,
) -> Result<TransitionTuple, MdpError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    let a = policy.require(s)?;
    let dist = mdp.transition_distribution(s, a)?;
    let s_next = dist.pick(rng.gen::<f64>());
    Ok(TransitionTuple {
        s: *s,
        a,
        s_next,
        r: mdp.reward(s, a, &s_next),
        terminal: mdp.is_terminal(&s_next),
    })
}

/// One on-policy tuple for each of `ceil(coverage * |non-terminal|)`
/// distinct non-terminal source states chosen uniformly at random.
pub fn sample_transition_set<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    coverage: f64,
    rng: &mut R,
) -> Result<Vec<TransitionTuple>, MdpError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    assert!(coverage > 0.0 && coverage <= 1.0, "coverage {coverage} outside (0, 1]");
    let states = mdp.non_terminal_states();
    let count = ((coverage * states.len() as f64).ceil() as usize).min(states.len());
    let picked = index::sample(rng, states.len(), count);
    picked
        .into_iter()
        .map(|i| sample_on_policy(mdp, policy, &states[i], rng))
        .collect()
}

/// One on-policy tuple per non-terminal state, in state order.
pub fn exhaustive_transitions<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    rng: &mut R,
) -> Result<Vec<TransitionTuple>, MdpError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    mdp.non_terminal_states()
        .iter()
        .map(|s| sample_on_policy(mdp, policy, s, rng))
        .collect()
}

fn uniform_start<M, R>(mdp: &M, rng: &mut R) -> State
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    let width = mdp.num_features();
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    loop {
        let s = State::from_index(rng.gen::<u64>() & mask, width);
        if !mdp.is_terminal(&s) {
            return s;
        }
    }
}

/// Concatenated on-policy episodes from uniform non-terminal starts,
/// truncated to exactly `max_tuples` tuples.
pub fn sample_trajectories<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    max_tuples: usize,
    rng: &mut R,
) -> Result<Vec<TransitionTuple>, MdpError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    assert!(max_tuples >= 1, "max_tuples must be at least 1");
    let mut out = Vec::with_capacity(max_tuples);
    while out.len() < max_tuples {
        let mut s = uniform_start(mdp, rng);
        let mut len = 0;
        loop {
            let t = sample_on_policy(mdp, policy, &s, rng)?;
            out.push(t);
            len += 1;
            if t.terminal || out.len() == max_tuples {
                break;
            }
            if len == MAX_EPISODE_LEN {
                log::warn!("episode from {} truncated after {len} steps", out[out.len() - len].s);
                break;
            }
            s = t.s_next;
        }
    }
    Ok(out)
}

/// Starts a trajectory at a fixed state; used to check rollouts.
pub fn rollout<M, R>(
    mdp: &M,
    policy: &TabularPolicy,
    start: State,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TransitionTuple>, MdpError>
where
    M: TabularMdp + ?Sized,
    R: Rng + ?Sized,
{
    let mut out = Vec::new();
    let mut s = start;
    while out.len() < max_len && !mdp.is_terminal(&s) {
        let t = sample_on_policy(mdp, policy, &s, rng)?;
        s = t.s_next;
        out.push(t);
    }
    Ok(out)
}
