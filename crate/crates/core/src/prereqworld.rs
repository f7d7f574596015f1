//! PrereqWorld: a production-task MDP with `m` items, a prerequisite DAG
//! and probabilistic consumption of prerequisites.
//!
//! Items are numbered in topological order, so every prerequisite of item
//! `j` has an id greater than `j`. Feature `f_j` records whether item `j`
//! is held and action `a_j` attempts to produce it. The goal item is
//! always item 1; any state holding it is terminal.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{
    Action, MdpError, OutcomeDistribution, State, TabularMdp, TabularPolicy, TransitionTuple,
};
use crate::formats::{check_schema_version, SCHEMA_VERSION};
use crate::solver::{self, DenseModel, SolverConfig, SolverError};

pub const GOAL_ITEM: usize = 1;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("instance generation exhausted after {attempts} attempts (last expected length {last_expected:.3}, window {low:.3}..={high:.3})")]
    GenerationExhausted {
        attempts: usize,
        last_expected: f64,
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainFile", into = "DomainFile")]
pub struct PrereqWorld {
    m: usize,
    rho: f64,
    /// `prereqs[j - 1]` is `C_j`.
    prereqs: Vec<BTreeSet<usize>>,
}

/// On-disk layout: `{"m": 4, "rho": 0.0, "goal": 1, "prereqs": {"1": [3, 4], ...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DomainFile {
    #[serde(default = "default_schema_version")]
    schema_version: String,
    m: usize,
    rho: f64,
    goal: usize,
    prereqs: BTreeMap<String, Vec<usize>>,
}

fn default_schema_version() -> String {
    SCHEMA_VERSION.to_string()
}

impl TryFrom<DomainFile> for PrereqWorld {
    type Error = MdpError;

    fn try_from(file: DomainFile) -> Result<Self, Self::Error> {
        check_schema_version(&file.schema_version).map_err(|e| MdpError::InvalidDomain(e.to_string()))?;
        if file.goal != GOAL_ITEM {
            return Err(MdpError::InvalidDomain(format!(
                "goal must be item {GOAL_ITEM}, found {}",
                file.goal
            )));
        }
        let mut prereqs = vec![Vec::new(); file.m];
        for (key, items) in file.prereqs {
            let j: usize = key
                .parse()
                .map_err(|_| MdpError::InvalidDomain(format!("bad item id {key:?}")))?;
            if j == 0 || j > file.m {
                return Err(MdpError::InvalidDomain(format!("item {j} outside 1..={}", file.m)));
            }
            prereqs[j - 1] = items;
        }
        PrereqWorld::new(file.m, file.rho, prereqs)
    }
}

impl From<PrereqWorld> for DomainFile {
    fn from(dom: PrereqWorld) -> Self {
        DomainFile {
            schema_version: SCHEMA_VERSION.to_string(),
            m: dom.m,
            rho: dom.rho,
            goal: GOAL_ITEM,
            prereqs: dom
                .prereqs
                .iter()
                .enumerate()
                .map(|(i, c)| ((i + 1).to_string(), c.iter().copied().collect()))
                .collect(),
        }
    }
}

impl PrereqWorld {
    /// `prereqs[j - 1]` lists `C_j`; every member must exceed `j`.
    pub fn new(m: usize, rho: f64, prereqs: Vec<Vec<usize>>) -> Result<Self, MdpError> {
        if m < 1 || m > 63 {
            return Err(MdpError::InvalidDomain(format!("item count {m} outside 1..=63")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(MdpError::InvalidDomain(format!("rho {rho} outside [0, 1]")));
        }
        if prereqs.len() != m {
            return Err(MdpError::InvalidDomain(format!(
                "expected {m} prerequisite sets, found {}",
                prereqs.len()
            )));
        }
        let mut sets = Vec::with_capacity(m);
        for (i, items) in prereqs.into_iter().enumerate() {
            let j = i + 1;
            let set: BTreeSet<usize> = items.iter().copied().collect();
            if set.len() != items.len() {
                return Err(MdpError::InvalidDomain(format!("duplicate prerequisite in C_{j}")));
            }
            if let Some(&k) = set.iter().find(|&&k| k <= j || k > m) {
                return Err(MdpError::InvalidDomain(format!(
                    "prerequisite {k} of item {j} violates topological numbering (must be in {}..={m})",
                    j + 1
                )));
            }
            sets.push(set);
        }
        Ok(PrereqWorld { m, rho, prereqs: sets })
    }

    /// The four-item deterministic example: `C_1 = C_2 = {3, 4}`, `C_3 = {4}`.
    pub fn four_item() -> Self {
        Self::four_item_with_rho(0.0)
    }

    pub fn four_item_with_rho(rho: f64) -> Self {
        PrereqWorld::new(4, rho, vec![vec![3, 4], vec![3, 4], vec![4], vec![]]).expect("valid example")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn goal(&self) -> usize {
        GOAL_ITEM
    }

    /// `C_j` for a 1-based item id.
    pub fn prerequisites(&self, item: usize) -> &BTreeSet<usize> {
        &self.prereqs[item - 1]
    }

    pub fn num_edges(&self) -> usize {
        self.prereqs.iter().map(BTreeSet::len).sum()
    }

    fn check_action(&self, a: Action) -> Result<(), MdpError> {
        if a.id() > self.m {
            return Err(MdpError::UnknownAction {
                id: a.id() as i64,
                num_actions: self.m,
            });
        }
        Ok(())
    }

    fn check_state(&self, s: &State) -> Result<(), MdpError> {
        if s.width() != self.m {
            return Err(MdpError::WidthMismatch {
                index: 0,
                expected: self.m,
                found: s.width(),
            });
        }
        if self.is_terminal(s) {
            return Err(MdpError::TerminalState(*s));
        }
        Ok(())
    }

    /// Cost of a transition. Every action costs one unit, including the
    /// one that produces the goal, so `V(s) = -E[actions to goal]`.
    pub fn reward(&self, _s_next: &State) -> f64 {
        -1.0
    }

    /// Draws `s'` and packages the observed transition.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        s: &State,
        a: Action,
        rng: &mut R,
    ) -> Result<TransitionTuple, MdpError> {
        let dist = self.transition_distribution(s, a)?;
        let s_next = dist.pick(rng.gen::<f64>());
        Ok(TransitionTuple {
            s: *s,
            a,
            s_next,
            r: self.reward(&s_next),
            terminal: self.is_terminal(&s_next),
        })
    }

    /// Uniform draw over non-terminal states (rejection from uniform bit patterns).
    pub fn sample_start_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let mask = (1u64 << self.m) - 1;
        loop {
            let s = State::from_index(rng.gen::<u64>() & mask, self.m);
            if !self.is_terminal(&s) {
                return s;
            }
        }
    }

    /// Items the goal transitively depends on, including the goal itself.
    fn goal_ancestry(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([GOAL_ITEM]);
        let mut stack = vec![GOAL_ITEM];
        while let Some(j) = stack.pop() {
            for &k in &self.prereqs[j - 1] {
                if seen.insert(k) {
                    stack.push(k);
                }
            }
        }
        seen
    }

    /// Mean optimal number of actions to the goal from a uniform
    /// non-terminal start.
    pub fn optimal_expected_steps(&self) -> Result<f64, SolverError> {
        let model = DenseModel::build(self)?;
        let (values, _) = model.value_iteration(&SolverConfig::default())?;
        let starts = self.non_terminal_states();
        let total: f64 = starts.iter().map(|s| -values[s.index() as usize]).sum();
        Ok(total / starts.len() as f64)
    }
}

impl TabularMdp for PrereqWorld {
    fn num_features(&self) -> usize {
        self.m
    }

    fn num_actions(&self) -> usize {
        self.m
    }

    fn is_terminal(&self, s: &State) -> bool {
        s.get(GOAL_ITEM)
    }

    /// Producing an item already held, or one with a missing prerequisite,
    /// leaves the state unchanged. Otherwise the item is set and each
    /// prerequisite is independently kept with probability `rho`.
    fn transition_distribution(&self, s: &State, a: Action) -> Result<OutcomeDistribution, MdpError> {
        self.check_state(s)?;
        self.check_action(a)?;
        let item = a.id();
        let prereqs = &self.prereqs[item - 1];
        if s.get(item) || prereqs.iter().any(|&k| !s.get(k)) {
            return Ok(OutcomeDistribution::point(*s));
        }
        let produced = s.with(item, true);
        let items: Vec<usize> = prereqs.iter().copied().collect();
        let outcomes = (0..1u64 << items.len()).map(|kept_mask| {
            let mut next = produced;
            let mut p = 1.0;
            for (bit, &k) in items.iter().enumerate() {
                if kept_mask >> bit & 1 == 1 {
                    p *= self.rho;
                } else {
                    p *= 1.0 - self.rho;
                    next = next.with(k, false);
                }
            }
            (next, p)
        });
        Ok(OutcomeDistribution::from_entries(outcomes))
    }

    fn reward(&self, _s: &State, _a: Action, s_next: &State) -> f64 {
        PrereqWorld::reward(self, s_next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationOptions {
    /// Target expected length as a multiple of `m`.
    pub target_factor: f64,
    /// Accepted relative deviation from the target.
    pub tolerance: f64,
    /// Edge additions tried before giving up; `None` means `50 * m`.
    pub max_attempts: Option<usize>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            target_factor: 2.0,
            tolerance: 0.10,
            max_attempts: None,
        }
    }
}

/// Generates a random instance whose optimal expected episode length from
/// a uniform non-terminal start lies within `tolerance * 2m` of `2m`.
///
/// Prerequisite edges are added one at a time: item `j` uniform, then `k > j`
/// uniform, redrawing duplicates. After each addition the expected length
/// is recomputed; an addition that overshoots the window is undone.
pub fn generate_instance<R: Rng + ?Sized>(
    m: usize,
    rho: f64,
    rng: &mut R,
    options: &GenerationOptions,
) -> Result<PrereqWorld, DomainError> {
    if m < 2 {
        return Err(MdpError::InvalidDomain(format!("generation needs m >= 2, got {m}")).into());
    }
    let target = options.target_factor * m as f64;
    let low = target - options.tolerance * target;
    let high = target + options.tolerance * target;
    let max_attempts = options.max_attempts.unwrap_or(50 * m);
    let max_edges = m * (m - 1) / 2;

    let mut dom = PrereqWorld::new(m, rho, vec![Vec::new(); m])?;
    let mut expected = dom.optimal_expected_steps()?;
    let mut attempts = 0;
    while attempts < max_attempts {
        if expected >= low && expected <= high {
            return Ok(dom);
        }
        if dom.num_edges() == max_edges {
            break;
        }
        let (j, k) = loop {
            let j = rng.gen_range(1..m);
            let k = rng.gen_range(j + 1..=m);
            if !dom.prereqs[j - 1].contains(&k) {
                break (j, k);
            }
        };
        attempts += 1;
        // an item outside the goal's ancestry is never produced, so a new
        // prerequisite on it cannot change the optimal expected length
        let relevant = dom.goal_ancestry().contains(&j);
        dom.prereqs[j - 1].insert(k);
        if !relevant {
            continue;
        }
        let next = dom.optimal_expected_steps()?;
        if next > high {
            dom.prereqs[j - 1].remove(&k);
        } else {
            expected = next;
        }
    }
    if expected >= low && expected <= high {
        return Ok(dom);
    }
    Err(DomainError::GenerationExhausted {
        attempts,
        last_expected: expected,
        low,
        high,
    })
}

/// Expected number of actions to termination under `policy`, averaged over
/// the uniform non-terminal start distribution.
pub fn expected_steps(dom: &PrereqWorld, policy: &TabularPolicy) -> Result<f64, SolverError> {
    let steps = solver::steps_to_absorption(dom, policy)?;
    Ok(steps.values().sum::<f64>() / steps.len() as f64)
}

/// Expected number of actions to termination from a single start state.
pub fn expected_steps_from(
    dom: &PrereqWorld,
    policy: &TabularPolicy,
    start: &State,
) -> Result<f64, SolverError> {
    if dom.is_terminal(start) {
        return Ok(0.0);
    }
    let steps = solver::steps_to_absorption(dom, policy)?;
    Ok(steps[start])
}
