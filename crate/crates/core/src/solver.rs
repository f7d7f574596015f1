//! Tabular value iteration, Q extraction, greedy policies and the
//! action-gap rule used to pick the splitting threshold.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::mdp::{Action, MdpError, State, TabularMdp, TabularPolicy, TabularValueFunction};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

/// Two action values closer than this are treated as tied by
/// [`min_action_gap`]. Values are only converged to about `DEFAULT_TOL`
/// times the expected horizon, so exact float equality is too strict.
pub const TIE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("value iteration did not converge within {sweeps} sweeps (residual {residual:e})")]
    Divergence { sweeps: usize, residual: f64 },
    #[error("policy is not proper: state {0} cannot reach a terminal state")]
    ImproperPolicy(State),
    #[error("action gap undefined: every state has all actions tied")]
    UndefinedGap,
    #[error("action gap needs at least two actions")]
    TooFewActions,
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
    #[error("value function has no entry for state {0}")]
    MissingValue(State),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 1.0,
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

impl SolverConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        SolverConfig {
            gamma,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SolverError::InvalidParameter(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidParameter(format!("tol {} must be > 0", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ActionRow {
    /// Expected immediate reward.
    reward: f64,
    /// Non-terminal successors by dense index.
    next: Vec<(u32, f64)>,
}

/// Dense tabulation of an enumerable MDP, indexed by packed state.
#[derive(Debug, Clone)]
pub(crate) struct DenseModel {
    width: usize,
    num_actions: usize,
    terminal: Vec<bool>,
    /// Empty for terminal states.
    rows: Vec<Vec<ActionRow>>,
}

impl DenseModel {
    pub(crate) fn build<M: TabularMdp + ?Sized>(mdp: &M) -> Result<Self, MdpError> {
        let width = mdp.num_features();
        let num_actions = mdp.num_actions();
        let n = 1usize << width;
        let terminal: Vec<bool> = (0..n)
            .map(|i| mdp.is_terminal(&State::from_index(i as u64, width)))
            .collect();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                if terminal[i] {
                    return Ok(Vec::new());
                }
                let s = State::from_index(i as u64, width);
                Action::all(num_actions)
                    .map(|a| {
                        let dist = mdp.transition_distribution(&s, a)?;
                        let mut reward = 0.0;
                        let mut next = Vec::with_capacity(dist.len());
                        for &(s2, p) in dist.iter() {
                            reward += p * mdp.reward(&s, a, &s2);
                            if !terminal[s2.index() as usize] {
                                next.push((s2.index() as u32, p));
                            }
                        }
                        Ok(ActionRow { reward, next })
                    })
                    .collect::<Result<Vec<_>, MdpError>>()
            })
            .collect::<Result<Vec<_>, MdpError>>()?;
        Ok(DenseModel {
            width,
            num_actions,
            terminal,
            rows,
        })
    }

    fn len(&self) -> usize {
        self.terminal.len()
    }

    #[inline]
    fn q(&self, i: usize, a: usize, values: &[f64], gamma: f64) -> f64 {
        let row = &self.rows[i][a];
        let future: f64 = row.next.iter().map(|&(j, p)| p * values[j as usize]).sum();
        row.reward + gamma * future
    }

    fn backup(&self, values: &[f64], gamma: f64) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                if self.terminal[i] {
                    0.0
                } else {
                    (0..self.num_actions)
                        .map(|a| self.q(i, a, values, gamma))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect()
    }

    /// Returns values whose Bellman residual is below `tol`, plus the sweep count.
    pub(crate) fn value_iteration(&self, config: &SolverConfig) -> Result<(Vec<f64>, usize), SolverError> {
        config.validate()?;
        let mut values = vec![0.0; self.len()];
        let mut residual = f64::INFINITY;
        for sweep in 0..config.max_sweeps {
            let next = self.backup(&values, config.gamma);
            residual = max_abs_diff(&next, &values);
            if !residual.is_finite() {
                break;
            }
            if residual < config.tol {
                // residual of `values` is exactly the change just measured
                return Ok((values, sweep + 1));
            }
            values = next;
        }
        Err(SolverError::Divergence {
            sweeps: config.max_sweeps,
            residual,
        })
    }

    /// Expected number of actions until termination under a fixed policy,
    /// for every state (zero at terminal states).
    pub(crate) fn steps_to_absorption(
        &self,
        actions: &[usize],
        tol: f64,
        max_sweeps: usize,
    ) -> Result<Vec<f64>, SolverError> {
        self.check_proper(actions)?;
        let n = self.len();
        let mut steps = vec![0.0; n];
        for _ in 0..max_sweeps {
            let next: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    if self.terminal[i] {
                        return 0.0;
                    }
                    let row = &self.rows[i][actions[i]];
                    1.0 + row.next.iter().map(|&(j, p)| p * steps[j as usize]).sum::<f64>()
                })
                .collect();
            let delta = max_abs_diff(&next, &steps);
            steps = next;
            if delta < tol {
                return Ok(steps);
            }
        }
        Err(SolverError::Divergence {
            sweeps: max_sweeps,
            residual: f64::NAN,
        })
    }

    /// A finite chain is proper iff every state can reach termination with
    /// positive probability.
    fn check_proper(&self, actions: &[usize]) -> Result<(), SolverError> {
        let n = self.len();
        let mut predecessors: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut reaches = vec![false; n];
        let mut stack = Vec::new();
        for i in 0..n {
            if self.terminal[i] {
                reaches[i] = true;
                stack.push(i);
                continue;
            }
            let row = &self.rows[i][actions[i]];
            let total: f64 = row.next.iter().map(|&(_, p)| p).sum();
            if total < 1.0 - 1e-12 {
                // some mass leaves to a terminal state directly
                reaches[i] = true;
                stack.push(i);
            }
            for &(j, _) in &row.next {
                predecessors[j as usize].push(i as u32);
            }
        }
        while let Some(j) = stack.pop() {
            for &i in &predecessors[j] {
                let i = i as usize;
                if !reaches[i] {
                    reaches[i] = true;
                    stack.push(i);
                }
            }
        }
        match reaches.iter().position(|r| !r) {
            Some(i) => Err(SolverError::ImproperPolicy(State::from_index(i as u64, self.width))),
            None => Ok(()),
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Synchronous value iteration over every state of `mdp`.
///
/// Terminal states are pinned to 0. Iterates until the max-norm Bellman
/// residual of the returned table is below `tol`.
pub fn value_iteration<M: TabularMdp + ?Sized>(
    mdp: &M,
    gamma: f64,
    tol: f64,
) -> Result<TabularValueFunction, SolverError> {
    let config = SolverConfig {
        gamma,
        tol,
        ..Default::default()
    };
    value_iteration_with(mdp, &config)
}

pub fn value_iteration_with<M: TabularMdp + ?Sized>(
    mdp: &M,
    config: &SolverConfig,
) -> Result<TabularValueFunction, SolverError> {
    let model = DenseModel::build(mdp)?;
    let (values, _) = model.value_iteration(config)?;
    Ok(dense_to_table(&values, mdp.num_features()))
}

fn dense_to_table(values: &[f64], width: usize) -> TabularValueFunction {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (State::from_index(i as u64, width), v))
        .collect()
}

/// Action values for every non-terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_actions: usize,
    rows: BTreeMap<State, Vec<f64>>,
}

impl QTable {
    pub fn from_rows(num_actions: usize, rows: BTreeMap<State, Vec<f64>>) -> Self {
        assert!(rows.values().all(|r| r.len() == num_actions), "ragged Q table");
        QTable { num_actions, rows }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: &State, a: Action) -> Option<f64> {
        self.rows.get(s).and_then(|r| r.get(a.index()).copied())
    }

    pub fn row(&self, s: &State) -> Option<&[f64]> {
        self.rows.get(s).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `Q(s,a) = sum_s' P(s'|s,a) (R(s,a,s') + gamma V(s') [s' non-terminal])`.
pub fn q_values<M: TabularMdp + ?Sized>(
    mdp: &M,
    values: &TabularValueFunction,
    gamma: f64,
) -> Result<QTable, SolverError> {
    let num_actions = mdp.num_actions();
    let rows = mdp
        .non_terminal_states()
        .into_par_iter()
        .map(|s| {
            let row = Action::all(num_actions)
                .map(|a| {
                    let dist = mdp.transition_distribution(&s, a)?;
                    let mut q = 0.0;
                    for &(s2, p) in dist.iter() {
                        let future = if mdp.is_terminal(&s2) {
                            0.0
                        } else {
                            values.value(&s2).ok_or(SolverError::MissingValue(s2))?
                        };
                        q += p * (mdp.reward(&s, a, &s2) + gamma * future);
                    }
                    Ok(q)
                })
                .collect::<Result<Vec<f64>, SolverError>>()?;
            Ok((s, row))
        })
        .collect::<Result<BTreeMap<_, _>, SolverError>>()?;
    Ok(QTable { num_actions, rows })
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in row.iter().enumerate().skip(1) {
        if q > row[best] {
            best = i;
        }
    }
    best
}

/// `pi(s) = argmax_a Q(s,a)`, ties broken by the lowest action id.
pub fn greedy_policy(q: &QTable) -> TabularPolicy {
    q.rows
        .iter()
        .map(|(s, row)| (*s, Action::from_index(argmax(row))))
        .collect()
}

/// Smallest gap between the best action value and the best strictly worse
/// one, over all states. Actions tied with the best (within
/// [`TIE_TOLERANCE`]) are skipped; fully tied states contribute nothing.
pub fn min_action_gap(q: &QTable) -> Result<f64, SolverError> {
    if q.num_actions < 2 {
        return Err(SolverError::TooFewActions);
    }
    let mut gap: Option<f64> = None;
    for row in q.rows.values() {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let second = row
            .iter()
            .copied()
            .filter(|&v| v < best - TIE_TOLERANCE)
            .fold(f64::NEG_INFINITY, f64::max);
        if second.is_finite() {
            let g = best - second;
            gap = Some(gap.map_or(g, |cur: f64| cur.min(g)));
        }
    }
    gap.ok_or(SolverError::UndefinedGap)
}

/// Policy, values and action values of an optimally solved MDP.
#[derive(Debug, Clone)]
pub struct Solution {
    pub values: TabularValueFunction,
    pub q: QTable,
    pub policy: TabularPolicy,
    pub sweeps: usize,
}

pub fn solve<M: TabularMdp + ?Sized>(mdp: &M, config: &SolverConfig) -> Result<Solution, SolverError> {
    let model = DenseModel::build(mdp)?;
    let (dense, sweeps) = model.value_iteration(config)?;
    let values = dense_to_table(&dense, mdp.num_features());
    let q = q_values(mdp, &values, config.gamma)?;
    let policy = greedy_policy(&q);
    Ok(Solution {
        values,
        q,
        policy,
        sweeps,
    })
}

/// Expected number of actions to termination from each non-terminal state
/// under `policy`.
pub fn steps_to_absorption<M: TabularMdp + ?Sized>(
    mdp: &M,
    policy: &TabularPolicy,
) -> Result<BTreeMap<State, f64>, SolverError> {
    let model = DenseModel::build(mdp)?;
    let width = mdp.num_features();
    let actions = (0..model.len())
        .map(|i| {
            if model.terminal[i] {
                Ok(0)
            } else {
                let s = State::from_index(i as u64, width);
                Ok(policy.require(&s)?.index())
            }
        })
        .collect::<Result<Vec<usize>, SolverError>>()?;
    let steps = model.steps_to_absorption(&actions, 1e-12, DEFAULT_MAX_SWEEPS)?;
    Ok(steps
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !model.terminal[*i])
        .map(|(i, v)| (State::from_index(i as u64, width), v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::OutcomeDistribution;
    use crate::prereqworld::PrereqWorld;
    use std::collections::VecDeque;

    fn st(s: &str) -> State {
        s.parse().unwrap()
    }

    fn a(id: usize) -> Action {
        Action::new(id).unwrap()
    }

    /// Breadth-first action distance to the goal over a deterministic domain.
    fn bfs_distance(dom: &PrereqWorld, start: State) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut queue = VecDeque::from([(start, 0usize)]);
        seen.insert(start);
        while let Some((s, d)) = queue.pop_front() {
            if dom.is_terminal(&s) {
                return d;
            }
            for act in Action::all(dom.num_actions()) {
                let dist = dom.transition_distribution(&s, act).unwrap();
                assert_eq!(dist.len(), 1);
                let next = dist.iter().next().unwrap().0;
                if seen.insert(next) {
                    queue.push_back((next, d + 1));
                }
            }
        }
        panic!("goal unreachable from {start}");
    }

    #[test]
    fn four_item_values_match_bfs() {
        let dom = PrereqWorld::four_item();
        let v = value_iteration(&dom, 1.0, DEFAULT_TOL).unwrap();
        for s in dom.non_terminal_states() {
            let d = bfs_distance(&dom, s) as f64;
            assert!((v.value(&s).unwrap() + d).abs() < 1e-9, "{s}");
        }
        assert_eq!(v.value(&st("0000")), Some(-4.0));
        assert_eq!(v.value(&st("0011")), Some(-1.0));
        assert_eq!(v.value(&st("0111")), Some(-1.0));
        for s in State::all(4).filter(|s| s.get(1)) {
            assert_eq!(v.value(&s), Some(0.0));
        }
    }

    #[test]
    fn discounted_values_match_closed_form_backup() {
        // With a unit step cost, V(s) = -sum_{t<d} gamma^t for BFS distance d.
        let dom = PrereqWorld::four_item();
        let gamma = 0.5;
        let v = value_iteration(&dom, gamma, 1e-12).unwrap();
        for s in dom.non_terminal_states() {
            let d = bfs_distance(&dom, s) as i32;
            let expected: f64 = -(0..d).map(|t| gamma.powi(t)).sum::<f64>();
            assert!((v.value(&s).unwrap() - expected).abs() < 1e-10, "{s}");
        }
        assert!((v.value(&st("0011")).unwrap() + 1.0).abs() < 1e-12);
        assert!((v.value(&st("0000")).unwrap() + 1.875).abs() < 1e-10);
    }

    #[test]
    fn q_values_by_one_step_enumeration() {
        let dom = PrereqWorld::four_item();
        let v = value_iteration(&dom, 1.0, DEFAULT_TOL).unwrap();
        let q = q_values(&dom, &v, 1.0).unwrap();
        // goal reached in one action
        assert_eq!(q.get(&st("0011"), a(1)), Some(-1.0));
        // a_3 without i_4 is a self-loop
        assert_eq!(q.get(&st("0000"), a(3)), Some(-1.0 + v.value(&st("0000")).unwrap()));
        assert_eq!(q.get(&st("0000"), a(3)), Some(-5.0));
        for (s, row) in q.iter() {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((best - v.value(s).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn four_item_greedy_policy() {
        let dom = PrereqWorld::four_item();
        let sol = solve(&dom, &SolverConfig::default()).unwrap();
        assert_eq!(sol.policy.action(&st("0000")), Some(a(4)));
        assert_eq!(sol.policy.action(&st("0001")), Some(a(3)));
        assert_eq!(sol.policy.action(&st("0010")), Some(a(4)));
        assert_eq!(sol.policy.action(&st("0011")), Some(a(1)));
        assert_eq!(sol.policy.len(), 8);

        let mut s = st("0000");
        let mut seq = Vec::new();
        while !dom.is_terminal(&s) {
            let act = sol.policy.action(&s).unwrap();
            seq.push(act.id());
            s = dom.transition_distribution(&s, act).unwrap().iter().next().unwrap().0;
        }
        assert_eq!(seq, vec![4, 3, 4, 1]);
    }

    #[test]
    fn tie_break_prefers_lowest_action() {
        let mut rows = BTreeMap::new();
        rows.insert(st("00"), vec![-2.0, -2.0]);
        rows.insert(st("01"), vec![-3.0, -1.0]);
        let q = QTable::from_rows(2, rows);
        let pi = greedy_policy(&q);
        assert_eq!(pi.action(&st("00")), Some(a(1)));
        assert_eq!(pi.action(&st("01")), Some(a(2)));
    }

    #[test]
    fn action_gap_rules() {
        let mut rows = BTreeMap::new();
        rows.insert(st("0"), vec![-3.0, -5.0]);
        assert_eq!(min_action_gap(&QTable::from_rows(2, rows)).unwrap(), 2.0);

        let mut rows = BTreeMap::new();
        rows.insert(st("0"), vec![-3.0, -3.0, -5.0]);
        let q = QTable::from_rows(3, rows.clone());
        // exhaustive pairwise scan over strictly ordered pairs
        let row = &rows[&st("0")];
        let best = -3.0;
        let oracle = row
            .iter()
            .filter(|&&x| x < best)
            .map(|&x| best - x)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_action_gap(&q).unwrap(), oracle);
        assert_eq!(oracle, 2.0);

        let mut rows = BTreeMap::new();
        rows.insert(st("0"), vec![-1.0, -1.0]);
        assert_eq!(
            min_action_gap(&QTable::from_rows(2, rows)),
            Err(SolverError::UndefinedGap)
        );
    }

    #[test]
    fn prereqworld_gap_is_one() {
        let dom = PrereqWorld::four_item();
        let sol = solve(&dom, &SolverConfig::default()).unwrap();
        assert!((min_action_gap(&sol.q).unwrap() - 1.0).abs() < 1e-9);
    }

    /// Two-state chain whose only action never terminates.
    struct Trap;

    impl TabularMdp for Trap {
        fn num_features(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            1
        }
        fn is_terminal(&self, _: &State) -> bool {
            false
        }
        fn transition_distribution(&self, s: &State, _: Action) -> Result<OutcomeDistribution, MdpError> {
            Ok(OutcomeDistribution::point(*s))
        }
        fn reward(&self, _: &State, _: Action, _: &State) -> f64 {
            -1.0
        }
    }

    #[test]
    fn improper_domain_diverges() {
        let config = SolverConfig {
            max_sweeps: 100,
            ..Default::default()
        };
        assert!(matches!(
            value_iteration_with(&Trap, &config),
            Err(SolverError::Divergence { sweeps: 100, .. })
        ));
        let pi: TabularPolicy = State::all(1).map(|s| (s, a(1))).collect();
        assert!(matches!(
            steps_to_absorption(&Trap, &pi),
            Err(SolverError::ImproperPolicy(_))
        ));
    }

    #[test]
    fn rejects_bad_parameters() {
        let dom = PrereqWorld::four_item();
        assert!(matches!(
            value_iteration(&dom, 0.0, 1e-9),
            Err(SolverError::InvalidParameter(_))
        ));
        assert!(matches!(
            value_iteration(&dom, 1.0, 0.0),
            Err(SolverError::InvalidParameter(_))
        ));
    }
}
