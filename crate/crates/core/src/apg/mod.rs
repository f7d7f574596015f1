//! Abstracted policy graphs: a Markov chain over abstract states, each
//! labelled with the single action the policy takes there.
//!
//! Construction runs in two stages. [`divide_abstract_states`] partitions
//! on-policy transition tuples by action and then splits sets on their most
//! important binary feature (FIRM over the value function) until every
//! importance is at most `epsilon`. [`build_graph`] turns the partition into
//! a row-stochastic matrix by counting where each tuple's successor lands,
//! with terminal successors routed to the absorbing node `b_T`.
//!
//! Each abstract state is described exactly by its split record: within
//! its action class, a state belongs to the node iff it matches every
//! recorded `(feature, value)` pair.

mod divide;
mod tree;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firm::FirmError;
use crate::formats::{check_schema_version, FormatError, SCHEMA_VERSION};
use crate::mdp::{Action, ActionDistribution, MdpError, Outcome, State, TabularPolicy, TransitionTuple};

pub use divide::{divide_abstract_states, filter_on_policy, Division, DivisionStats, SplitEvent};
pub use tree::SplitForest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApgError {
    #[error("no on-policy transition tuples to abstract")]
    EmptySet,
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("score of state {0} is not finite")]
    NonFiniteScore(State),
    #[error("state {state} maps to action {action}, which has no abstract state")]
    Unclassifiable { state: State, action: Action },
    #[error("no node with id {0}")]
    InvalidNode(usize),
    #[error("split record of node {0} conflicts with an earlier node")]
    InconsistentRecords(usize),
    #[error("split records do not cover every branch")]
    IncompleteTree,
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error(transparent)]
    Policy(#[from] MdpError),
    #[error(transparent)]
    Firm(#[from] FirmError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Ordered `(feature, value)` constraints that define a node within its
/// action class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitRecord {
    pub action: Action,
    pub constraints: Vec<(usize, u8)>,
}

impl SplitRecord {
    pub fn root(action: Action) -> Self {
        SplitRecord {
            action,
            constraints: Vec::new(),
        }
    }

    #[must_use]
    pub fn refined(&self, feature: usize, value: u8) -> Self {
        debug_assert!(self.constraints.iter().all(|&(f, _)| f != feature));
        let mut constraints = self.constraints.clone();
        constraints.push((feature, value));
        SplitRecord {
            action: self.action,
            constraints,
        }
    }

    pub fn matches(&self, s: &State) -> bool {
        self.constraints.iter().all(|&(f, v)| s.value(f) == v)
    }

    pub fn features(&self) -> BTreeSet<usize> {
        self.constraints.iter().map(|&(f, _)| f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractState {
    /// 1-based node id.
    pub id: usize,
    pub tuples: Vec<TransitionTuple>,
    pub split: SplitRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApgNode {
    pub id: usize,
    pub action: Action,
    pub split: SplitRecord,
    /// Number of transition tuples the node was built from.
    pub count: usize,
    /// Feature values shared by every member source state.
    pub shared: Vec<(usize, u8)>,
}

/// Abstract states plus the absorbing terminal node, with a dense
/// row-stochastic transition matrix. Node `i` (1-based) is row `i - 1`;
/// the terminal node is the last row.
#[derive(Debug, Clone)]
pub struct Apg {
    num_features: usize,
    nodes: Vec<ApgNode>,
    matrix: Vec<f64>,
    forest: SplitForest,
}

/// Creates the transition matrix of the abstract chain.
///
/// Successors of seen source states map to the node that holds them;
/// unseen successors are classified by descending the split tree of the
/// action `policy` takes there. A successor whose action class has no node
/// at all is left out of its row, which is normalized over the remaining
/// tuples; a row with no usable tuple becomes a point mass on the terminal
/// node.
pub fn build_graph(division: &Division, policy: &TabularPolicy) -> Result<Apg, ApgError> {
    let n = division.states.len();
    let dim = n + 1;
    let mut lookup: HashMap<State, usize> = HashMap::new();
    for (i, node) in division.states.iter().enumerate() {
        for t in &node.tuples {
            lookup.insert(t.s, i);
        }
    }
    let mut matrix = vec![0.0; dim * dim];
    let mut nodes = Vec::with_capacity(n);
    for (i, node) in division.states.iter().enumerate() {
        if node.tuples.is_empty() {
            return Err(ApgError::Malformed(format!("node {} is empty", node.id)));
        }
        let mut counts = vec![0usize; dim];
        let mut unclassified = 0;
        for t in &node.tuples {
            let target = if t.terminal {
                n
            } else if let Some(&j) = lookup.get(&t.s_next) {
                j
            } else {
                let action = policy.require(&t.s_next)?;
                match division.forest.classify(action, &t.s_next) {
                    Some(j) => j,
                    None => {
                        unclassified += 1;
                        continue;
                    }
                }
            };
            counts[target] += 1;
        }
        let classified = node.tuples.len() - unclassified;
        if classified == 0 {
            matrix[i * dim + n] = 1.0;
        } else {
            for (j, &c) in counts.iter().enumerate() {
                matrix[i * dim + j] = c as f64 / classified as f64;
            }
        }
        if unclassified > 0 {
            log::debug!(
                "node {}: {unclassified} of {} successors fall in an action class with no node",
                node.id,
                node.tuples.len()
            );
        }
        nodes.push(ApgNode {
            id: node.id,
            action: node.split.action,
            split: node.split.clone(),
            count: node.tuples.len(),
            shared: shared_values(&node.tuples, division.num_features),
        });
    }
    matrix[n * dim + n] = 1.0;
    Ok(Apg {
        num_features: division.num_features,
        nodes,
        matrix,
        forest: division.forest.clone(),
    })
}

// The forest is determined by the node records, so it is left out.
impl PartialEq for Apg {
    fn eq(&self, other: &Self) -> bool {
        self.num_features == other.num_features && self.nodes == other.nodes && self.matrix == other.matrix
    }
}

fn shared_values(tuples: &[TransitionTuple], width: usize) -> Vec<(usize, u8)> {
    let first = tuples[0].s;
    (1..=width)
        .filter(|&f| tuples.iter().all(|t| t.s.get(f) == first.get(f)))
        .map(|f| (f, first.value(f)))
        .collect()
}

impl Apg {
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn nodes(&self) -> &[ApgNode] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Id of the absorbing terminal node `b_T`.
    pub fn terminal_id(&self) -> usize {
        self.nodes.len() + 1
    }

    /// Matrix dimension, including `b_T`.
    pub fn dim(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn node(&self, id: usize) -> Result<&ApgNode, ApgError> {
        id.checked_sub(1)
            .and_then(|i| self.nodes.get(i))
            .ok_or(ApgError::InvalidNode(id))
    }

    /// Transition probability between two 1-based node ids.
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        assert!(from >= 1 && from <= self.dim() && to >= 1 && to <= self.dim());
        self.matrix[(from - 1) * self.dim() + (to - 1)]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix[(id - 1) * d..id * d]
    }

    pub fn forest(&self) -> &SplitForest {
        &self.forest
    }

    /// Node id of `s`: the node of `policy(s)`'s class whose split record
    /// `s` satisfies. Defined for seen and unseen states alike.
    pub fn classify_state(&self, s: &State, policy: &TabularPolicy) -> Result<usize, ApgError> {
        let action = policy.require(s)?;
        self.forest
            .classify(action, s)
            .map(|i| i + 1)
            .ok_or(ApgError::Unclassifiable { state: *s, action })
    }

    /// Features whose values place `s` in its node.
    pub fn relevant_features(&self, s: &State, policy: &TabularPolicy) -> Result<BTreeSet<usize>, ApgError> {
        let id = self.classify_state(s, policy)?;
        Ok(self.nodes[id - 1].split.features())
    }

    /// Distribution of the action taken `n` steps after `s0`, under the
    /// abstract chain's Markov assumption.
    pub fn predict_action_distribution(
        &self,
        s0: &State,
        n: usize,
        policy: &TabularPolicy,
    ) -> Result<ActionDistribution, ApgError> {
        let start = self.classify_state(s0, policy)?;
        let mut dist = vec![0.0; self.dim()];
        dist[start - 1] = 1.0;
        for _ in 0..n {
            dist = self.step(&dist);
        }
        Ok(self.aggregate(&dist))
    }

    /// Node-level distributions for steps `0..=horizon`.
    pub fn predict_horizon(
        &self,
        s0: &State,
        horizon: usize,
        policy: &TabularPolicy,
    ) -> Result<Vec<ActionDistribution>, ApgError> {
        let start = self.classify_state(s0, policy)?;
        let mut dist = vec![0.0; self.dim()];
        dist[start - 1] = 1.0;
        let mut out = Vec::with_capacity(horizon + 1);
        for step in 0..=horizon {
            if step > 0 {
                dist = self.step(&dist);
            }
            out.push(self.aggregate(&dist));
        }
        Ok(out)
    }

    fn step(&self, dist: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut next = vec![0.0; d];
        for (i, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (j, &m) in self.matrix[i * d..(i + 1) * d].iter().enumerate() {
                next[j] += p * m;
            }
        }
        next
    }

    fn aggregate(&self, dist: &[f64]) -> ActionDistribution {
        let mut out = ActionDistribution::default();
        for (i, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let outcome = match self.nodes.get(i) {
                Some(node) => Outcome::Act(node.action),
                None => Outcome::Terminated,
            };
            out.add(outcome, p);
        }
        out
    }

    pub fn summarize_node(&self, id: usize) -> Result<NodeSummary, ApgError> {
        let node = self.node(id)?;
        Ok(NodeSummary {
            id,
            action: node.action,
            constraints: node.split.constraints.clone(),
            count: node.count,
            shared: node.shared.clone(),
        })
    }

    /// Largest deviation of a row sum from 1, and whether any entry is negative.
    pub fn stochasticity_error(&self) -> f64 {
        (1..=self.dim())
            .map(|id| {
                let row = self.row(id);
                if row.iter().any(|&p| p < 0.0) {
                    f64::INFINITY
                } else {
                    (row.iter().sum::<f64>() - 1.0).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Nonzero edges as `(from, to, probability)` with 1-based ids.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let d = self.dim();
        (0..d).flat_map(move |i| {
            (0..d).filter_map(move |j| {
                let p = self.matrix[i * d + j];
                (p != 0.0).then_some((i + 1, j + 1, p))
            })
        })
    }
}

/// Membership description of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSummary {
    pub id: usize,
    pub action: Action,
    pub constraints: Vec<(usize, u8)>,
    pub count: usize,
    pub shared: Vec<(usize, u8)>,
}

fn join_constraints(constraints: &[(usize, u8)]) -> String {
    constraints
        .iter()
        .map(|(f, v)| format!("f_{f}={v}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

impl NodeSummary {
    /// Feature values common to all observed members, e.g. `f_3=1, f_4=1`.
    pub fn shared_description(&self) -> String {
        self.shared
            .iter()
            .map(|(f, v)| format!("f_{f}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for NodeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.constraints.is_empty() {
            write!(f, "take {} (no feature constraints)", self.action)
        } else {
            write!(f, "take {} when {}", self.action, join_constraints(&self.constraints))
        }
    }
}

/// Serialized form: nodes with their split constraints, the terminal id and
/// the dense row-major matrix.
#[derive(Debug, Serialize, Deserialize)]
struct ApgFile {
    schema_version: String,
    num_features: usize,
    nodes: Vec<NodeFile>,
    terminal_id: usize,
    matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeFile {
    id: usize,
    action: Action,
    constraints: Vec<(usize, u8)>,
    count: usize,
    #[serde(default)]
    shared: Vec<(usize, u8)>,
}

impl Serialize for Apg {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let d = self.dim();
        ApgFile {
            schema_version: SCHEMA_VERSION.to_string(),
            num_features: self.num_features,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeFile {
                    id: n.id,
                    action: n.action,
                    constraints: n.split.constraints.clone(),
                    count: n.count,
                    shared: n.shared.clone(),
                })
                .collect(),
            terminal_id: self.terminal_id(),
            matrix: self.matrix.chunks(d).map(<[f64]>::to_vec).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Apg {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = ApgFile::deserialize(deserializer)?;
        Apg::try_from(file).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<ApgFile> for Apg {
    type Error = ApgError;

    fn try_from(file: ApgFile) -> Result<Self, Self::Error> {
        check_schema_version(&file.schema_version)?;
        let n = file.nodes.len();
        let dim = n + 1;
        if file.terminal_id != dim {
            return Err(ApgError::Malformed(format!(
                "terminal_id {} should be {dim}",
                file.terminal_id
            )));
        }
        if file.matrix.len() != dim || file.matrix.iter().any(|r| r.len() != dim) {
            return Err(ApgError::Malformed(format!("matrix must be {dim}x{dim}")));
        }
        let mut nodes = Vec::with_capacity(n);
        for (i, nf) in file.nodes.into_iter().enumerate() {
            if nf.id != i + 1 {
                return Err(ApgError::Malformed(format!("node {} listed at position {}", nf.id, i + 1)));
            }
            for &(f, v) in nf.constraints.iter().chain(&nf.shared) {
                if f == 0 || f > file.num_features || v > 1 {
                    return Err(ApgError::Malformed(format!("bad constraint ({f}, {v}) on node {}", nf.id)));
                }
            }
            nodes.push(ApgNode {
                id: nf.id,
                action: nf.action,
                split: SplitRecord {
                    action: nf.action,
                    constraints: nf.constraints,
                },
                count: nf.count,
                shared: nf.shared,
            });
        }
        let records: Vec<SplitRecord> = nodes.iter().map(|n| n.split.clone()).collect();
        let forest = SplitForest::from_records(&records)?;
        let apg = Apg {
            num_features: file.num_features,
            nodes,
            matrix: file.matrix.into_iter().flatten().collect(),
            forest,
        };
        if apg.stochasticity_error() > 1e-9 {
            return Err(ApgError::Malformed("rows must be probability distributions".into()));
        }
        Ok(apg)
    }
}
