use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use crate::firm::{firm_scored, FirmCounters, ImportanceVector};
use crate::mdp::{Action, State, TabularPolicy, TransitionTuple};

use super::tree::SplitForest;
use super::{AbstractState, ApgError, SplitRecord};

/// Keeps the tuples whose recorded action is the one `policy` takes now.
/// Order and multiplicity are preserved.
pub fn filter_on_policy(
    tr_samples: &[TransitionTuple],
    policy: &TabularPolicy,
) -> Result<Vec<TransitionTuple>, ApgError> {
    let mut kept = Vec::with_capacity(tr_samples.len());
    for t in tr_samples {
        if policy.require(&t.s)? == t.a {
            kept.push(*t);
        }
    }
    Ok(kept)
}

/// One iteration of the split loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEvent {
    /// 1-based id of the set that was split; it keeps the `f = 0` half.
    pub set: usize,
    /// 1-based id of the new set holding the `f = 1` half.
    pub new_set: usize,
    pub feature: usize,
    /// `|I_f|` of the split set at selection time.
    pub importance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DivisionStats {
    pub input_tuples: usize,
    pub filtered_tuples: usize,
    pub splits: usize,
    pub firm: FirmCounters,
}

/// Abstract states plus everything needed to classify new states.
#[derive(Debug, Clone)]
pub struct Division {
    pub states: Vec<AbstractState>,
    pub forest: SplitForest,
    pub num_features: usize,
    pub epsilon: f64,
    pub stats: DivisionStats,
    pub trace: Vec<SplitEvent>,
}

/// Heap entry ordered by importance, then by lowest set index.
#[derive(Debug, PartialEq)]
struct Candidate {
    importance: f64,
    set: usize,
    version: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.importance
            .total_cmp(&other.importance)
            .then_with(|| Reverse(self.set).cmp(&Reverse(other.set)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct WorkSet {
    members: Vec<u32>,
    importance: ImportanceVector,
    record: SplitRecord,
    leaf: usize,
    version: u32,
}

/// Groups on-policy tuples into abstract states.
///
/// Tuples are first grouped by action. The set holding the globally most
/// important feature is then split on it, repeatedly, until no feature of
/// any set has `|I_f| > epsilon`. Ties go to the lowest set index, then the
/// lowest feature id. `g` is evaluated once per retained tuple.
pub fn divide_abstract_states<G>(
    tr_samples: &[TransitionTuple],
    policy: &TabularPolicy,
    mut g: G,
    epsilon: f64,
) -> Result<Division, ApgError>
where
    G: FnMut(&State) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(ApgError::InvalidEpsilon(epsilon));
    }
    let tuples = filter_on_policy(tr_samples, policy)?;
    let first = tuples.first().ok_or(ApgError::EmptySet)?;
    let num_features = first.s.width();
    let scores = tuples
        .iter()
        .map(|t| {
            let v = g(&t.s);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ApgError::NonFiniteScore(t.s))
            }
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let mut stats = DivisionStats {
        input_tuples: tr_samples.len(),
        filtered_tuples: tuples.len(),
        ..Default::default()
    };
    let firm = |members: &[u32], counters: &mut FirmCounters| {
        let samples = members.iter().map(|&i| (tuples[i as usize].s, scores[i as usize]));
        firm_scored(samples, num_features, counters).map_err(ApgError::from)
    };

    let mut by_action: BTreeMap<Action, Vec<u32>> = BTreeMap::new();
    for (i, t) in tuples.iter().enumerate() {
        by_action.entry(t.a).or_default().push(i as u32);
    }

    let mut forest = SplitForest::default();
    let mut sets: Vec<WorkSet> = Vec::with_capacity(by_action.len());
    for (action, members) in by_action {
        let importance = firm(&members, &mut stats.firm)?;
        let leaf = forest.add_root(action, sets.len());
        sets.push(WorkSet {
            members,
            importance,
            record: SplitRecord::root(action),
            leaf,
            version: 0,
        });
    }

    let mut heap: BinaryHeap<Candidate> = sets
        .iter()
        .enumerate()
        .map(|(set, w)| Candidate {
            importance: w.importance.max_abs().map_or(0.0, |(_, m)| m),
            set,
            version: 0,
        })
        .collect();

    let mut trace = Vec::new();
    while let Some(top) = heap.pop() {
        if top.version != sets[top.set].version {
            continue;
        }
        if top.importance <= epsilon {
            break;
        }
        let i = top.set;
        let (feature, _) = sets[i].importance.max_abs().expect("non-empty importance");
        let (zero, one): (Vec<u32>, Vec<u32>) = sets[i]
            .members
            .iter()
            .partition(|&&t| !tuples[t as usize].s.get(feature));
        debug_assert!(!zero.is_empty() && !one.is_empty());

        let zero_importance = firm(&zero, &mut stats.firm)?;
        let one_importance = firm(&one, &mut stats.firm)?;
        let new_set = sets.len();
        let [zero_leaf, one_leaf] = forest.split_leaf(sets[i].leaf, feature, i, new_set);
        let one_record = sets[i].record.refined(feature, 1);
        let zero_record = sets[i].record.refined(feature, 0);

        let parent = &mut sets[i];
        parent.members = zero;
        parent.importance = zero_importance;
        parent.record = zero_record;
        parent.leaf = zero_leaf;
        parent.version += 1;
        sets.push(WorkSet {
            members: one,
            importance: one_importance,
            record: one_record,
            leaf: one_leaf,
            version: 0,
        });
        for set in [i, new_set] {
            heap.push(Candidate {
                importance: sets[set].importance.max_abs().map_or(0.0, |(_, m)| m),
                set,
                version: sets[set].version,
            });
        }
        trace.push(SplitEvent {
            set: i + 1,
            new_set: new_set + 1,
            feature,
            importance: top.importance,
        });
        stats.splits += 1;
    }

    let states = sets
        .into_iter()
        .enumerate()
        .map(|(i, w)| AbstractState {
            id: i + 1,
            tuples: w.members.iter().map(|&t| tuples[t as usize]).collect(),
            split: w.record,
        })
        .collect();
    Ok(Division {
        states,
        forest,
        num_features,
        epsilon,
        stats,
        trace,
    })
}
