//! Domain-agnostic MDP types: binary-feature states, transition tuples,
//! tabular policies and value functions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest supported feature count. States are packed into a `u64`.
pub const MAX_FEATURES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid feature value {value} at feature {feature} (expected 0 or 1)")]
    InvalidFeature { feature: usize, value: i64 },
    #[error("state width {0} outside 1..={MAX_FEATURES}")]
    InvalidWidth(usize),
    #[error("cannot parse state {0:?}: expected a string of 0/1 characters")]
    InvalidStateString(String),
    #[error("width mismatch in tuple {index}: expected {expected} features, found {found}")]
    WidthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown action id {id} (valid ids are 1..={num_actions})")]
    UnknownAction { id: i64, num_actions: usize },
    #[error("unknown action id {0} (action ids start at 1)")]
    InvalidActionId(i64),
    #[error("state {0} is terminal")]
    TerminalState(State),
    #[error("policy has no action for state {0}")]
    MissingPolicy(State),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
}

/// A grounded state: a fixed-width assignment of binary features.
///
/// Feature 1 is stored in the most significant position so that a state
/// prints as `f_1 f_2 ... f_n`, e.g. `0011`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    width: u8,
    bits: u64,
}

impl State {
    /// Builds a state from a sequence of 0/1 values, feature 1 first.
    pub fn from_bits(values: &[i64]) -> Result<State, MdpError> {
        let width = values.len();
        if width == 0 || width > MAX_FEATURES {
            return Err(MdpError::InvalidWidth(width));
        }
        let mut bits = 0u64;
        for (i, &v) in values.iter().enumerate() {
            match v {
                0 => {}
                1 => bits |= 1 << (width - 1 - i),
                _ => {
                    return Err(MdpError::InvalidFeature {
                        feature: i + 1,
                        value: v,
                    })
                }
            }
        }
        Ok(State {
            width: width as u8,
            bits,
        })
    }

    /// Builds a state from its packed index (feature 1 = most significant bit).
    pub fn from_index(index: u64, width: usize) -> State {
        assert!(width >= 1 && width <= MAX_FEATURES, "invalid width {width}");
        let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
        assert!(index & !mask == 0, "index {index} does not fit {width} bits");
        State {
            width: width as u8,
            bits: index,
        }
    }

    pub fn zeros(width: usize) -> State {
        State::from_index(0, width)
    }

    /// Packed representation, usable as a dense table index.
    #[inline]
    pub fn index(&self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width as usize
    }

    #[inline]
    fn mask(&self, feature: usize) -> u64 {
        debug_assert!(feature >= 1 && feature <= self.width(), "feature {feature} out of range");
        1u64 << (self.width() - feature)
    }

    /// Value of a 1-based feature.
    #[inline]
    pub fn get(&self, feature: usize) -> bool {
        self.bits & self.mask(feature) != 0
    }

    /// Value of a 1-based feature as 0 or 1.
    #[inline]
    pub fn value(&self, feature: usize) -> u8 {
        self.get(feature) as u8
    }

    #[must_use]
    pub fn with(&self, feature: usize, value: bool) -> State {
        let m = self.mask(feature);
        let bits = if value { self.bits | m } else { self.bits & !m };
        State { bits, ..*self }
    }

    #[must_use]
    pub fn flipped(&self, feature: usize) -> State {
        State {
            bits: self.bits ^ self.mask(feature),
            ..*self
        }
    }

    /// Feature values in order, feature 1 first.
    pub fn to_bits(&self) -> Vec<u8> {
        (1..=self.width()).map(|f| self.value(f)).collect()
    }

    /// Iterates every state of the given width in index order.
    pub fn all(width: usize) -> impl Iterator<Item = State> {
        assert!(width < 64, "cannot enumerate 2^{width} states");
        (0..1u64 << width).map(move |i| State::from_index(i, width))
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for feature in 1..=self.width() {
            f.write_str(if self.get(feature) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State({self})")
    }
}

impl FromStr for State {
    type Err = MdpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(MdpError::InvalidStateString(s.to_string())),
            })
            .collect::<Result<Vec<i64>, _>>()?;
        if values.is_empty() {
            return Err(MdpError::InvalidStateString(s.to_string()));
        }
        State::from_bits(&values)
    }
}

impl Serialize for State {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for State {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 1-based action identifier (`a_1 .. a_|A|`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u16")]
pub struct Action(u16);

impl Action {
    pub fn new(id: usize) -> Result<Action, MdpError> {
        if id == 0 || id > u16::MAX as usize {
            return Err(MdpError::InvalidActionId(id as i64));
        }
        Ok(Action(id as u16))
    }

    #[inline]
    pub fn id(&self) -> usize {
        self.0 as usize
    }

    /// Zero-based position, for dense per-action tables.
    #[inline]
    pub fn index(&self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Action {
        Action((index + 1) as u16)
    }

    /// All actions `a_1 .. a_n`.
    pub fn all(n: usize) -> impl Iterator<Item = Action> {
        (0..n).map(Action::from_index)
    }
}

impl TryFrom<i64> for Action {
    type Error = MdpError;

    fn try_from(id: i64) -> Result<Self, Self::Error> {
        if id < 1 || id > u16::MAX as i64 {
            return Err(MdpError::InvalidActionId(id));
        }
        Ok(Action(id as u16))
    }
}

impl From<Action> for u16 {
    fn from(a: Action) -> u16 {
        a.0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a_{}", self.0)
    }
}

impl fmt::Debug for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// One observed transition `(s, a, s', r, terminal)`.
///
/// `terminal` refers to `s_next`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub s: State,
    pub a: Action,
    pub s_next: State,
    pub r: f64,
    pub terminal: bool,
}

/// Checks that a transition multiset is well formed: uniform width and
/// action ids within `1..=num_actions`.
pub fn validate_transition_set(
    tuples: &[TransitionTuple],
    num_features: usize,
    num_actions: usize,
) -> Result<(), MdpError> {
    for (index, t) in tuples.iter().enumerate() {
        for width in [t.s.width(), t.s_next.width()] {
            if width != num_features {
                return Err(MdpError::WidthMismatch {
                    index,
                    expected: num_features,
                    found: width,
                });
            }
        }
        if t.a.id() > num_actions {
            return Err(MdpError::UnknownAction {
                id: t.a.id() as i64,
                num_actions,
            });
        }
    }
    Ok(())
}

/// A deterministic policy stored as a lookup table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TabularPolicy(BTreeMap<State, Action>);

impl TabularPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: State, a: Action) {
        self.0.insert(s, a);
    }

    pub fn action(&self, s: &State) -> Option<Action> {
        self.0.get(s).copied()
    }

    pub fn require(&self, s: &State) -> Result<Action, MdpError> {
        self.action(s).ok_or(MdpError::MissingPolicy(*s))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, &Action)> {
        self.0.iter()
    }
}

impl FromIterator<(State, Action)> for TabularPolicy {
    fn from_iter<I: IntoIterator<Item = (State, Action)>>(iter: I) -> Self {
        TabularPolicy(iter.into_iter().collect())
    }
}

/// State-value lookup table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TabularValueFunction(BTreeMap<State, f64>);

impl TabularValueFunction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: State, v: f64) {
        self.0.insert(s, v);
    }

    pub fn value(&self, s: &State) -> Option<f64> {
        self.0.get(s).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, &f64)> {
        self.0.iter()
    }
}

impl FromIterator<(State, f64)> for TabularValueFunction {
    fn from_iter<I: IntoIterator<Item = (State, f64)>>(iter: I) -> Self {
        TabularValueFunction(iter.into_iter().collect())
    }
}

/// A finite distribution over successor states.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    entries: Vec<(State, f64)>,
}

impl OutcomeDistribution {
    pub fn point(s: State) -> Self {
        OutcomeDistribution {
            entries: vec![(s, 1.0)],
        }
    }

    /// Merges duplicate states, drops zero-probability outcomes and sorts by state.
    pub fn from_entries(entries: impl IntoIterator<Item = (State, f64)>) -> Self {
        let mut merged: BTreeMap<State, f64> = BTreeMap::new();
        for (s, p) in entries {
            if p > 0.0 {
                *merged.entry(s).or_insert(0.0) += p;
            }
        }
        OutcomeDistribution {
            entries: merged.into_iter().collect(),
        }
    }

    pub fn probability(&self, s: &State) -> f64 {
        self.entries
            .iter()
            .find(|(x, _)| x == s)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(State, f64)> {
        self.entries.iter()
    }

    /// Inverse-CDF draw given a uniform sample `u` in `[0, 1)`.
    pub fn pick(&self, u: f64) -> State {
        let mut acc = 0.0;
        for (s, p) in &self.entries {
            acc += p;
            if u < acc {
                return *s;
            }
        }
        self.entries.last().expect("empty outcome distribution").0
    }
}

/// A finite, fully enumerable MDP over binary-feature states.
pub trait TabularMdp: Sync {
    fn num_features(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn is_terminal(&self, s: &State) -> bool;

    /// `P(. | s, a)` for a non-terminal `s`.
    fn transition_distribution(&self, s: &State, a: Action) -> Result<OutcomeDistribution, MdpError>;

    fn reward(&self, s: &State, a: Action, s_next: &State) -> f64;

    fn states(&self) -> Box<dyn Iterator<Item = State> + '_> {
        Box::new(State::all(self.num_features()))
    }

    fn non_terminal_states(&self) -> Vec<State> {
        self.states().filter(|s| !self.is_terminal(s)).collect()
    }
}

/// Where an agent is (or what it does) at some future step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Act(Action),
    Terminated,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Act(a) => write!(f, "{a}"),
            Outcome::Terminated => f.write_str("terminated"),
        }
    }
}

/// Distribution over the action taken `n` steps ahead, with termination
/// mass reported separately.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionDistribution {
    pub actions: BTreeMap<Action, f64>,
    pub terminated: f64,
}

impl ActionDistribution {
    pub fn point(outcome: Outcome) -> Self {
        let mut d = ActionDistribution::default();
        d.add(outcome, 1.0);
        d
    }

    pub fn add(&mut self, outcome: Outcome, p: f64) {
        match outcome {
            Outcome::Act(a) => *self.actions.entry(a).or_insert(0.0) += p,
            Outcome::Terminated => self.terminated += p,
        }
    }

    pub fn probability(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Act(a) => self.actions.get(&a).copied().unwrap_or(0.0),
            Outcome::Terminated => self.terminated,
        }
    }

    pub fn total(&self) -> f64 {
        self.actions.values().sum::<f64>() + self.terminated
    }

    /// Most likely outcome. Ties go to the lowest action id; termination
    /// ranks after every action.
    pub fn modal(&self) -> Outcome {
        let mut best = (Outcome::Terminated, self.terminated);
        for (&a, &p) in self.actions.iter().rev() {
            if p >= best.1 {
                best = (Outcome::Act(a), p);
            }
        }
        best.0
    }

    pub fn total_variation(&self, other: &ActionDistribution) -> f64 {
        let mut keys: Vec<Action> = self.actions.keys().chain(other.actions.keys()).copied().collect();
        keys.sort();
        keys.dedup();
        let mut sum = (self.terminated - other.terminated).abs();
        for a in keys {
            sum += (self.probability(Outcome::Act(a)) - other.probability(Outcome::Act(a))).abs();
        }
        0.5 * sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(s: &str) -> State {
        s.parse().unwrap()
    }

    #[test]
    fn encodes_feature_one_leftmost() {
        let s = State::from_bits(&[1, 0, 1, 1]).unwrap();
        assert_eq!(s.to_string(), "1011");
        assert!(s.get(1) && !s.get(2) && s.get(3) && s.get(4));
        assert_eq!(s.index(), 0b1011);
        assert_eq!(State::from_bits(&[0, 0, 0, 0]).unwrap().to_string(), "0000");
    }

    #[test]
    fn rejects_non_binary_entries() {
        assert_eq!(
            State::from_bits(&[0, 2, 0]),
            Err(MdpError::InvalidFeature { feature: 2, value: 2 })
        );
        assert!("01x1".parse::<State>().is_err());
        assert!("".parse::<State>().is_err());
    }

    #[test]
    fn round_trips_every_state_up_to_twelve_features() {
        for width in 1..=12 {
            for s in State::all(width) {
                let bits: Vec<i64> = s.to_bits().iter().map(|&b| b as i64).collect();
                assert_eq!(State::from_bits(&bits).unwrap(), s);
                assert_eq!(s.to_string().parse::<State>().unwrap(), s);
            }
        }
    }

    #[test]
    fn ordering_is_consistent_with_equality() {
        let a = st("0011");
        let b = st("0011");
        assert_eq!(a.cmp(&b), std::cmp::Ordering::Equal);
        assert!(st("0010") < st("0011"));
        // different widths never compare equal
        assert_ne!(st("011"), st("0011"));
    }

    #[test]
    fn flip_and_with() {
        let s = st("0000");
        assert_eq!(s.with(4, true), st("0001"));
        assert_eq!(s.flipped(1), st("1000"));
        assert_eq!(st("1111").with(2, false), st("1011"));
    }

    fn tuple(s: &str, a: usize, n: &str) -> TransitionTuple {
        TransitionTuple {
            s: st(s),
            a: Action::new(a).unwrap(),
            s_next: st(n),
            r: -1.0,
            terminal: false,
        }
    }

    #[test]
    fn validates_transition_sets() {
        let ok = vec![tuple("0000", 4, "0001"), tuple("0001", 3, "0010")];
        assert!(validate_transition_set(&ok, 4, 4).is_ok());

        let mut bad = ok.clone();
        bad.push(tuple("000", 1, "000"));
        assert!(matches!(
            validate_transition_set(&bad, 4, 4),
            Err(MdpError::WidthMismatch { index: 2, expected: 4, found: 3 })
        ));

        let out_of_range = vec![tuple("0000", 5, "0000")];
        assert!(matches!(
            validate_transition_set(&out_of_range, 4, 4),
            Err(MdpError::UnknownAction { id: 5, .. })
        ));
        assert!(Action::new(0).is_err());
    }

    #[test]
    fn transition_json_schema() {
        let json = r#"[{"s": "0011", "a": 1, "s_next": "1000", "r": -1.0, "terminal": true}]"#;
        let tuples: Vec<TransitionTuple> = serde_json::from_str(json).unwrap();
        assert_eq!(tuples[0].s, st("0011"));
        assert_eq!(tuples[0].a.id(), 1);
        assert!(tuples[0].terminal);
        let back = serde_json::to_string(&tuples).unwrap();
        assert_eq!(
            back,
            r#"[{"s":"0011","a":1,"s_next":"1000","r":-1.0,"terminal":true}]"#
        );

        let zero = r#"[{"s": "0011", "a": 0, "s_next": "1000", "r": -1.0, "terminal": true}]"#;
        let err = serde_json::from_str::<Vec<TransitionTuple>>(zero).unwrap_err();
        assert!(err.to_string().contains("unknown action id 0"), "{err}");
    }

    #[test]
    fn modal_tie_breaks_to_lowest_action() {
        let mut d = ActionDistribution::default();
        d.add(Outcome::Act(Action::new(3).unwrap()), 0.4);
        d.add(Outcome::Act(Action::new(2).unwrap()), 0.4);
        d.add(Outcome::Terminated, 0.2);
        assert_eq!(d.modal(), Outcome::Act(Action::new(2).unwrap()));

        let t = ActionDistribution::point(Outcome::Terminated);
        assert_eq!(t.modal(), Outcome::Terminated);
        assert!((d.total_variation(&t) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn outcome_distribution_merges_and_drops_zeros() {
        let d = OutcomeDistribution::from_entries(vec![
            (st("01"), 0.25),
            (st("10"), 0.0),
            (st("01"), 0.25),
            (st("11"), 0.5),
        ]);
        assert_eq!(d.len(), 2);
        assert_eq!(d.probability(&st("01")), 0.5);
        assert_eq!(d.pick(0.49), st("01"));
        assert_eq!(d.pick(0.51), st("11"));
    }
}
