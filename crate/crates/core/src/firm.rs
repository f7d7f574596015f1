//! Feature Importance Ranking Measure for binary features.
//!
//! For a multiset of source states scored by `g`, the importance of
//! feature `f` is
//!
//! ```text
//! I_f = (q_f0 - q_f1) * sqrt(p_f0 * p_f1)
//! ```
//!
//! where `p_fv` is the fraction of states with `s[f] = v` and `q_fv` the
//! mean score over that fraction. The sign is kept: a positive value means
//! the score drops when the feature switches from 0 to 1.
//!
//! All sums are accumulated exactly and rounded once, so the result does
//! not depend on the order of the multiset.

use thiserror::Error;

use crate::mdp::{State, TransitionTuple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FirmError {
    #[error("feature importance of an empty set is undefined")]
    EmptySet,
    #[error("state width {found} does not match {expected} features")]
    WidthMismatch { expected: usize, found: usize },
}

/// Exact floating-point sum (Shewchuk's non-overlapping partials) with a
/// single correctly-rounded read-out.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds the exact negation of another accumulator.
    pub fn sub(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(-p);
        }
    }

    /// The exact sum rounded to nearest, ties to even.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // round-half-even correction when the remaining partials push past a tie
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Signed per-feature importances; index `f - 1` holds `I_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(values: Vec<f64>) -> Self {
        ImportanceVector(values)
    }

    /// `I_f` for a 1-based feature.
    pub fn get(&self, feature: usize) -> f64 {
        self.0[feature - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Feature with the largest `|I_f|` and that magnitude; ties go to the
    /// lowest feature id.
    pub fn max_abs(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.0.iter().enumerate() {
            let m = v.abs();
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i + 1, m));
            }
        }
        best
    }
}

/// Work counters for the complexity contract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FirmCounters {
    /// FIRM invocations.
    pub calls: u64,
    /// Scoring-function evaluations.
    pub g_evaluations: u64,
    /// Tuples read across all invocations.
    pub tuple_visits: u64,
}

/// Importances over `(source state, score)` samples; each sample counts as
/// one `g` evaluation and one tuple visit.
pub fn firm_scored<I>(
    samples: I,
    num_features: usize,
    counters: &mut FirmCounters,
) -> Result<ImportanceVector, FirmError>
where
    I: IntoIterator<Item = (State, f64)>,
{
    counters.calls += 1;
    let mut n: u64 = 0;
    let mut total = ExactSum::new();
    let mut zero_count = vec![0u64; num_features];
    let mut zero_sum = vec![ExactSum::new(); num_features];
    for (s, score) in samples {
        if s.width() != num_features {
            return Err(FirmError::WidthMismatch {
                expected: num_features,
                found: s.width(),
            });
        }
        counters.g_evaluations += 1;
        counters.tuple_visits += 1;
        n += 1;
        total.add(score);
        let bits = s.index();
        for f in 0..num_features {
            if bits >> (num_features - 1 - f) & 1 == 0 {
                zero_count[f] += 1;
                zero_sum[f].add(score);
            }
        }
    }
    if n == 0 {
        return Err(FirmError::EmptySet);
    }
    let values = zero_count
        .iter()
        .zip(&zero_sum)
        .map(|(&n0, sum0)| {
            let n1 = n - n0;
            if n0 == 0 || n1 == 0 {
                return 0.0;
            }
            let mut sum1 = total.clone();
            sum1.sub(sum0);
            let q0 = sum0.value() / n0 as f64;
            let q1 = sum1.value() / n1 as f64;
            let p0 = n0 as f64 / n as f64;
            let p1 = n1 as f64 / n as f64;
            (q0 - q1) * (p0 * p1).sqrt()
        })
        .collect();
    Ok(ImportanceVector(values))
}

/// Importances of every feature over the source states of `tuples`, with
/// respect to the score `g(t_s)`. `g` is called exactly once per tuple.
pub fn firm_all_features<G>(tuples: &[TransitionTuple], g: G) -> Result<ImportanceVector, FirmError>
where
    G: FnMut(&State) -> f64,
{
    firm_counted(tuples, g, &mut FirmCounters::default())
}

pub fn firm_counted<G>(
    tuples: &[TransitionTuple],
    mut g: G,
    counters: &mut FirmCounters,
) -> Result<ImportanceVector, FirmError>
where
    G: FnMut(&State) -> f64,
{
    let first = tuples.first().ok_or(FirmError::EmptySet)?;
    let width = first.s.width();
    firm_scored(tuples.iter().map(|t| (t.s, g(&t.s))), width, counters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Action;
    use proptest::prelude::*;

    fn tuple(s: State) -> TransitionTuple {
        TransitionTuple {
            s,
            a: Action::new(1).unwrap(),
            s_next: s,
            r: -1.0,
            terminal: false,
        }
    }

    /// Two-pass evaluation straight from the definition.
    fn naive(states: &[State], scores: &[f64]) -> Vec<f64> {
        let width = states[0].width();
        (1..=width)
            .map(|f| {
                let zeros: Vec<f64> = states
                    .iter()
                    .zip(scores)
                    .filter(|(s, _)| !s.get(f))
                    .map(|(_, &g)| g)
                    .collect();
                let ones: Vec<f64> = states
                    .iter()
                    .zip(scores)
                    .filter(|(s, _)| s.get(f))
                    .map(|(_, &g)| g)
                    .collect();
                if zeros.is_empty() || ones.is_empty() {
                    return 0.0;
                }
                let n = states.len() as f64;
                let q0 = zeros.iter().sum::<f64>() / zeros.len() as f64;
                let q1 = ones.iter().sum::<f64>() / ones.len() as f64;
                (q0 - q1) * ((zeros.len() as f64 / n) * (ones.len() as f64 / n)).sqrt()
            })
            .collect()
    }

    #[test]
    fn two_feature_example() {
        let tuples: Vec<_> = ["00", "01", "10", "11"]
            .iter()
            .map(|s| tuple(s.parse().unwrap()))
            .collect();
        let imp = firm_all_features(&tuples, |s| if s.get(1) { 3.0 } else { 1.0 }).unwrap();
        assert_eq!(imp.values(), &[-1.0, 0.0]);
    }

    #[test]
    fn constant_score_and_constant_feature() {
        let tuples: Vec<_> = ["010", "011", "110", "111"]
            .iter()
            .map(|s| tuple(s.parse().unwrap()))
            .collect();
        let imp = firm_all_features(&tuples, |_| -7.5).unwrap();
        assert!(imp.values().iter().all(|&v| v == 0.0));
        // feature 2 is 1 everywhere
        let imp = firm_all_features(&tuples, |s| s.index() as f64).unwrap();
        assert_eq!(imp.get(2), 0.0);
        assert!(imp.get(1) != 0.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert_eq!(firm_all_features(&[], |_| 0.0), Err(FirmError::EmptySet));
    }

    #[test]
    fn duplicates_weight_like_an_expanded_multiset() {
        let base: Vec<State> = ["00", "01", "10", "11"].iter().map(|s| s.parse().unwrap()).collect();
        let score = |s: &State| (s.index() as f64).powi(2) - 1.5;
        // repeat "10" five times and "01" twice
        let mut expanded = base.clone();
        expanded.extend(std::iter::repeat(base[2]).take(4));
        expanded.push(base[1]);
        let tuples: Vec<_> = expanded.iter().map(|&s| tuple(s)).collect();
        let imp = firm_all_features(&tuples, score).unwrap();
        let scores: Vec<f64> = expanded.iter().map(score).collect();
        let oracle = naive(&expanded, &scores);
        for (a, b) in imp.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_one_evaluation_per_tuple() {
        let tuples: Vec<_> = (0..37).map(|i| tuple(State::from_index(i % 16, 4))).collect();
        let mut calls = 0;
        let mut counters = FirmCounters::default();
        firm_counted(
            &tuples,
            |s| {
                calls += 1;
                s.index() as f64
            },
            &mut counters,
        )
        .unwrap();
        assert_eq!(calls, 37);
        assert_eq!(counters.g_evaluations, 37);
        assert_eq!(counters.tuple_visits, 37);
        assert_eq!(counters.calls, 1);
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        let mut s = ExactSum::new();
        for x in [1e100, 1.0, -1e100, 1e-100] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0);
        let mut t = ExactSum::new();
        for _ in 0..10 {
            t.add(0.1);
        }
        assert_eq!(t.value(), 1.0);
        let mut u = t.clone();
        u.sub(&t);
        assert_eq!(u.value(), 0.0);
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(
            width in 1usize..10,
            raw in prop::collection::vec((any::<u64>(), -50.0f64..50.0), 1..300),
        ) {
            let states: Vec<State> = raw.iter().map(|(b, _)| State::from_index(b & ((1 << width) - 1), width)).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, g)| *g).collect();
            let samples = states.iter().copied().zip(scores.iter().copied());
            let imp = firm_scored(samples, width, &mut FirmCounters::default()).unwrap();
            let oracle = naive(&states, &scores);
            for (a, b) in imp.values().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }

        #[test]
        fn permutation_invariant(
            width in 1usize..8,
            raw in prop::collection::vec((any::<u64>(), -1e6f64..1e6), 1..200),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let samples: Vec<(State, f64)> = raw.iter().map(|(b, g)| (State::from_index(b & ((1 << width) - 1), width), *g)).collect();
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = firm_scored(samples, width, &mut FirmCounters::default()).unwrap();
            let b = firm_scored(shuffled, width, &mut FirmCounters::default()).unwrap();
            // bit-identical
            prop_assert_eq!(
                a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn exact_sum_matches_integer_arithmetic(xs in prop::collection::vec(-1_000_000i64..1_000_000, 0..100)) {
            // scaled integers are exactly representable, so the exact sum is known
            let mut s = ExactSum::new();
            for &x in &xs {
                s.add(x as f64 * 0.125);
            }
            let exact: i64 = xs.iter().sum();
            prop_assert_eq!(s.value(), exact as f64 * 0.125);
        }
    }
}
