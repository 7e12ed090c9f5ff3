//! Discrete weighted score measures with a distinguished atom at +infinity.
//!
//! A [`WeightedScoreMeasure`] is the object every conformal threshold in this
//! crate is read from: a finite set of score atoms, each carrying a
//! nonnegative weight, optionally topped by an atom at `+inf` standing in for
//! the unseen score of the query point. Quantiles use the left-continuous
//! generalized inverse `inf { v : mu((-inf, v]) >= beta }`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when comparing a cumulative weight against a quantile level.
///
/// Normalized weights are sums of floating-point fractions; `9 * 0.1` lands a
/// hair below `0.9`. Levels within this slack of a cumulative weight count as
/// reached.
pub const LEVEL_TOLERANCE: f64 = 1e-12;

/// Normalized weights may drift from unit mass by at most this much.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure needs at least one atom")]
    EmptyInput,
    #[error("got {scores} scores but {weights} weights")]
    LengthMismatch { scores: usize, weights: usize },
    #[error("non-finite or negative input: {0}")]
    NonFinite(String),
}

/// A score on the extended half-line: a finite real or `+inf`.
///
/// `Infinity` is its own variant rather than `f64::INFINITY`, so ordering is
/// total and a NaN can never pass for the infinity atom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    Infinity,
}

impl Extended {
    /// Maps `+inf` to [`Extended::Infinity`]; rejects NaN and `-inf`.
    pub fn from_f64(v: f64) -> Option<Self> {
        if v.is_nan() || v == f64::NEG_INFINITY {
            None
        } else if v == f64::INFINITY {
            Some(Extended::Infinity)
        } else {
            Some(Extended::Finite(v))
        }
    }

    /// The value as a float, `+inf` for the infinity atom.
    pub fn to_f64(self) -> f64 {
        match self {
            Extended::Finite(v) => v,
            Extended::Infinity => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinity)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinity => None,
        }
    }
}

impl Eq for Extended {}

impl PartialOrd for Extended {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Extended {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => a.total_cmp(b),
            (Extended::Finite(_), Extended::Infinity) => Ordering::Less,
            (Extended::Infinity, Extended::Finite(_)) => Ordering::Greater,
            (Extended::Infinity, Extended::Infinity) => Ordering::Equal,
        }
    }
}

impl From<f64> for Extended {
    /// Panics on NaN; use [`Extended::from_f64`] for untrusted input.
    fn from(v: f64) -> Self {
        Extended::from_f64(v).expect("score must not be NaN or -inf")
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinity => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreAtom {
    pub value: Extended,
    pub weight: f64,
}

/// Normalized discrete measure over extended-real scores.
///
/// Atoms are strictly increasing in value (equal values are merged), weights
/// sum to one, and an infinity atom, if present, is last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedScoreMeasure {
    atoms: Vec<ScoreAtom>,
    /// Mass of the inputs before normalization.
    total: f64,
}

impl WeightedScoreMeasure {
    /// Builds a normalized, sorted, merged measure from parallel score and
    /// weight lists.
    pub fn build(scores: &[Extended], weights: &[f64]) -> Result<Self, MeasureError> {
        if scores.len() != weights.len() {
            return Err(MeasureError::LengthMismatch {
                scores: scores.len(),
                weights: weights.len(),
            });
        }
        if scores.is_empty() {
            return Err(MeasureError::EmptyInput);
        }
        for (s, w) in scores.iter().zip(weights) {
            if let Extended::Finite(v) = s {
                if !v.is_finite() {
                    return Err(MeasureError::NonFinite(format!("score {v}")));
                }
            }
            if !w.is_finite() || *w < 0.0 {
                return Err(MeasureError::NonFinite(format!("weight {w}")));
            }
        }

        let mut pairs: Vec<(Extended, f64)> =
            scores.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));

        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(MeasureError::NonFinite(format!("weight sum {total}")));
        }

        let mut atoms: Vec<ScoreAtom> = Vec::with_capacity(pairs.len());
        for (value, w) in pairs {
            match atoms.last_mut() {
                Some(last) if last.value == value => last.weight += w,
                _ => atoms.push(ScoreAtom { value, weight: w }),
            }
        }
        for atom in &mut atoms {
            atom.weight /= total;
        }

        Ok(Self { atoms, total })
    }

    pub fn atoms(&self) -> &[ScoreAtom] {
        &self.atoms
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// `inf { v : mu((-inf, v]) >= beta }`, scanning cumulative weights.
    ///
    /// `beta` is expected in `(0, 1]`. If rounding keeps the cumulative mass
    /// below `beta` to the end, the last atom is returned.
    pub fn quantile(&self, beta: f64) -> Extended {
        let mut cumulative = 0.0;
        for atom in &self.atoms {
            cumulative += atom.weight;
            if cumulative >= beta - LEVEL_TOLERANCE {
                return atom.value;
            }
        }
        self.atoms.last().map(|a| a.value).unwrap_or(Extended::Infinity)
    }

    /// Total weight of atoms with value `<= v`.
    pub fn cdf_at(&self, v: Extended) -> f64 {
        self.atoms
            .iter()
            .take_while(|a| a.value <= v)
            .map(|a| a.weight)
            .sum()
    }
}

/// Free-function form of [`WeightedScoreMeasure::build`].
pub fn build_measure(
    scores: &[Extended],
    weights: &[f64],
) -> Result<WeightedScoreMeasure, MeasureError> {
    WeightedScoreMeasure::build(scores, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const INF: Extended = Extended::Infinity;

    fn f(v: f64) -> Extended {
        Extended::Finite(v)
    }

    fn assert_atoms(m: &WeightedScoreMeasure, expected: &[(Extended, f64)]) {
        assert_eq!(m.atoms().len(), expected.len(), "{:?}", m.atoms());
        for (atom, (v, w)) in m.atoms().iter().zip(expected) {
            assert_eq!(atom.value, *v);
            assert_abs_diff_eq!(atom.weight, *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn build_uniform() {
        let m = build_measure(&[f(1.0), f(2.0), INF], &[1.0, 1.0, 1.0]).unwrap();
        assert_atoms(&m, &[(f(1.0), 1.0 / 3.0), (f(2.0), 1.0 / 3.0), (INF, 1.0 / 3.0)]);
    }

    #[test]
    fn build_merges_equal_values() {
        let m = build_measure(&[f(2.0), f(2.0), f(5.0)], &[0.2, 0.3, 0.5]).unwrap();
        assert_atoms(&m, &[(f(2.0), 0.5), (f(5.0), 0.5)]);
    }

    #[test]
    fn build_sorts_and_normalizes() {
        let m = build_measure(&[f(3.0), f(1.0), INF], &[2.0, 6.0, 2.0]).unwrap();
        assert_atoms(&m, &[(f(1.0), 0.6), (f(3.0), 0.2), (INF, 0.2)]);
        assert_abs_diff_eq!(m.total(), 10.0);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert_eq!(build_measure(&[], &[]), Err(MeasureError::EmptyInput));
        assert!(matches!(
            build_measure(&[f(1.0)], &[1.0, 2.0]),
            Err(MeasureError::LengthMismatch { .. })
        ));
        assert!(matches!(
            build_measure(&[f(1.0)], &[f64::NAN]),
            Err(MeasureError::NonFinite(_))
        ));
        assert!(matches!(
            build_measure(&[f(1.0)], &[-1.0]),
            Err(MeasureError::NonFinite(_))
        ));
        assert!(matches!(
            build_measure(&[f(1.0), f(2.0)], &[0.0, 0.0]),
            Err(MeasureError::NonFinite(_))
        ));
        assert!(matches!(
            build_measure(&[f(f64::NAN)], &[1.0]),
            Err(MeasureError::NonFinite(_))
        ));
    }

    #[test]
    fn infinity_atom_is_last_and_unique() {
        let m = build_measure(&[INF, f(1.0), INF], &[1.0, 1.0, 2.0]).unwrap();
        assert_atoms(&m, &[(f(1.0), 0.25), (INF, 0.75)]);
    }

    #[test]
    fn quantile_examples() {
        let mut scores: Vec<Extended> = (1..=10).map(|i| f(i as f64)).collect();
        scores.push(INF);
        let m = build_measure(&scores, &[1.0; 11]).unwrap();
        assert_eq!(m.quantile(0.9), f(10.0));

        let m = build_measure(&[INF], &[1.0]).unwrap();
        assert_eq!(m.quantile(0.5), INF);

        let m = build_measure(&[f(1.0), f(2.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(m.quantile(0.5), f(1.0));
    }

    #[test]
    fn quantile_reaches_level_despite_rounding() {
        // nine atoms of 0.1 accumulate to 0.8999999999999999
        let mut scores: Vec<Extended> = (1..=9).map(|i| f(i as f64)).collect();
        scores.push(INF);
        let m = build_measure(&scores, &[1.0; 10]).unwrap();
        assert_eq!(m.quantile(0.9), f(9.0));
    }

    #[test]
    fn cdf_examples() {
        let m = build_measure(&[f(1.0), f(3.0), INF], &[0.6, 0.2, 0.2]).unwrap();
        assert_abs_diff_eq!(m.cdf_at(f(2.0)), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.cdf_at(INF), 1.0, epsilon = 1e-12);
        let m = build_measure(&[f(1.0), f(2.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(m.cdf_at(f(0.5)), 0.0);
    }

    #[test]
    fn extended_ordering() {
        assert!(f(1e300) < INF);
        assert!(f(-1.0) < f(0.0));
        assert_eq!(Extended::from_f64(f64::INFINITY), Some(INF));
        assert_eq!(Extended::from_f64(f64::NAN), None);
        assert_eq!(INF.to_f64(), f64::INFINITY);
    }

    /// Order statistic of the finite scores, or `inf` when the rank overflows.
    fn scp_order_statistic(scores: &[f64], alpha: f64) -> Extended {
        let n = scores.len();
        let rank = ((1.0 - alpha) * (n as f64 + 1.0) - 1e-9).ceil() as usize;
        if rank > n {
            return INF;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        f(sorted[rank - 1])
    }

    #[test]
    fn uniform_measure_matches_order_statistic_exhaustively() {
        for n in 1..=20usize {
            for &alpha in &[0.05, 0.1, 0.2] {
                // distinct scores in a scrambled order
                let scores: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % n) as f64 + 0.5).collect();
                let mut ext: Vec<Extended> = scores.iter().map(|&s| f(s)).collect();
                ext.push(INF);
                let m = build_measure(&ext, &vec![1.0; n + 1]).unwrap();
                assert_eq!(
                    m.quantile(1.0 - alpha),
                    scp_order_statistic(&scores, alpha),
                    "n={n} alpha={alpha}"
                );
            }
        }
    }

    /// Brute force: for each candidate value, sum raw input weights at or below
    /// it, and take the smallest candidate whose normalized mass reaches beta.
    fn brute_force_quantile(scores: &[Extended], weights: &[f64], beta: f64) -> Extended {
        let total: f64 = weights.iter().sum();
        let mut candidates = scores.to_vec();
        candidates.sort();
        for c in candidates {
            let mass: f64 = scores
                .iter()
                .zip(weights)
                .filter(|(s, _)| **s <= c)
                .map(|(_, w)| w)
                .sum();
            if mass / total >= beta - LEVEL_TOLERANCE {
                return c;
            }
        }
        *scores.iter().max().unwrap()
    }

    fn arb_measure_input() -> impl Strategy<Value = (Vec<Extended>, Vec<f64>)> {
        (1usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec(
                    prop_oneof![
                        9 => (0u32..40).prop_map(|k| Extended::Finite(k as f64 * 0.25)),
                        1 => Just(Extended::Infinity),
                    ],
                    n,
                ),
                prop::collection::vec(0.0f64..10.0, n),
            )
                .prop_filter("positive mass", |(_, w)| w.iter().sum::<f64>() > 1e-6)
        })
    }

    proptest! {
        #[test]
        fn quantile_is_minimal_atom_reaching_level(
            (scores, weights) in arb_measure_input(),
            beta in 0.001f64..=1.0,
        ) {
            let m = build_measure(&scores, &weights).unwrap();
            let q = m.quantile(beta);
            prop_assert_eq!(q, brute_force_quantile(&scores, &weights, beta));
            prop_assert!(m.cdf_at(q) >= beta - 1e-9);
            for atom in m.atoms().iter().filter(|a| a.value < q) {
                prop_assert!(m.cdf_at(atom.value) < beta);
            }
        }

        #[test]
        fn quantile_monotone_in_level(
            (scores, weights) in arb_measure_input(),
            a in 0.001f64..=1.0,
            b in 0.001f64..=1.0,
        ) {
            let m = build_measure(&scores, &weights).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.quantile(lo) <= m.quantile(hi));
        }

        #[test]
        fn build_invariant_to_permutation_and_scale(
            (scores, weights) in arb_measure_input(),
            scale in 0.01f64..100.0,
            rotate in 0usize..50,
        ) {
            let m = build_measure(&scores, &weights).unwrap();
            let k = rotate % scores.len();
            let mut s2 = scores.clone();
            let mut w2: Vec<f64> = weights.iter().map(|w| w * scale).collect();
            s2.rotate_left(k);
            w2.rotate_left(k);
            s2.reverse();
            w2.reverse();
            let m2 = build_measure(&s2, &w2).unwrap();
            prop_assert_eq!(m.atoms().len(), m2.atoms().len());
            for (a, b) in m.atoms().iter().zip(m2.atoms()) {
                prop_assert_eq!(a.value, b.value);
                prop_assert!((a.weight - b.weight).abs() <= 1e-12);
            }
            let mass: f64 = m.atoms().iter().map(|a| a.weight).sum();
            prop_assert!((mass - 1.0).abs() <= NORMALIZATION_TOLERANCE);
        }
    }
}
