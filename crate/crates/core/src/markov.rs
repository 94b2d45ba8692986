//! First-order Markov transition counts over a time-ordered state sequence.

use std::fmt::Write as _;

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("state {state} out of range for {k} states")]
    StateOutOfRange { state: usize, k: usize },
    #[error("transition count ({from}, {to}) would go negative")]
    NegativeCount { from: usize, to: usize },
    #[error("state count must be positive")]
    ZeroStates,
}

/// Transitions entering or leaving the window on one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeDelta {
    /// Pairs that fell off the old end, under the states they had when they
    /// were counted.
    pub evicted: SmallVec<[(usize, usize); 1]>,
    /// The pair ending at the newest event, under current states.
    pub appended: Option<(usize, usize)>,
}

/// `k x k` transition counts; probabilities are derived on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMatrix {
    k: usize,
    counts: Vec<u64>,
    row_totals: Vec<u64>,
}

impl TransitionMatrix {
    pub fn new(k: usize) -> Result<Self, MarkovError> {
        if k == 0 {
            return Err(MarkovError::ZeroStates);
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
            row_totals: vec![0; k],
        })
    }

    /// Tallies every consecutive pair of `states`.
    pub fn rebuild_counts(
        states: impl IntoIterator<Item = usize>,
        k: usize,
    ) -> Result<Self, MarkovError> {
        let mut m = Self::new(k)?;
        let mut prev: Option<usize> = None;
        for s in states {
            m.check(s)?;
            if let Some(p) = prev {
                m.counts[p * k + s] += 1;
                m.row_totals[p] += 1;
            }
            prev = Some(s);
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.k + to]
    }

    pub fn row_total(&self, from: usize) -> u64 {
        self.row_totals[from]
    }

    pub fn total(&self) -> u64 {
        self.row_totals.iter().sum()
    }

    /// Relative frequency of `from -> to`; 0 for a row with no observations.
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        match self.row_totals[from] {
            0 => 0.0,
            total => self.count(from, to) as f64 / total as f64,
        }
    }

    /// Brings the counts in line with `states` after a window update.
    ///
    /// Rows and columns of `changed` (states that gained or lost existing
    /// events through reassignment) are recounted from `states`. All other
    /// cells can only differ by the window's edge transitions, which are
    /// applied from `edges`.
    pub fn refresh(
        &mut self,
        states: impl IntoIterator<Item = usize>,
        changed: &[usize],
        edges: &EdgeDelta,
    ) -> Result<(), MarkovError> {
        let k = self.k;
        let mut mask = vec![false; k];
        for &c in changed {
            self.check(c)?;
            mask[c] = true;
        }
        let touches = |a: usize, b: usize| mask[a] || mask[b];
        for &(a, b) in &edges.evicted {
            self.check(a)?;
            self.check(b)?;
            if !touches(a, b) {
                self.decrement(a, b)?;
            }
        }
        if let Some((a, b)) = edges.appended {
            self.check(a)?;
            self.check(b)?;
            if !touches(a, b) {
                self.counts[a * k + b] += 1;
                self.row_totals[a] += 1;
            }
        }
        if changed.is_empty() {
            return Ok(());
        }

        for i in 0..k {
            for j in 0..k {
                if touches(i, j) {
                    self.counts[i * k + j] = 0;
                }
            }
        }
        let mut prev: Option<usize> = None;
        for s in states {
            self.check(s)?;
            if let Some(p) = prev {
                if touches(p, s) {
                    self.counts[p * k + s] += 1;
                }
            }
            prev = Some(s);
        }
        for (i, total) in self.row_totals.iter_mut().enumerate() {
            *total = self.counts[i * k..(i + 1) * k].iter().sum();
        }
        Ok(())
    }

    /// Row-major probabilities, one CSV line per source state.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k)
                .map(|j| self.probability(i, j).to_string())
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    fn decrement(&mut self, from: usize, to: usize) -> Result<(), MarkovError> {
        let cell = &mut self.counts[from * self.k + to];
        if *cell == 0 {
            return Err(MarkovError::NegativeCount { from, to });
        }
        *cell -= 1;
        self.row_totals[from] -= 1;
        Ok(())
    }

    fn check(&self, state: usize) -> Result<(), MarkovError> {
        if state >= self.k {
            Err(MarkovError::StateOutOfRange { state, k: self.k })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_row() {
        // C2 -> C3 -> C2 -> C2 -> C1 with C_i at index i-1
        let m = TransitionMatrix::rebuild_counts([1, 2, 1, 1, 0], 3).unwrap();
        assert_eq!(m.probability(1, 0), 1.0 / 3.0);
        assert_eq!(m.row_total(1), 3);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn degenerate_sequences() {
        let m = TransitionMatrix::rebuild_counts([0], 4).unwrap();
        assert_eq!(m.total(), 0);
        assert_eq!(m.probability(0, 0), 0.0);
        let m = TransitionMatrix::rebuild_counts([0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.count(0, 0), 3);
        assert_eq!(m.probability(0, 0), 1.0);
        assert_eq!(m.probability(1, 0), 0.0);
        assert_eq!(
            TransitionMatrix::rebuild_counts([0, 3], 3),
            Err(MarkovError::StateOutOfRange { state: 3, k: 3 })
        );
    }

    #[test]
    fn edge_only_refresh() {
        // window [0,1,1,0] slides to [1,1,0,0]: no reassignment
        let mut m = TransitionMatrix::rebuild_counts([0, 1, 1, 0], 2).unwrap();
        let states = [1, 1, 0, 0];
        let edges = EdgeDelta {
            evicted: smallvec::smallvec![(0, 1)],
            appended: Some((0, 0)),
        };
        let before = m.clone();
        m.refresh(states, &[], &edges).unwrap();
        assert_eq!(m, TransitionMatrix::rebuild_counts(states, 2).unwrap());
        let diffs: i64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (m.count(i, j) as i64 - before.count(i, j) as i64).abs())
            .sum();
        assert_eq!(diffs, 2);
    }

    #[test]
    fn negative_count_is_an_error() {
        let mut m = TransitionMatrix::rebuild_counts([0, 0], 2).unwrap();
        let edges = EdgeDelta {
            evicted: smallvec::smallvec![(1, 1)],
            appended: None,
        };
        assert_eq!(
            m.refresh([0], &[], &edges),
            Err(MarkovError::NegativeCount { from: 1, to: 1 })
        );
    }

    #[test]
    fn csv_dump() {
        let m = TransitionMatrix::rebuild_counts([0, 1, 1, 0], 2).unwrap();
        assert_eq!(m.to_csv(), "0,1\n0.5,0.5\n");
    }

    proptest! {
        #[test]
        fn full_refresh_equals_rebuild(k in 1usize..6, old in prop::collection::vec(0usize..6, 0..40), new in prop::collection::vec(0usize..6, 0..40)) {
            let old: Vec<usize> = old.into_iter().map(|s| s % k).collect();
            let new: Vec<usize> = new.into_iter().map(|s| s % k).collect();
            let mut m = TransitionMatrix::rebuild_counts(old.iter().copied(), k).unwrap();
            let all: Vec<usize> = (0..k).collect();
            m.refresh(new.iter().copied(), &all, &EdgeDelta::default()).unwrap();
            prop_assert_eq!(&m, &TransitionMatrix::rebuild_counts(new.iter().copied(), k).unwrap());
            for i in 0..k {
                if m.row_total(i) > 0 {
                    let s: f64 = (0..k).map(|j| m.probability(i, j)).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
            prop_assert_eq!(m.total() as usize, new.len().saturating_sub(1));
        }
    }
}
