use serde::{Deserialize, Serialize};

/// Gaps and lengths below this are representational noise.
pub const INTERVAL_EPS: f64 = 1e-12;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// Finite union of disjoint, sorted, closed intervals.
///
/// Construction merges intervals that overlap or are closer than
/// [`INTERVAL_EPS`], then drops any shorter than [`INTERVAL_EPS`], so
/// `a_i < b_i < a_{i+1}` always holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalUnion {
    intervals: Vec<Interval>,
}

impl IntervalUnion {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn unit() -> Self {
        Self {
            intervals: vec![Interval::new(0.0, 1.0)],
        }
    }

    pub fn from_intervals(items: impl IntoIterator<Item = Interval>) -> Self {
        let mut items: Vec<Interval> = items.into_iter().filter(|i| i.hi >= i.lo).collect();
        items.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut merged: Vec<Interval> = Vec::with_capacity(items.len());
        for it in items {
            match merged.last_mut() {
                Some(last) if it.lo - last.hi < INTERVAL_EPS => last.hi = last.hi.max(it.hi),
                _ => merged.push(it),
            }
        }
        merged.retain(|i| i.len() >= INTERVAL_EPS);
        Self { intervals: merged }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self::from_intervals(pairs.iter().map(|&(a, b)| Interval::new(a, b)))
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Total length `sum(b_i - a_i)`.
    pub fn size(&self) -> f64 {
        self.intervals.iter().map(Interval::len).sum()
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        let idx = self.intervals.partition_point(|i| i.hi < y);
        self.intervals.get(idx).is_some_and(|i| i.contains(y))
    }

    /// Image under `y -> scale * y + shift` with `scale > 0`.
    pub fn affine(&self, scale: f64, shift: f64) -> Self {
        Self {
            intervals: self
                .intervals
                .iter()
                .map(|i| Interval::new(scale * i.lo + shift, scale * i.hi + shift))
                .collect(),
        }
    }

    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        self.intervals.iter().map(|i| [i.lo, i.hi]).collect()
    }

    /// Set inclusion up to `tol` at the endpoints.
    pub fn is_superset_of(&self, other: &IntervalUnion, tol: f64) -> bool {
        other.intervals.iter().all(|o| {
            self.intervals
                .iter()
                .any(|s| s.lo <= o.lo + tol && o.hi <= s.hi + tol)
        })
    }
}
