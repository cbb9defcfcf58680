//! Zero-truncated piecewise-polynomial densities on `[0, 1]`.
//!
//! A density is described by `K` sorted knot positions and `n(K-1)+1`
//! heights. Each segment carries the degree-`n` Lagrange polynomial through
//! its evenly spaced interpolation points; the density is the positive part
//! of that polynomial divided by the total positive mass `Z`.
//!
//! Segment polynomials are stored in the local coordinate
//! `s = (y - t_i) / (t_{i+1} - t_i)`, which keeps root finding well
//! conditioned for narrow segments. [`SplineDensity::coefficients`] converts
//! back to `a y^2 + b y + c` in absolute coordinates.

mod construct;
mod intervals;
mod poly;

pub use construct::{construct_for_set, ConstructionMode, INERT_KNOT_SPACING};
pub use intervals::{Interval, IntervalUnion, INTERVAL_EPS};
pub use poly::{Pieces, Quadratic, Roots, DISCRIMINANT_FLOOR};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalizers at or below this mean every height is effectively zero.
pub const MIN_NORMALIZER: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("need at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("expected {expected} raw widths, got {got}")]
    WidthCount { expected: usize, got: usize },
    #[error("minimum knot spacing {spacing} must lie in [0, 1/{knots})")]
    MinSpacing { spacing: f64, knots: usize },
    #[error("invalid knot positions: {0}")]
    Positions(String),
    #[error("invalid heights: {0}")]
    Heights(String),
    #[error("interpolation points coincide at {0}")]
    DegenerateSegment(f64),
    #[error("empty integration range [{lo}, {hi}]")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("normalizer {0} is not positive; all heights are effectively zero")]
    DegenerateDensity(f64),
    #[error("y = {0} lies outside [0, 1]")]
    Domain(f64),
    #[error("construction precondition violated: {0}")]
    Construction(String),
}

/// Polynomial degree of every segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Degree {
    Linear,
    Quadratic,
}

impl Degree {
    pub fn order(self) -> usize {
        match self {
            Degree::Linear => 1,
            Degree::Quadratic => 2,
        }
    }

    /// Number of heights a spline with `knots` knots needs.
    pub fn height_count(self, knots: usize) -> usize {
        self.order() * (knots - 1) + 1
    }
}

impl TryFrom<u8> for Degree {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Degree::Linear),
            2 => Ok(Degree::Quadratic),
            other => Err(format!(
                "unsupported spline degree {other}; expected 1 or 2"
            )),
        }
    }
}

impl From<Degree> for u8 {
    fn from(d: Degree) -> u8 {
        d.order() as u8
    }
}

/// Maps `K-1` unnormalized widths to `K` sorted knots on `[0, 1]`.
///
/// Widths are softmaxed, floored at `min_spacing`, cumulatively summed with
/// a leading zero, and the last knot is bumped by `min_spacing` so it lands
/// on 1.
pub fn knot_positions(
    raw_widths: &[f64],
    knots: usize,
    min_spacing: f64,
) -> Result<Vec<f64>, SplineError> {
    if knots < 2 {
        return Err(SplineError::TooFewKnots(knots));
    }
    if raw_widths.len() != knots - 1 {
        return Err(SplineError::WidthCount {
            expected: knots - 1,
            got: raw_widths.len(),
        });
    }
    if !(0.0..1.0 / knots as f64).contains(&min_spacing) {
        return Err(SplineError::MinSpacing {
            spacing: min_spacing,
            knots,
        });
    }
    let max = raw_widths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw_widths.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let scale = 1.0 - min_spacing * knots as f64;

    let mut positions = Vec::with_capacity(knots);
    positions.push(0.0);
    let mut acc = 0.0;
    for e in &exps {
        acc += min_spacing + scale * e / total;
        positions.push(acc);
    }
    positions[knots - 1] = 1.0;
    Ok(positions)
}

/// Evenly spaced interpolation points `tau_i^j` for every segment.
pub fn intermediate_grid(positions: &[f64], degree: Degree) -> Vec<Vec<f64>> {
    let n = degree.order();
    positions
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            (0..=n)
                .map(|j| {
                    if j == n {
                        hi
                    } else {
                        lo + j as f64 * (hi - lo) / n as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Coefficients of the unique polynomial of degree `points.len() - 1`
/// (1 or 2) through `(points[j], heights[j])`.
pub fn lagrange_coefficients(points: &[f64], heights: &[f64]) -> Result<Quadratic, SplineError> {
    match (points, heights) {
        ([x0, x1], [h0, h1]) => {
            if x0 == x1 {
                return Err(SplineError::DegenerateSegment(*x0));
            }
            let slope = (h1 - h0) / (x1 - x0);
            Ok(Quadratic::new(0.0, slope, h0 - slope * x0))
        }
        ([x0, x1, x2], [h0, h1, h2]) => {
            for (p, q) in [(x0, x1), (x1, x2), (x0, x2)] {
                if p == q {
                    return Err(SplineError::DegenerateSegment(*p));
                }
            }
            let d01 = (h1 - h0) / (x1 - x0);
            let d12 = (h2 - h1) / (x2 - x1);
            let a = (d12 - d01) / (x2 - x0);
            let b = d01 - a * (x0 + x1);
            let c = h0 - x0 * d01 + a * x0 * x1;
            Ok(Quadratic::new(a, b, c))
        }
        _ => Err(SplineError::Heights(format!(
            "need 2 or 3 interpolation points with matching heights, got {} and {}",
            points.len(),
            heights.len()
        ))),
    }
}

/// `integral of max(q(y), 0)` over `[lo, hi]`.
pub fn segment_mass(q: &Quadratic, lo: f64, hi: f64) -> Result<f64, SplineError> {
    if !(lo < hi) {
        return Err(SplineError::EmptyRange { lo, hi });
    }
    Ok(q.positive_integral(lo, hi))
}

/// Trapezoid area of a nonnegative linear segment.
pub fn trapezoid_mass(lo: f64, hi: f64, h_lo: f64, h_hi: f64) -> f64 {
    0.5 * (hi - lo) * (h_lo + h_hi)
}

/// Local-coordinate polynomial through `(0, h0), (1/2, hm), (1, h1)`.
pub fn local_quadratic(h0: f64, hm: f64, h1: f64) -> Quadratic {
    Quadratic::new(
        2.0 * h0 - 4.0 * hm + 2.0 * h1,
        -3.0 * h0 + 4.0 * hm - h1,
        h0,
    )
}

/// Local-coordinate line through `(0, h0), (1, h1)`.
pub fn local_linear(h0: f64, h1: f64) -> Quadratic {
    Quadratic::new(0.0, h1 - h0, h0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Segment {
    lo: f64,
    hi: f64,
    local: Quadratic,
}

impl Segment {
    #[inline]
    fn width(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    fn to_local(&self, y: f64) -> f64 {
        (y - self.lo) / self.width()
    }

    #[inline]
    fn to_global(&self, s: f64) -> f64 {
        if s >= 1.0 {
            self.hi
        } else {
            self.lo + s * self.width()
        }
    }
}

/// Normalized, zero-truncated spline density on `[0, 1]`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineDensity {
    degree: Degree,
    positions: Vec<f64>,
    heights: Vec<f64>,
    segments: Vec<Segment>,
    normalizer: f64,
    min_spacing: f64,
}

impl SplineDensity {
    /// Builds and normalizes a density.
    ///
    /// `heights` lists the knot heights in order, with each segment's
    /// midpoint height between its endpoint heights when `degree` is
    /// quadratic. Knot heights must be nonnegative; midpoint heights are
    /// unconstrained.
    pub fn new(
        degree: Degree,
        positions: Vec<f64>,
        heights: Vec<f64>,
    ) -> Result<Self, SplineError> {
        let knots = positions.len();
        if knots < 2 {
            return Err(SplineError::TooFewKnots(knots));
        }
        if positions[0] != 0.0 || positions[knots - 1] != 1.0 {
            return Err(SplineError::Positions(format!(
                "first and last knots must be 0 and 1, got {} and {}",
                positions[0],
                positions[knots - 1]
            )));
        }
        let mut min_spacing = f64::INFINITY;
        for w in positions.windows(2) {
            let gap = w[1] - w[0];
            if !(gap > 0.0) {
                return Err(SplineError::Positions(format!(
                    "knots must be strictly increasing, found {} then {}",
                    w[0], w[1]
                )));
            }
            min_spacing = min_spacing.min(gap);
        }
        let expected = degree.height_count(knots);
        if heights.len() != expected {
            return Err(SplineError::Heights(format!(
                "expected {expected} heights for {knots} knots, got {}",
                heights.len()
            )));
        }
        if let Some(h) = heights.iter().find(|h| !h.is_finite()) {
            return Err(SplineError::Heights(format!("non-finite height {h}")));
        }
        let n = degree.order();
        if let Some(h) = heights.iter().step_by(n).find(|&&h| h < 0.0) {
            return Err(SplineError::Heights(format!("negative knot height {h}")));
        }

        let mut segments = Vec::with_capacity(knots - 1);
        let mut normalizer = 0.0;
        for i in 0..knots - 1 {
            let (lo, hi) = (positions[i], positions[i + 1]);
            let (local, mass) = match degree {
                Degree::Linear => {
                    let (h0, h1) = (heights[i], heights[i + 1]);
                    (local_linear(h0, h1), trapezoid_mass(lo, hi, h0, h1))
                }
                Degree::Quadratic => {
                    let (h0, hm, h1) = (heights[2 * i], heights[2 * i + 1], heights[2 * i + 2]);
                    let local = local_quadratic(h0, hm, h1);
                    (local, (hi - lo) * local.positive_integral(0.0, 1.0))
                }
            };
            normalizer += mass;
            segments.push(Segment { lo, hi, local });
        }
        if !(normalizer > MIN_NORMALIZER) {
            return Err(SplineError::DegenerateDensity(normalizer));
        }
        Ok(Self {
            degree,
            positions,
            heights,
            segments,
            normalizer,
            min_spacing,
        })
    }

    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn knots(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// `Z`, the positive mass of the unnormalized spline.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn min_spacing(&self) -> f64 {
        self.min_spacing
    }

    /// Interpolation points of every segment.
    pub fn interpolation_points(&self) -> Vec<Vec<f64>> {
        intermediate_grid(&self.positions, self.degree)
    }

    /// Unnormalized segment polynomials in absolute coordinates.
    pub fn coefficients(&self) -> Vec<Quadratic> {
        self.segments
            .iter()
            .map(|s| {
                let Quadratic { a, b, c } = s.local;
                let (w, t) = (s.width(), s.lo);
                let (aa, bb) = (a / (w * w), b / w);
                Quadratic::new(aa, bb - 2.0 * aa * t, aa * t * t - bb * t + c)
            })
            .collect()
    }

    /// Segment `l` with `t_l <= y < t_{l+1}`; `y = 1` maps to the last.
    pub fn segment_index(&self, y: f64) -> usize {
        let idx = self.positions.partition_point(|&t| t <= y);
        idx.saturating_sub(1).min(self.segments.len() - 1)
    }

    pub fn eval(&self, y: f64) -> Result<f64, SplineError> {
        if !(0.0..=1.0).contains(&y) {
            return Err(SplineError::Domain(y));
        }
        let seg = &self.segments[self.segment_index(y)];
        Ok(seg.local.eval(seg.to_local(y)).max(0.0) / self.normalizer)
    }

    /// Exact supremum of the normalized density.
    pub fn sup(&self) -> f64 {
        let mut best: f64 = 0.0;
        for seg in &self.segments {
            let p = seg.local;
            best = best.max(p.eval(0.0)).max(p.eval(1.0));
            if p.a < 0.0 {
                let v = -p.b / (2.0 * p.a);
                if v > 0.0 && v < 1.0 {
                    best = best.max(p.c - p.b * p.b / (4.0 * p.a));
                }
            }
        }
        best / self.normalizer
    }

    /// `{y : density(y) > level}` as disjoint intervals.
    pub fn level_set(&self, level: f64) -> IntervalUnion {
        self.level_set_counted(level).0
    }

    /// [`Self::level_set`] plus the number of segment visits it made.
    pub fn level_set_counted(&self, level: f64) -> (IntervalUnion, usize) {
        if level < 0.0 {
            return (IntervalUnion::unit(), 0);
        }
        let threshold = level * self.normalizer;
        let mut visits = 0;
        let mut out = Vec::new();
        for seg in &self.segments {
            visits += 1;
            for (s, e) in seg
                .local
                .shifted(threshold)
                .positive_pieces(0.0, 1.0)
                .iter()
            {
                out.push(Interval::new(seg.to_global(s), seg.to_global(e)));
            }
        }
        (IntervalUnion::from_intervals(out), visits)
    }

    /// Probability mass of `{y : density(y) > level}`.
    pub fn mass_above_level(&self, level: f64) -> f64 {
        self.mass_above_counted(level).0
    }

    fn mass_above_counted(&self, level: f64) -> (f64, usize) {
        if level < 0.0 {
            return (1.0, 0);
        }
        let threshold = level * self.normalizer;
        let mut visits = 0;
        let mut mass = 0.0;
        for seg in &self.segments {
            visits += 1;
            let pieces = seg.local.shifted(threshold).positive_pieces(0.0, 1.0);
            let local: f64 = pieces.iter().map(|(s, e)| seg.local.integral(s, e)).sum();
            mass += seg.width() * local;
        }
        (mass / self.normalizer, visits)
    }

    /// `integral of density over {y : density(y) <= level}`.
    pub fn mass_below_level(&self, level: f64) -> f64 {
        self.mass_below_counted(level).0
    }

    /// [`Self::mass_below_level`] plus the number of segment visits it made.
    pub fn mass_below_counted(&self, level: f64) -> (f64, usize) {
        let (above, visits) = self.mass_above_counted(level);
        ((1.0 - above).clamp(0.0, 1.0), visits)
    }

    /// Probability mass of an interval union, clipped to `[0, 1]`.
    pub fn mass_of(&self, set: &IntervalUnion) -> f64 {
        let mut mass = 0.0;
        for iv in set.intervals() {
            let (lo, hi) = (iv.lo.max(0.0), iv.hi.min(1.0));
            if hi <= lo {
                continue;
            }
            let first = self.segment_index(lo);
            let last = self.segment_index(hi);
            for seg in &self.segments[first..=last] {
                let s0 = seg.to_local(lo.max(seg.lo));
                let s1 = seg.to_local(hi.min(seg.hi));
                if s1 > s0 {
                    mass += seg.width() * seg.local.positive_integral(s0, s1);
                }
            }
        }
        mass / self.normalizer
    }
}
