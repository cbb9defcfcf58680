//! Explicit degree-one splines whose conformal prediction set is a chosen
//! union of intervals.

use super::{Degree, IntervalUnion, SplineDensity, SplineError};
use serde::{Deserialize, Serialize};

/// Spacing used to separate knots that would otherwise coincide.
pub const INERT_KNOT_SPACING: f64 = 1e-9;

/// Which conformal set the construction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstructionMode {
    /// Negative-density score; the cutoff is a density level `-q`.
    NegativeDensity,
    /// HPD score; the cutoff is a probability mass `-q`.
    Hpd,
}

/// Builds a density with `4 * max_intervals + 2` knots whose prediction
/// set at `cutoff` (`-q`) is `target`.
///
/// The density is flat at `1 / |target|` on every target interval and zero
/// elsewhere. Each interval uses four knots (two at each end, one at zero
/// height and one at full height); two more close the spline and any spare
/// knots sit at height zero next to `y = 1`. Knots that would coincide are
/// pushed apart by [`INERT_KNOT_SPACING`].
pub fn construct_for_set(
    target: &IntervalUnion,
    cutoff: f64,
    mode: ConstructionMode,
    max_intervals: usize,
) -> Result<SplineDensity, SplineError> {
    let m = target.len();
    if m == 0 {
        return Err(SplineError::Construction("target set is empty".into()));
    }
    if m > max_intervals {
        return Err(SplineError::Construction(format!(
            "{m} intervals exceed the budget of {max_intervals}"
        )));
    }
    let first = target.intervals()[0].lo;
    let last = target.intervals()[m - 1].hi;
    if first < 0.0 || last > 1.0 {
        return Err(SplineError::Construction(
            "target must lie inside [0, 1]".into(),
        ));
    }
    let size = target.size();
    match mode {
        ConstructionMode::NegativeDensity if !(cutoff * size > 0.0 && cutoff * size < 1.0) => {
            return Err(SplineError::Construction(format!(
                "need 0 < cutoff * |target| < 1, got {}",
                cutoff * size
            )));
        }
        ConstructionMode::Hpd if !(cutoff > 0.0 && cutoff < 1.0) => {
            return Err(SplineError::Construction(format!(
                "need 0 < cutoff < 1, got {cutoff}"
            )));
        }
        _ => {}
    }

    // For the negative-density set the plateau is cutoff + (1/|P| - cutoff),
    // which is the same 1/|P| the HPD construction uses.
    let plateau = 1.0 / size;
    let knots = 4 * max_intervals + 2;
    let mut positions = Vec::with_capacity(knots);
    let mut heights = Vec::with_capacity(knots);
    positions.push(0.0);
    heights.push(0.0);
    for iv in target.intervals() {
        for (t, h) in [
            (iv.lo, 0.0),
            (iv.lo, plateau),
            (iv.hi, plateau),
            (iv.hi, 0.0),
        ] {
            positions.push(t);
            heights.push(h);
        }
    }
    while positions.len() < knots {
        positions.push(1.0);
        heights.push(0.0);
    }

    for i in 1..knots {
        positions[i] = positions[i].max(positions[i - 1] + INERT_KNOT_SPACING);
    }
    positions[knots - 1] = 1.0;
    for i in (1..knots - 1).rev() {
        positions[i] = positions[i].min(positions[i + 1] - INERT_KNOT_SPACING);
    }
    if positions[1] <= positions[0] {
        return Err(SplineError::Construction(
            "too many knots to separate".into(),
        ));
    }

    SplineDensity::new(Degree::Linear, positions, heights)
}
