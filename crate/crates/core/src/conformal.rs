//! Conformal scores, split-conformal calibration and prediction sets.
//!
//! Every set satisfies `y in set <=> score(y) <= q` up to ties at `q`,
//! except the HPD set which is exact only up to the bisection tolerance
//! on the density level.

use crate::model::{HistModel, ModelError, SplineModel};
use crate::output::extended_f64;
use crate::spline::{Interval, IntervalUnion, SplineDensity, SplineError};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Default number of HPD bisection steps.
pub const DEFAULT_BISECTION_STEPS: usize = 24;

/// Cheaper preset; the level bracket is then `sup / 2^15` wide.
pub const SHORT_BISECTION_STEPS: usize = 15;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("no calibration scores")]
    EmptyScores,
    #[error("miscoverage level {0} must lie strictly between 0 and 1")]
    Alpha(f64),
    #[error("non-finite calibration score {0}")]
    NonFiniteScore(f64),
    #[error("calibration is for {found} scores but {expected} was requested")]
    KindMismatch {
        expected: ScoreKind,
        found: ScoreKind,
    },
    #[error("bisection needs at least one step")]
    Steps,
    #[error("{covariates} covariate rows but {targets} targets")]
    Length { covariates: usize, targets: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Nd,
    Hpd,
    Hist,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Nd => "nd",
            ScoreKind::Hpd => "hpd",
            ScoreKind::Hist => "hist",
        })
    }
}

/// `-f(y)`.
pub fn score_nd(density: &SplineDensity, y: f64) -> Result<f64, ConformalError> {
    Ok(-density.eval(y)?)
}

/// Minus the probability mass where the density is at most `f(y)`.
pub fn score_hpd(density: &SplineDensity, y: f64) -> Result<f64, ConformalError> {
    let level = density.eval(y)?;
    Ok(-density.mass_below_level(level))
}

/// Minus the probability of the bin holding `y`.
pub fn score_hist(probs: &[f64], bin: usize) -> f64 {
    -probs[bin.min(probs.len() - 1)]
}

/// Calibrated cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    /// `+inf` when `(N + 1)(1 - alpha) > N`.
    #[serde(with = "extended_f64")]
    pub q_hat: f64,
    pub n_cal: usize,
    pub kind: ScoreKind,
}

impl CalibrationResult {
    /// Level `-q` used to threshold densities, probability masses or bin
    /// probabilities.
    pub fn cutoff(&self) -> f64 {
        -self.q_hat
    }

    fn expect(&self, kind: ScoreKind) -> Result<(), ConformalError> {
        if self.kind != kind {
            return Err(ConformalError::KindMismatch {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }
}

/// Rank of the calibration order statistic, `ceil((N + 1)(1 - alpha))`.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let v = (n + 1) as f64 * (1.0 - alpha);
    // Absorb representation error such as 10 * 0.9 = 9.000000000000002.
    (v - v * 1e-12).ceil() as usize
}

/// The `k`-th smallest score with `k` from [`quantile_rank`], or `+inf`
/// when `k > N`.
pub fn calibrate(
    scores: &[f64],
    alpha: f64,
    kind: ScoreKind,
) -> Result<CalibrationResult, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::Alpha(alpha));
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ConformalError::NonFiniteScore(s));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    let q_hat = if k > n {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        let (_, kth, _) = sorted.select_nth_unstable_by(k.max(1) - 1, f64::total_cmp);
        *kth
    };
    Ok(CalibrationResult {
        alpha,
        q_hat,
        n_cal: n,
        kind,
    })
}

/// A prediction set in scaled target units. Histogram sets also list the
/// bins they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub intervals: IntervalUnion,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bins: Option<Vec<usize>>,
}

impl PredictionSet {
    pub fn size(&self) -> f64 {
        self.intervals.size()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.intervals.contains(y)
    }
}

impl From<IntervalUnion> for PredictionSet {
    fn from(intervals: IntervalUnion) -> Self {
        Self {
            intervals,
            bins: None,
        }
    }
}

/// `{y : f(y) > -q}`; the whole domain when `-q < 0`.
pub fn predict_set_nd(
    density: &SplineDensity,
    cal: &CalibrationResult,
) -> Result<PredictionSet, ConformalError> {
    cal.expect(ScoreKind::Nd)?;
    let cutoff = cal.cutoff();
    if cutoff < 0.0 {
        return Ok(IntervalUnion::unit().into());
    }
    Ok(density.level_set(cutoff).into())
}

/// HPD set together with the bisection's final bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct HpdSet {
    pub set: PredictionSet,
    /// Lower end of the final bracket; the set is `{f > level}`.
    pub level: f64,
    pub upper: f64,
    /// Mass below `level`.
    pub mass_below: f64,
}

/// Bisects for the density level whose mass below matches `-q`.
///
/// The lower end always has mass below `< -q`, so `{f > lower}` contains
/// every `y` with score `<= q`.
pub fn predict_set_hpd(
    density: &SplineDensity,
    cal: &CalibrationResult,
    steps: usize,
) -> Result<HpdSet, ConformalError> {
    cal.expect(ScoreKind::Hpd)?;
    if steps == 0 {
        return Err(ConformalError::Steps);
    }
    let target = cal.cutoff();
    if target <= 0.0 {
        return Ok(HpdSet {
            set: IntervalUnion::unit().into(),
            level: 0.0,
            upper: 0.0,
            mass_below: 0.0,
        });
    }
    let (mut lo, mut hi) = (0.0, density.sup());
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if density.mass_below_level(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(HpdSet {
        set: density.level_set(lo).into(),
        level: lo,
        upper: hi,
        mass_below: density.mass_below_level(lo),
    })
}

/// Bins with probability at least `-q`, merged into intervals over the
/// given edges.
pub fn predict_set_hist(
    probs: &[f64],
    edges: &[f64],
    cal: &CalibrationResult,
) -> Result<PredictionSet, ConformalError> {
    cal.expect(ScoreKind::Hist)?;
    assert_eq!(edges.len(), probs.len() + 1, "one more edge than bins");
    let cutoff = cal.cutoff();
    let bins: Vec<usize> = (0..probs.len()).filter(|&b| probs[b] >= cutoff).collect();
    let intervals =
        IntervalUnion::from_intervals(bins.iter().map(|&b| Interval::new(edges[b], edges[b + 1])));
    Ok(PredictionSet {
        intervals,
        bins: Some(bins),
    })
}

/// A trained model paired with the score it is conformalized with.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Nd(&'a SplineModel),
    Hpd {
        model: &'a SplineModel,
        steps: usize,
    },
    Hist(&'a HistModel),
}

/// Scores of a batch, with the number of targets clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub clamped: usize,
}

impl Scorer<'_> {
    pub fn kind(&self) -> ScoreKind {
        match self {
            Scorer::Nd(_) => ScoreKind::Nd,
            Scorer::Hpd { .. } => ScoreKind::Hpd,
            Scorer::Hist(_) => ScoreKind::Hist,
        }
    }

    /// Scores for scaled targets; targets outside `[0, 1]` are clamped.
    pub fn scores(&self, rows: &[&[f64]], y: &[f64]) -> Result<ScoreBatch, ConformalError> {
        if rows.len() != y.len() {
            return Err(ConformalError::Length {
                covariates: rows.len(),
                targets: y.len(),
            });
        }
        let clamped = y.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        let y = y.iter().map(|v| v.clamp(0.0, 1.0));
        let scores = match self {
            Scorer::Nd(m) => {
                let ds = m.densities(rows)?;
                ds.iter()
                    .zip(y)
                    .map(|(d, v)| score_nd(d, v))
                    .collect::<Result<_, _>>()?
            }
            Scorer::Hpd { model, .. } => {
                let ds = model.densities(rows)?;
                ds.iter()
                    .zip(y)
                    .map(|(d, v)| score_hpd(d, v))
                    .collect::<Result<_, _>>()?
            }
            Scorer::Hist(m) => {
                let ps = m.probabilities(rows)?;
                ps.iter()
                    .zip(y)
                    .map(|(p, v)| score_hist(p, m.bin_of(v)))
                    .collect()
            }
        };
        Ok(ScoreBatch { scores, clamped })
    }

    pub fn calibrate(
        &self,
        rows: &[&[f64]],
        y: &[f64],
        alpha: f64,
    ) -> Result<CalibrationResult, ConformalError> {
        let batch = self.scores(rows, y)?;
        calibrate(&batch.scores, alpha, self.kind())
    }

    /// Prediction sets in scaled units.
    pub fn sets(
        &self,
        rows: &[&[f64]],
        cal: &CalibrationResult,
    ) -> Result<Vec<PredictionSet>, ConformalError> {
        match self {
            Scorer::Nd(m) => m
                .densities(rows)?
                .iter()
                .map(|d| predict_set_nd(d, cal))
                .collect(),
            Scorer::Hpd { model, steps } => model
                .densities(rows)?
                .iter()
                .map(|d| predict_set_hpd(d, cal, *steps).map(|h| h.set))
                .collect(),
            Scorer::Hist(m) => {
                let edges = m.edges();
                m.probabilities(rows)?
                    .iter()
                    .map(|p| predict_set_hist(p, &edges, cal))
                    .collect()
            }
        }
    }
}
