//! Coverage and size metrics for prediction sets.

use crate::conformal::{calibrate, ConformalError, ScoreKind};
use crate::data::{discretize, format_f64};
use crate::output::to_json_pretty;
use crate::spline::IntervalUnion;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Bins of the unconditional histogram used for size normalization.
pub const NORMALIZATION_BINS: usize = 20;

/// Number of label buckets for conditional coverage.
pub const LABEL_BUCKETS: usize = 5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{sets} sets but {truths} targets")]
    Length { sets: usize, truths: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("target range is degenerate (min = max = {0})")]
    DegenerateRange(f64),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

fn check_lengths(sets: &[IntervalUnion], truths: &[f64]) -> Result<(), MetricsError> {
    if sets.len() != truths.len() {
        return Err(MetricsError::Length {
            sets: sets.len(),
            truths: truths.len(),
        });
    }
    Ok(())
}

/// Fraction of targets inside their (closed) sets.
pub fn marginal_coverage(sets: &[IntervalUnion], truths: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(sets, truths)?;
    if sets.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let hits = sets
        .iter()
        .zip(truths)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Size of the conformal set of an unconditional histogram of the train
/// targets, calibrated on the calibration targets.
///
/// Bins are evenly spaced over the train range; the set keeps the bins
/// whose probability is at least `-q`.
pub fn normalization_constant(
    train_y: &[f64],
    cal_y: &[f64],
    alpha: f64,
    bins: usize,
) -> Result<f64, MetricsError> {
    if train_y.is_empty() || cal_y.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let min = train_y.iter().copied().fold(f64::INFINITY, f64::min);
    let max = train_y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(MetricsError::DegenerateRange(min));
    }
    let mut probs = vec![0.0; bins];
    for &y in train_y {
        probs[discretize(y, bins, min, max)] += 1.0;
    }
    probs.iter_mut().for_each(|p| *p /= train_y.len() as f64);
    let scores: Vec<f64> = cal_y
        .iter()
        .map(|&y| -probs[discretize(y, bins, min, max)])
        .collect();
    let cal = calibrate(&scores, alpha, ScoreKind::Hist)?;
    let kept = probs.iter().filter(|&&p| p >= cal.cutoff()).count();
    Ok(kept as f64 * (max - min) / bins as f64)
}

/// Per-bucket coverage over equal-width buckets of the target range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConditional {
    /// `None` for buckets without samples.
    pub buckets: Vec<Option<f64>>,
    pub worst: f64,
}

pub fn label_conditional_coverage(
    sets: &[IntervalUnion],
    truths: &[f64],
) -> Result<LabelConditional, MetricsError> {
    check_lengths(sets, truths)?;
    if truths.len() < LABEL_BUCKETS {
        return Err(MetricsError::TooFew {
            needed: LABEL_BUCKETS,
            got: truths.len(),
        });
    }
    let min = truths.iter().copied().fold(f64::INFINITY, f64::min);
    let max = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hits = [0usize; LABEL_BUCKETS];
    let mut counts = [0usize; LABEL_BUCKETS];
    for (s, &y) in sets.iter().zip(truths) {
        let b = if max > min {
            discretize(y, LABEL_BUCKETS, min, max)
        } else {
            0
        };
        counts[b] += 1;
        hits[b] += usize::from(s.contains(y));
    }
    let mut buckets = Vec::with_capacity(LABEL_BUCKETS);
    for b in 0..LABEL_BUCKETS {
        if counts[b] == 0 {
            log::warn!("label bucket {b} has no samples; excluded from the worst-bucket coverage");
            buckets.push(None);
        } else {
            buckets.push(Some(hits[b] as f64 / counts[b] as f64));
        }
    }
    let worst = buckets
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(LabelConditional { buckets, worst })
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub coverage: f64,
    /// Mean set size in original target units.
    pub mean_size: f64,
    pub normalization_constant: f64,
    pub mean_normalized_size: f64,
    pub bucket_coverage: Vec<Option<f64>>,
    pub worst_bucket_coverage: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Builds a report from sets and truths in original units.
    pub fn compute(
        alpha: f64,
        sets: &[IntervalUnion],
        truths: &[f64],
        normalization_constant: f64,
    ) -> Result<Self, MetricsError> {
        let coverage = marginal_coverage(sets, truths)?;
        let conditional = label_conditional_coverage(sets, truths)?;
        let mean_size = sets.iter().map(IntervalUnion::size).sum::<f64>() / sets.len() as f64;
        Ok(Self {
            alpha,
            coverage,
            mean_size,
            normalization_constant,
            mean_normalized_size: mean_size / normalization_constant,
            bucket_coverage: conditional.buckets,
            worst_bucket_coverage: conditional.worst,
            samples: sets.len(),
        })
    }

    pub fn to_json(&self) -> String {
        to_json_pretty(self).expect("report fields are serializable")
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = [
            "alpha",
            "coverage",
            "mean_size",
            "normalization_constant",
            "mean_normalized_size",
        ]
        .map(String::from)
        .to_vec();
        h.extend((1..=LABEL_BUCKETS).map(|b| format!("bucket_{b}_coverage")));
        h.push("worst_bucket_coverage".into());
        h.push("samples".into());
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r: Vec<String> = [
            self.alpha,
            self.coverage,
            self.mean_size,
            self.normalization_constant,
            self.mean_normalized_size,
        ]
        .map(format_f64)
        .to_vec();
        r.extend(
            self.bucket_coverage
                .iter()
                .map(|b| b.map(format_f64).unwrap_or_default()),
        );
        r.push(format_f64(self.worst_bucket_coverage));
        r.push(self.samples.to_string());
        r
    }

    /// Writes reports as CSV, one row each.
    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<(), MetricsError> {
        let err = |e: csv::Error| MetricsError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(Self::csv_header()).map_err(err)?;
        for r in reports {
            w.write_record(r.csv_row()).map_err(err)?;
        }
        w.flush().map_err(|e| MetricsError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
