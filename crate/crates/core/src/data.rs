//! Dataset ingestion, preprocessing and splits.
//!
//! Rows are divided 50/10/10/10/20 into train, validation, calibration,
//! calibration-validation and test splits. Test membership depends only on
//! the row index and [`TEST_SPLIT_SEED`], so it stays fixed while the run
//! seed reshuffles the other four splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Seed for the fixed test split.
pub const TEST_SPLIT_SEED: u64 = 0x5EED_7E57;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("target column '{0}' not found in header")]
    MissingColumn(String),
    #[error("dataset has no data rows")]
    Empty,
    #[error("row {row}, column '{column}': cannot parse '{cell}' as a number")]
    Parse {
        row: usize,
        column: String,
        cell: String,
    },
    #[error("row {row} has {got} cells, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{0} rows is too few to populate every split (need at least 10)")]
    TooFewRows(usize),
    #[error("target range is degenerate (min = max = {0})")]
    DegenerateTarget(f64),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
}

/// Covariates and targets before any scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Row-major `rows x features`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl RawDataset {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.features();
        &self.x[i * d..(i + 1) * d]
    }

    /// Writes the dataset as CSV with features first and the target last.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)
            .map_err(|e| DataError::Csv(e.to_string()))?;
        for i in 0..self.rows() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format_f64(*v)).collect();
            rec.push(format_f64(self.y[i]));
            w.write_record(&rec)
                .map_err(|e| DataError::Csv(e.to_string()))?;
        }
        w.flush().map_err(io)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a numeric CSV with one header row. Every column except
/// `target_column` becomes a covariate.
pub fn load_csv(path: &Path, target_column: &str) -> Result<RawDataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, target_column)
}

pub fn read_csv(reader: impl std::io::Read, target_column: &str) -> Result<RawDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| DataError::MissingColumn(target_column.to_owned()))?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow {
                row,
                expected: header.len(),
                got: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row,
                column: header[j].clone(),
                cell: cell.to_owned(),
            })?;
            if j == target_idx {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(DataError::Empty);
    }
    let mut feature_names = header.clone();
    let target_name = feature_names.remove(target_idx);
    Ok(RawDataset {
        feature_names,
        target_name,
        x,
        y,
    })
}

/// Heteroscedastic bimodal data: `x` evenly spaced on `[0, 1]`,
/// `y = +-(0.1 + x U)` with `U ~ Uniform[0, 1]` and a fair sign.
pub fn synthetic_bimodal(count: usize, seed: u64) -> RawDataset {
    assert!(count >= 2, "synthetic data needs at least 2 points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(count);
    let mut y = Vec::with_capacity(count);
    for i in 0..count {
        let xi = i as f64 / (count - 1) as f64;
        let u: f64 = rng.gen();
        let sigma = 0.1 + xi * u;
        let positive: bool = rng.gen();
        x.push(xi);
        y.push(if positive { sigma } else { -sigma });
    }
    RawDataset {
        feature_names: vec!["x".into()],
        target_name: "y".into(),
        x,
        y,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Cal,
    CalVal,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::Cal,
        Split::CalVal,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Cal => "cal",
            Split::CalVal => "calval",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split '{s}'"))
    }
}

/// Per-column standardization fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    /// Population standard deviation, with 1 substituted for constant
    /// columns.
    pub scale: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(rows: &[&[f64]], features: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; features];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; features];
        for r in rows {
            for j in 0..features {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Min-max target scaling fitted on the train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self, DataError> {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !(max > min) {
            return Err(DataError::DegenerateTarget(min));
        }
        Ok(Self { min, max })
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.min) / self.range()
    }

    pub fn unscale(&self, s: f64) -> f64 {
        s * self.range() + self.min
    }
}

/// Preprocessed dataset with its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub feature_names: Vec<String>,
    /// Standardized covariates, row-major `rows x features`.
    pub x: Vec<f64>,
    /// Min-max scaled targets (train split lies in `[0, 1]`).
    pub y: Vec<f64>,
    /// Targets in original units.
    pub y_raw: Vec<f64>,
    pub x_scaler: StandardScaler,
    pub y_scaler: MinMaxScaler,
    pub splits: Vec<Split>,
    pub seed: u64,
}

/// Rows of one split, borrowed from a bundle.
#[derive(Debug, Clone)]
pub struct SplitView<'a> {
    pub features: usize,
    pub x: Vec<&'a [f64]>,
    pub y: Vec<f64>,
    pub y_raw: Vec<f64>,
    pub rows: Vec<usize>,
}

impl SplitView<'_> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Row counts per split for `n` rows: cut points at `floor(f * n)`,
/// remainder to test.
pub fn split_sizes(n: usize) -> [usize; 5] {
    let cut = |tenths: usize| tenths * n / 10;
    [
        cut(5),
        cut(6) - cut(5),
        cut(7) - cut(6),
        cut(8) - cut(7),
        n - cut(8),
    ]
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split labels: test by hashed row index, the rest by a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let sizes = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(TEST_SPLIT_SEED ^ mix64(i as u64)), i));
    let test_count = sizes[4];
    let (rest, test) = order.split_at_mut(n - test_count);

    let mut labels = vec![Split::Train; n];
    for &i in test.iter() {
        labels[i] = Split::Test;
    }
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let mut offset = 0;
    for (split, &count) in Split::ALL[..4].iter().zip(&sizes[..4]) {
        for &i in &rest[offset..offset + count] {
            labels[i] = *split;
        }
        offset += count;
    }
    labels
}

/// Splits, standardizes covariates and min-max scales targets, fitting
/// both scalers on the train split only.
pub fn preprocess(raw: &RawDataset, seed: u64) -> Result<DatasetBundle, DataError> {
    let n = raw.rows();
    if n < 10 {
        return Err(DataError::TooFewRows(n));
    }
    let splits = assign_splits(n, seed);
    let d = raw.features();
    let train: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
    let train_rows: Vec<&[f64]> = train.iter().map(|&i| raw.row(i)).collect();
    let x_scaler = StandardScaler::fit(&train_rows, d);
    let y_scaler = MinMaxScaler::fit(train.iter().map(|&i| raw.y[i]))?;

    let mut x = Vec::with_capacity(n * d);
    for i in 0..n {
        x.extend(x_scaler.transform(raw.row(i)));
    }
    let y = raw.y.iter().map(|&v| y_scaler.scale(v)).collect();
    Ok(DatasetBundle {
        feature_names: raw.feature_names.clone(),
        x,
        y,
        y_raw: raw.y.clone(),
        x_scaler,
        y_scaler,
        splits,
        seed,
    })
}

impl DatasetBundle {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.features();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn split(&self, which: Split) -> SplitView<'_> {
        let rows: Vec<usize> = (0..self.rows())
            .filter(|&i| self.splits[i] == which)
            .collect();
        SplitView {
            features: self.features(),
            x: rows.iter().map(|&i| self.row(i)).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            y_raw: rows.iter().map(|&i| self.y_raw[i]).collect(),
            rows,
        }
    }

    pub fn split_len(&self, which: Split) -> usize {
        self.splits.iter().filter(|&&s| s == which).count()
    }
}

/// Bin index `clamp(floor((y - min) * bins / (max - min)), 0, bins - 1)`.
pub fn discretize(y: f64, bins: usize, min: f64, max: f64) -> usize {
    let raw = ((y - min) * bins as f64 / (max - min)).floor();
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        (raw as usize).min(bins - 1)
    }
}

pub fn discretize_targets(
    y: &[f64],
    bins: usize,
    min: f64,
    max: f64,
) -> Result<Vec<usize>, DataError> {
    if bins < 2 {
        return Err(DataError::TooFewBins(bins));
    }
    if !(max > min) {
        return Err(DataError::DegenerateTarget(min));
    }
    Ok(y.iter().map(|&v| discretize(v, bins, min, max)).collect())
}
