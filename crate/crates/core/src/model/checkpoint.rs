//! Self-describing JSON checkpoints with base64 little-endian weights.

use super::hist::HistModel;
use super::net::HIDDEN;
use super::spline_net::SplineModel;
use super::train::{TrainConfig, Trainable};
use super::ModelError;
use crate::data::{MinMaxScaler, StandardScaler};
use crate::gradcore::{ParamStore, Tensor};
use crate::output::to_json_pretty;
use crate::spline::Degree;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "spline-conformal-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which conformal method the checkpoint was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "spice-nd")]
    SpiceNd,
    #[serde(rename = "spice-hpd")]
    SpiceHpd,
    #[serde(rename = "hist")]
    Hist,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SpiceNd => "spice-nd",
            ModelKind::SpiceHpd => "spice-hpd",
            ModelKind::Hist => "hist",
        }
    }

    pub fn is_spline(self) -> bool {
        !matches!(self, ModelKind::Hist)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spice-nd" => Ok(ModelKind::SpiceNd),
            "spice-hpd" => Ok(ModelKind::SpiceHpd),
            "hist" => Ok(ModelKind::Hist),
            other => Err(format!(
                "unknown model '{other}'; expected spice-nd, spice-hpd or hist"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedNet {
    Spline(SplineModel),
    Hist(HistModel),
}

/// A trained model with everything needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub net: TrainedNet,
    pub x_scaler: StandardScaler,
    pub y_scaler: MinMaxScaler,
    pub config: TrainConfig,
    pub best_val_loss: f64,
    pub best_step: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightRecord {
    name: String,
    rows: usize,
    cols: usize,
    /// Little-endian `f64`, base64.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Architecture {
    input_dim: usize,
    hidden: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    degree: Option<Degree>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    knots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    min_spacing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bins: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    format: String,
    version: u32,
    kind: ModelKind,
    architecture: Architecture,
    x_scaler: StandardScaler,
    y_scaler: MinMaxScaler,
    config: TrainConfig,
    best_val_loss: f64,
    best_step: usize,
    weights: Vec<WeightRecord>,
}

fn encode(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(w: &WeightRecord) -> Result<Tensor, CheckpointError> {
    let bytes = STANDARD
        .decode(&w.data)
        .map_err(|e| CheckpointError::Format(format!("weight '{}': {e}", w.name)))?;
    if bytes.len() != w.rows * w.cols * 8 {
        return Err(CheckpointError::Format(format!(
            "weight '{}' holds {} bytes, expected {}",
            w.name,
            bytes.len(),
            w.rows * w.cols * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::new(w.rows, w.cols, data))
}

impl Checkpoint {
    pub fn params(&self) -> &ParamStore {
        match &self.net {
            TrainedNet::Spline(m) => m.params(),
            TrainedNet::Hist(m) => m.params(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.net {
            TrainedNet::Spline(m) => m.input_dim(),
            TrainedNet::Hist(m) => m.input_dim(),
        }
    }

    pub fn spline(&self) -> Option<&SplineModel> {
        match &self.net {
            TrainedNet::Spline(m) => Some(m),
            TrainedNet::Hist(_) => None,
        }
    }

    pub fn hist(&self) -> Option<&HistModel> {
        match &self.net {
            TrainedNet::Hist(m) => Some(m),
            TrainedNet::Spline(_) => None,
        }
    }

    pub fn to_json(&self) -> String {
        let architecture = match &self.net {
            TrainedNet::Spline(m) => Architecture {
                input_dim: m.input_dim(),
                hidden: HIDDEN,
                degree: Some(m.degree()),
                knots: Some(m.knots()),
                min_spacing: Some(m.min_spacing()),
                bins: None,
            },
            TrainedNet::Hist(m) => Architecture {
                input_dim: m.input_dim(),
                hidden: HIDDEN,
                degree: None,
                knots: None,
                min_spacing: None,
                bins: Some(m.bins()),
            },
        };
        let weights = self
            .params()
            .params()
            .iter()
            .map(|p| WeightRecord {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: encode(&p.value),
            })
            .collect();
        let record = Record {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            architecture,
            x_scaler: self.x_scaler.clone(),
            y_scaler: self.y_scaler,
            config: self.config.clone(),
            best_val_loss: self.best_val_loss,
            best_step: self.best_step,
            weights,
        };
        to_json_pretty(&record).expect("checkpoint fields are serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let record: Record =
            serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if record.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!(
                "unknown format '{}'",
                record.format
            )));
        }
        if record.version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {}",
                record.version
            )));
        }
        if record.architecture.hidden != HIDDEN {
            return Err(CheckpointError::Format(format!(
                "hidden width {} is not {HIDDEN}",
                record.architecture.hidden
            )));
        }
        let mut store = ParamStore::new();
        for w in &record.weights {
            store.insert(w.name.clone(), decode(w)?);
        }
        let arch = &record.architecture;
        let missing = |what: &str| CheckpointError::Format(format!("architecture lacks '{what}'"));
        let net = if record.kind.is_spline() {
            TrainedNet::Spline(SplineModel::from_params(
                arch.input_dim,
                arch.degree.ok_or_else(|| missing("degree"))?,
                arch.knots.ok_or_else(|| missing("knots"))?,
                arch.min_spacing.ok_or_else(|| missing("min_spacing"))?,
                store,
            )?)
        } else {
            TrainedNet::Hist(HistModel::from_params(
                arch.input_dim,
                arch.bins.ok_or_else(|| missing("bins"))?,
                store,
            )?)
        };
        Ok(Self {
            kind: record.kind,
            net,
            x_scaler: record.x_scaler,
            y_scaler: record.y_scaler,
            config: record.config,
            best_val_loss: record.best_val_loss,
            best_step: record.best_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
