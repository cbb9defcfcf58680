//! Neural conditional density estimators and their training loop.
//!
//! Both model kinds share a two-layer GeLU encoder of width [`HIDDEN`].
//! [`SplineModel`] maps its output to knot positions and heights of a
//! [`SplineDensity`](crate::spline::SplineDensity); [`HistModel`] maps it to
//! logits over evenly spaced target bins.

mod checkpoint;
mod hist;
mod net;
mod optim;
mod spline_net;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind, TrainedNet, CHECKPOINT_FORMAT};
pub use hist::HistModel;
pub use net::HIDDEN;
pub use optim::{adamw_step, clip_gradients, cosine_lr, AdamConfig};
pub use spline_net::{SplineModel, DEFAULT_MIN_SPACING, DENSITY_FLOOR};
pub use train::{
    train, train_hist, train_spline, validation_loss, LogEntry, TrainConfig, TrainOutcome,
    Trainable,
};

use crate::gradcore::GradError;
use crate::spline::SplineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure in {layer}: {source}")]
    Numerical {
        layer: &'static str,
        #[source]
        source: GradError,
    },
    #[error("density construction failed: {0}")]
    Spline(#[from] SplineError),
    #[error("expected {expected} covariates, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("training failed: {0}")]
    Training(String),
}

pub(crate) trait LayerContext<T> {
    fn layer(self, layer: &'static str) -> Result<T, ModelError>;
}

impl<T> LayerContext<T> for Result<T, GradError> {
    fn layer(self, layer: &'static str) -> Result<T, ModelError> {
        self.map_err(|source| ModelError::Numerical { layer, source })
    }
}
