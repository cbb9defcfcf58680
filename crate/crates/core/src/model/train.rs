//! Mini-batch AdamW training with early stopping on validation loss.

use super::hist::HistModel;
use super::net::stack_rows;
use super::optim::{adamw_step, clip_gradients, cosine_lr, AdamConfig};
use super::spline_net::SplineModel;
use super::ModelError;
use crate::data::{DatasetBundle, Split};
use crate::gradcore::{ParamStore, Tape, Tensor, Var};
use crate::spline::Degree;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A model the training loop can optimize.
pub trait Trainable: Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn input_dim(&self) -> usize;

    /// Mean loss over a batch, with the parameters bound to `vars` in
    /// store order.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        y: &[f64],
    ) -> Result<Var, ModelError>;

    /// Loss and one gradient per parameter.
    fn loss_and_gradients(&self, x: &Tensor, y: &[f64]) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape);
        let root = self.loss_on_tape(&mut tape, &vars, x, y)?;
        let loss = tape.value(root).item();
        let mut grads = tape
            .backward(root)
            .map_err(|source| ModelError::Numerical {
                layer: "backward pass",
                source,
            })?;
        Ok((loss, vars.into_iter().map(|v| grads.take(v)).collect()))
    }

    fn evaluate(&self, x: &Tensor, y: &[f64]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape);
        let root = self.loss_on_tape(&mut tape, &vars, x, y)?;
        Ok(tape.value(root).item())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_batches: usize,
    /// Full passes over the training split without a validation
    /// improvement before stopping.
    pub patience_passes: usize,
    /// Validation runs every `min(validation_interval, batches per pass)`
    /// batches.
    pub validation_interval: usize,
    /// Validation uses the first `validation_batches * batch_size` rows.
    pub validation_batches: usize,
    pub clip_norm: f64,
    pub cosine_horizon: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 1e-4,
            batch_size: 512,
            max_batches: 50_000,
            patience_passes: 125,
            validation_interval: 100,
            validation_batches: 10,
            clip_norm: 5.0,
            cosine_horizon: 50_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::Config(format!("{what} must be positive")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::Config(
                "weight decay must be nonnegative".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm");
        }
        for (name, v) in [
            ("batch size", self.batch_size),
            ("max batches", self.max_batches),
            ("patience", self.patience_passes),
            ("validation interval", self.validation_interval),
            ("validation batches", self.validation_batches),
            ("cosine horizon", self.cosine_horizon),
        ] {
            if v == 0 {
                return bad(name);
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One validation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss over the batches since the previous entry.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Weights with the lowest validation loss.
    pub model: M,
    pub best_val_loss: f64,
    pub best_step: usize,
    /// Validation loss of the weights after the last batch.
    pub final_val_loss: f64,
    pub batches: usize,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
}

/// RNG stream for weight initialization; shuffling uses stream 1.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains `model` in place of a copy and returns the best checkpoint.
pub fn train<M: Trainable>(
    model: M,
    config: &TrainConfig,
    train_x: &[&[f64]],
    train_y: &[f64],
    val_x: &[&[f64]],
    val_y: &[f64],
) -> Result<TrainOutcome<M>, ModelError> {
    config.validate()?;
    if train_y.is_empty() || val_y.is_empty() {
        return Err(ModelError::Config(
            "training and validation splits must be nonempty".into(),
        ));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(ModelError::Config(
            "covariate and target counts differ".into(),
        ));
    }
    let dim = model.input_dim();
    let n = train_y.len();
    let bs = config.batch_size.min(n);
    let per_pass = n.div_ceil(config.batch_size);
    let cadence = config.validation_interval.min(per_pass);
    let patience = config.patience_passes * per_pass;
    let n_val = (config.validation_batches * config.batch_size).min(val_y.len());
    let val_xt = stack_rows(&val_x[..n_val], dim)?;
    let val_y = &val_y[..n_val];
    let adam = config.adam();

    let mut model = model;
    model.params_mut().reset_moments();
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut best_values = model.params().values();
    let mut log = Vec::new();
    let mut failures = 0;
    let mut running = (0.0, 0usize);
    let mut batches = 0;
    let mut stopped_early = false;

    for step in 0..config.max_batches {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + bs).min(n);
        let idx = &order[cursor..end];
        cursor = end;
        let bx: Vec<&[f64]> = idx.iter().map(|&i| train_x[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| train_y[i]).collect();
        let xt = stack_rows(&bx, dim)?;
        let lr = cosine_lr(step, config.cosine_horizon, config.lr);
        batches = step + 1;

        match model.loss_and_gradients(&xt, &by) {
            Ok((loss, mut grads)) if loss.is_finite() && grads.iter().all(Tensor::is_finite) => {
                failures = 0;
                running.0 += loss;
                running.1 += 1;
                clip_gradients(&mut grads, config.clip_norm);
                adamw_step(model.params_mut(), &grads, lr, &adam);
            }
            Ok(_) | Err(ModelError::Numerical { .. }) | Err(ModelError::Spline(_)) => {
                failures += 1;
                if failures >= per_pass {
                    return Err(ModelError::Training(format!(
                        "loss or gradients non-finite for a full pass ending at batch {batches}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }

        if batches % cadence == 0 {
            let val = model.evaluate(&val_xt, val_y).unwrap_or(f64::INFINITY);
            let train_loss = if running.1 > 0 {
                running.0 / running.1 as f64
            } else {
                f64::NAN
            };
            running = (0.0, 0);
            log.push(LogEntry {
                step: batches,
                train_loss,
                val_loss: val,
                lr,
            });
            if val < best_val {
                best_val = val;
                best_step = batches;
                best_values = model.params().values();
            }
            if batches - best_step >= patience {
                stopped_early = true;
                break;
            }
        }
    }

    let final_val = model.evaluate(&val_xt, val_y).unwrap_or(f64::INFINITY);
    if final_val < best_val {
        best_val = final_val;
        best_step = batches;
        best_values = model.params().values();
    }
    if !best_val.is_finite() {
        return Err(ModelError::Training(
            "validation loss never became finite".into(),
        ));
    }
    model.params_mut().set_values(best_values);
    model.params_mut().reset_moments();
    Ok(TrainOutcome {
        model,
        best_val_loss: best_val,
        best_step,
        final_val_loss: final_val,
        batches,
        stopped_early,
        log,
    })
}

fn split_rows(bundle: &DatasetBundle, split: Split) -> Result<(Vec<&[f64]>, Vec<f64>), ModelError> {
    let view = bundle.split(split);
    if view.is_empty() {
        return Err(ModelError::Config(format!("split '{split}' is empty")));
    }
    Ok((view.x, view.y))
}

/// Initializes a spline model from `config.seed` and trains it on the
/// bundle's train split, validating on its val split.
pub fn train_spline(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    degree: Degree,
    knots: usize,
    min_spacing: f64,
) -> Result<TrainOutcome<SplineModel>, ModelError> {
    config.validate()?;
    let mut rng = init_rng(config.seed);
    let model = SplineModel::new(bundle.features(), degree, knots, min_spacing, &mut rng)?;
    let (tx, ty) = split_rows(bundle, Split::Train)?;
    let (vx, vy) = split_rows(bundle, Split::Val)?;
    train(model, config, &tx, &ty, &vx, &vy)
}

pub fn train_hist(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    bins: usize,
) -> Result<TrainOutcome<HistModel>, ModelError> {
    config.validate()?;
    let mut rng = init_rng(config.seed);
    let model = HistModel::new(bundle.features(), bins, &mut rng)?;
    let (tx, ty) = split_rows(bundle, Split::Train)?;
    let (vx, vy) = split_rows(bundle, Split::Val)?;
    train(model, config, &tx, &ty, &vx, &vy)
}

/// Validation loss exactly as the training loop measures it.
pub fn validation_loss<M: Trainable>(
    model: &M,
    config: &TrainConfig,
    bundle: &DatasetBundle,
) -> Result<f64, ModelError> {
    let (vx, vy) = split_rows(bundle, Split::Val)?;
    let n_val = (config.validation_batches * config.batch_size).min(vy.len());
    let x = stack_rows(&vx[..n_val], model.input_dim())?;
    model.evaluate(&x, &vy[..n_val])
}
