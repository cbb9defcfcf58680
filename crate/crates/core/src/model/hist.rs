use super::net::{head_bound, stack_rows, Encoder, Linear, HIDDEN};
use super::spline_net::check_param_layout;
use super::train::Trainable;
use super::{LayerContext, ModelError};
use crate::data::discretize;
use crate::gradcore::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Classifier over `B` equal-width bins of the scaled target range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistModel {
    bins: usize,
    input_dim: usize,
    params: ParamStore,
    encoder: Encoder,
    head: Linear,
}

impl HistModel {
    pub fn zeroed(input_dim: usize, bins: usize) -> Result<Self, ModelError> {
        if input_dim == 0 {
            return Err(ModelError::Config(
                "input dimension must be positive".into(),
            ));
        }
        if bins < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, input_dim);
        let head = Linear::register(&mut params, "classifier", HIDDEN, bins);
        Ok(Self {
            bins,
            input_dim,
            params,
            encoder,
            head,
        })
    }

    pub fn new(input_dim: usize, bins: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(input_dim, bins)?;
        model.encoder.init(&mut model.params, rng);
        model
            .head
            .init_uniform(&mut model.params, head_bound(HIDDEN), 0.0, rng);
        Ok(model)
    }

    pub fn from_params(
        input_dim: usize,
        bins: usize,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(input_dim, bins)?;
        check_param_layout(&model.params, &params)?;
        model.params.set_values(params.values());
        Ok(model)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `B + 1` evenly spaced edges over the scaled range.
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins)
            .map(|i| i as f64 / self.bins as f64)
            .collect()
    }

    /// Bin of a scaled target, clamped to the edge bins.
    pub fn bin_of(&self, y: f64) -> usize {
        discretize(y, self.bins, 0.0, 1.0)
    }

    fn logits(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, ModelError> {
        let z = self.encoder.forward(tape, vars, x)?;
        self.head.apply(tape, vars, z).layer("classifier head")
    }

    /// Bin probabilities for each covariate row.
    pub fn probabilities(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, ModelError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.input(stack_rows(rows, self.input_dim)?);
        let logits = self.logits(&mut tape, &vars, x)?;
        let p = tape.softmax_rows(logits).layer("classifier head")?;
        let p = tape.value(p);
        Ok((0..rows.len()).map(|r| p.row_slice(r).to_vec()).collect())
    }

    pub fn probability(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.probabilities(&[x])?.remove(0))
    }

    /// Mean cross-entropy of the true bins.
    pub fn nll(&self, rows: &[&[f64]], y: &[f64]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = stack_rows(rows, self.input_dim)?;
        let loss = self.loss_on_tape(&mut tape, &vars, &x, y)?;
        Ok(tape.value(loss).item())
    }
}

impl Trainable for HistModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        y: &[f64],
    ) -> Result<Var, ModelError> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(ModelError::Config(format!(
                "batch has {} covariate rows and {} targets",
                x.rows(),
                y.len()
            )));
        }
        if x.cols() != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        let xv = tape.input(x.clone());
        let logits = self.logits(tape, vars, xv)?;
        let layer = "likelihood";
        let logp = tape.log_softmax_rows(logits).layer(layer)?;
        let bins: Vec<usize> = y.iter().map(|&v| self.bin_of(v)).collect();
        let picked = tape.gather(logp, bins).layer(layer)?;
        let mean = tape.mean(picked).layer(layer)?;
        tape.neg(mean).layer(layer)
    }
}
