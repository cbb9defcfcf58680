//! Shared encoder and linear-layer plumbing.

use super::{LayerContext, ModelError};
use crate::gradcore::{ParamStore, Tape, Tensor, Var};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// Width of both encoder layers.
pub const HIDDEN: usize = 32;

/// Slots of one affine layer inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
    ) -> Result<Var, crate::gradcore::GradError> {
        let h = tape.matmul(input, vars[self.weight])?;
        tape.add(h, vars[self.bias])
    }

    /// Weights `U(-bound, bound)`, bias filled with `bias`.
    pub fn init_uniform(&self, store: &mut ParamStore, bound: f64, bias: f64, rng: &mut impl Rng) {
        let dist = Uniform::new_inclusive(-bound, bound);
        let params = store.params_mut();
        for w in params[self.weight].value.data_mut() {
            *w = dist.sample(rng);
        }
        for b in params[self.bias].value.data_mut() {
            *b = bias;
        }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.params()[self.weight].value.rows()
    }
}

/// Two GeLU layers `d -> 32 -> 32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Encoder {
    pub first: Linear,
    pub second: Linear,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, input_dim: usize) -> Self {
        Self {
            first: Linear::register(store, "encoder.0", input_dim, HIDDEN),
            second: Linear::register(store, "encoder.1", HIDDEN, HIDDEN),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for layer in [self.first, self.second] {
            let bound = (6.0 / layer.fan_in(store) as f64).sqrt();
            layer.init_uniform(store, bound, 0.0, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, ModelError> {
        let h = self.first.apply(tape, vars, x).layer("encoder layer 1")?;
        let h = tape.gelu(h).layer("encoder layer 1")?;
        let h = self.second.apply(tape, vars, h).layer("encoder layer 2")?;
        tape.gelu(h).layer("encoder layer 2")
    }
}

/// Stacks covariate rows into a `rows x dim` tensor.
pub(crate) fn stack_rows(rows: &[&[f64]], dim: usize) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(ModelError::InputDim {
                expected: dim,
                got: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(rows.len(), dim, data))
}

/// Default head initialization, `U(+-1/sqrt(fan_in))`.
pub(crate) fn head_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
