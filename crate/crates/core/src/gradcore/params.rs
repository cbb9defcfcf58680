use super::tape::{Tape, Var};
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One named trainable tensor together with its Adam moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub first_moment: Option<Tensor>,
    #[serde(skip)]
    pub second_moment: Option<Tensor>,
}

/// Ordered collection of trainable tensors.
///
/// The order of insertion is the order used by [`ParamStore::bind`] and by
/// every gradient list handed back to the store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot. Moments start at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            first_moment: Some(Tensor::zeros(r, c)),
            second_moment: Some(Tensor::zeros(r, c)),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value, keeping names and moments.
    pub fn set_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape());
            p.value = v;
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.input(p.value.clone()))
            .collect()
    }

    /// Restores zeroed moments, e.g. after deserialization.
    pub fn reset_moments(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            let (r, c) = p.value.shape();
            p.first_moment = Some(Tensor::zeros(r, c));
            p.second_moment = Some(Tensor::zeros(r, c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_start_at_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::filled(2, 3, 0.5));
        let p = &store.params()[0];
        assert!(p
            .first_moment
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .second_moment
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(store.scalar_count(), 6);
    }
}
