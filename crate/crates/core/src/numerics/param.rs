use serde::{Deserialize, Serialize};

use super::Matrix;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub value: Matrix,
    #[serde(skip, default = "empty_grad")]
    pub grad: Matrix,
}

fn empty_grad() -> Matrix {
    Matrix::zeros(0, 0)
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter { id: id.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// Ordered collection of every learnable parameter of a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, value: Matrix) -> ParamId {
        let id = id.into();
        debug_assert!(self.find(&id).is_none(), "duplicate parameter {id}");
        self.params.push(Parameter::new(id, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.id == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.squared_norm()).sum::<f64>().sqrt()
    }

    /// Gradients after deserialization are empty; restore their shapes.
    pub(crate) fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.shape() != p.value.shape() {
                p.zero_grad();
            }
        }
    }
}
