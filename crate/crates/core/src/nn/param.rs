use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};

use crate::error::{ReidError, Result};
use crate::tensor::Real;

/// Handle to a tensor registered in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
///
/// Registration order is the serialization order, so two models built from
/// the same configuration enumerate their tensors identically.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.values[id.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.values[id.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    /// Replaces a tensor, rejecting shape changes.
    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(ReidError::ShapeMismatch(format!(
                "parameter `{}` expects shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value.as_standard_layout().into_owned();
        Ok(())
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads {
            values: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(IxDyn(v.shape())))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::lit(x.to_f64_lossy())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient buffers aligned one-to-one with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    values: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.values[id.0]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.values[id.0]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn values(&self) -> &[ArrayD<F>] {
        &self.values
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn squared_norm(&self) -> F {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(F::zero(), |acc, &x| acc + x * x)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
