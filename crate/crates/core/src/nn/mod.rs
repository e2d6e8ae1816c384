//! Minimal layer library with explicit forward caches and hand-written
//! backward passes.

mod conv;
mod init;
mod linear;
mod param;

pub use conv::{ChannelAffine, Conv2d, ConvCache, MaxPool2d, MaxPoolCache};
pub use init::Initializer;
pub use linear::Linear;
pub use param::{Grads, ParamId, ParamSet};

use ndarray::{ArrayBase, Data, DataMut, Dimension, Zip};

use crate::tensor::Real;

pub fn relu_inplace<F: Real, S: DataMut<Elem = F>, D: Dimension>(x: &mut ArrayBase<S, D>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Masks an upstream gradient by the positivity of a ReLU output.
pub fn relu_backward_inplace<F, S, T, D>(grad: &mut ArrayBase<S, D>, output: &ArrayBase<T, D>)
where
    F: Real,
    S: DataMut<Elem = F>,
    T: Data<Elem = F>,
    D: Dimension,
{
    Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= F::zero() {
            *g = F::zero();
        }
    });
}
