use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{Grads, Initializer, ParamId, ParamSet};
use crate::tensor::Real;

/// Fully-connected map `y = x W + b` applied row-wise.
///
/// The weight is stored input-major as an `(in, out)` matrix. A 1x1
/// convolution over a feature map is the same layer applied to the map's
/// `(h * w, c)` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_std: f64,
        bias: bool,
    ) -> Self {
        let weight = params.register(
            format!("{name}.weight"),
            init.normal(&[in_dim, out_dim], weight_std),
        );
        let bias = bias.then(|| {
            params.register(format!("{name}.bias"), Initializer::zeros(&[out_dim]))
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// He-initialized layer with bias.
    pub fn he<F: Real>(
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::new(
            params,
            init,
            name,
            in_dim,
            out_dim,
            (2.0 / in_dim as f64).sqrt(),
            true,
        )
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&params.matrix(self.weight));
        if let Some(b) = self.bias {
            y += &params.vector(b);
        }
        y
    }

    pub fn forward_vec<F: Real>(&self, params: &ParamSet<F>, x: ArrayView1<'_, F>) -> Array1<F> {
        let mut y = x.dot(&params.matrix(self.weight));
        if let Some(b) = self.bias {
            y += &params.vector(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: ArrayView2<'_, F>,
        dy: ArrayView2<'_, F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        self.accumulate(x, dy, grads);
        dy.dot(&params.matrix(self.weight).t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn accumulate<F: Real>(&self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>, grads: &mut Grads<F>) {
        let dw = x.t().dot(&dy);
        grads.matrix_mut(self.weight).scaled_add(F::one(), &dw);
        if let Some(b) = self.bias {
            grads.vector_mut(b).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        }
    }

    pub fn backward_vec<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: ArrayView1<'_, F>,
        dy: ArrayView1<'_, F>,
        grads: &mut Grads<F>,
    ) -> Array1<F> {
        let x2 = x.insert_axis(Axis(0));
        let dy2 = dy.insert_axis(Axis(0));
        self.backward(params, x2, dy2, grads)
            .index_axis_move(Axis(0), 0)
    }
}
