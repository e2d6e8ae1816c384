//! Scalar trait and the spatial feature-map container shared by every layer.
//!
//! Feature maps are stored height-major with channels innermost, so a map
//! viewed as a `(h * w, c)` matrix turns 1x1 convolutions into plain matrix
//! products.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use num_traits::{Float, FromPrimitive};

use crate::error::{ReidError, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Spatial activation block of shape `(h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    data: Array3<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(ReidError::ShapeMismatch(format!(
                "feature map extents must be positive, got {h}x{w}x{c}"
            )));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            data: Array3::zeros((h, w, c)),
        }
    }

    /// Rebuilds a map from its `(h * w, c)` matrix form.
    pub fn from_matrix(h: usize, w: usize, m: Array2<F>) -> Self {
        let c = m.ncols();
        assert_eq!(m.nrows(), h * w, "matrix rows must equal h*w");
        let m = m.as_standard_layout().into_owned();
        let data = m
            .into_shape_with_order((h, w, c))
            .expect("standard layout reshape");
        Self { data }
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn c(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<F> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<F> {
        self.data
    }

    pub fn positions(&self) -> usize {
        self.h() * self.w()
    }

    pub fn matrix(&self) -> ArrayView2<'_, F> {
        let (h, w, c) = self.dims();
        self.data
            .view()
            .into_shape_with_order((h * w, c))
            .expect("feature maps are kept in standard layout")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, F> {
        let (h, w, c) = self.dims();
        self.data
            .view_mut()
            .into_shape_with_order((h * w, c))
            .expect("feature maps are kept in standard layout")
    }

    pub fn into_matrix(self) -> Array2<F> {
        let (h, w, c) = self.dims();
        self.data
            .into_shape_with_order((h * w, c))
            .expect("feature maps are kept in standard layout")
    }

    /// Global average pool to a length-`c` vector.
    pub fn gap(&self) -> Array1<F> {
        self.matrix()
            .mean_axis(Axis(0))
            .expect("non-empty feature map")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn cast<G: Real>(&self) -> FeatureMap<G> {
        FeatureMap {
            data: self.data.mapv(|v| G::lit(v.to_f64_lossy())),
        }
    }
}

pub(crate) fn ensure_same_shape<F: Real>(
    a: &FeatureMap<F>,
    b: &FeatureMap<F>,
    what: &str,
) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(ReidError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )))
    }
}

/// Row-wise numerically stable softmax of a single logit vector.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(z)))` computed without overflow.
pub fn log_sum_exp<F: Real>(logits: &[F]) -> F {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let total: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + total.ln()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
