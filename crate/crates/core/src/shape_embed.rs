//! Shape embedding: per-joint encoding, pairwise relation reasoning over all
//! ordered joint pairs, and global max pooling into a single shape vector.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::keypoints::{KeypointSet, NUM_JOINTS};
use crate::nn::{relu_backward_inplace, relu_inplace, Grads, Initializer, Linear, ParamId, ParamSet};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEmbedConfig {
    /// Width of the joint embedding.
    pub d1: usize,
    /// Width of the refinement network's hidden layer.
    pub hidden: usize,
    /// Width of the per-joint features and of the final shape vector.
    pub d2: usize,
    /// When false, pairwise reasoning is replaced by a per-joint MLP followed
    /// by max pooling over joints.
    pub use_relation_network: bool,
}

impl ShapeEmbedConfig {
    pub fn new(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            hidden: 4 * d1,
            d2,
            use_relation_network: true,
        }
    }
}

/// The fixed-length shape vector `f^P`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeEmbedding<F> {
    pub vector: Array1<F>,
}

#[derive(Clone, Debug)]
enum JointPooling {
    Relation {
        /// `(2 * d2, d2)`: rows `[0, d2)` act on the first joint of a pair,
        /// rows `[d2, 2 * d2)` on the second.
        pair_weight: ParamId,
        pair_bias: ParamId,
        reason: Linear,
    },
    PerJoint {
        hidden: Linear,
        out: Linear,
    },
}

#[derive(Clone, Debug)]
pub struct ShapeEmbedder {
    config: ShapeEmbedConfig,
    /// `(3, d1)` position embedding.
    position_weight: ParamId,
    /// `(13, d1)` semantic embedding.
    semantic_weight: ParamId,
    refine_hidden: Linear,
    refine_out: Linear,
    pooling: JointPooling,
}

/// Intermediates of the per-joint embedding.
#[derive(Clone, Debug)]
pub struct EmbedCache<F> {
    positions: Array2<F>,
    semantics: Array2<F>,
    embedded: Array2<F>,
    hidden: Array2<F>,
}

/// Intermediates of pairwise reasoning and pooling.
#[derive(Clone, Debug)]
pub struct PoolCache<F> {
    joints: Array2<F>,
    activated: Array2<F>,
    argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ShapeCache<F> {
    embed: EmbedCache<F>,
    pool: PoolCache<F>,
}

impl ShapeEmbedder {
    pub fn new<F: Real>(
        config: ShapeEmbedConfig,
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Self {
        let ShapeEmbedConfig { d1, hidden, d2, .. } = config;
        let position_weight =
            params.register(format!("{prefix}.position_embed"), init.normal(&[3, d1], 1.0));
        let semantic_weight = params.register(
            format!("{prefix}.semantic_embed"),
            init.normal(&[NUM_JOINTS, d1], 1.0),
        );
        let refine_hidden = Linear::he(params, init, &format!("{prefix}.refine.0"), d1, hidden);
        let refine_out = Linear::he(params, init, &format!("{prefix}.refine.1"), hidden, d2);
        let pooling = if config.use_relation_network {
            let pair_weight = params.register(
                format!("{prefix}.relation.0.weight"),
                init.he(&[2 * d2, d2], 2 * d2),
            );
            let pair_bias =
                params.register(format!("{prefix}.relation.0.bias"), Initializer::zeros(&[d2]));
            let reason = Linear::new(
                params,
                init,
                &format!("{prefix}.relation.1"),
                d2,
                d2,
                (1.0 / d2 as f64).sqrt(),
                true,
            );
            JointPooling::Relation {
                pair_weight,
                pair_bias,
                reason,
            }
        } else {
            let hidden = Linear::he(params, init, &format!("{prefix}.joint_mlp.0"), d2, d2);
            let out = Linear::new(
                params,
                init,
                &format!("{prefix}.joint_mlp.1"),
                d2,
                d2,
                (1.0 / d2 as f64).sqrt(),
                true,
            );
            JointPooling::PerJoint { hidden, out }
        };
        Self {
            config,
            position_weight,
            semantic_weight,
            refine_hidden,
            refine_out,
            pooling,
        }
    }

    pub fn config(&self) -> &ShapeEmbedConfig {
        &self.config
    }

    /// Per-joint features `f_i = F(W_p P_i + W_s S_i)`, one row per joint.
    pub fn embed_joints<F: Real>(
        &self,
        kps: &KeypointSet,
        params: &ParamSet<F>,
    ) -> Result<(Array2<F>, EmbedCache<F>)> {
        self.check_shapes(params)?;
        let n = kps.joints().len();
        let mut positions = Array2::<F>::zeros((n, 3));
        let mut semantics = Array2::<F>::zeros((n, NUM_JOINTS));
        for (row, joint) in kps.joints().iter().enumerate() {
            for k in 0..3 {
                positions[[row, k]] = F::lit(joint.position[k]);
            }
            semantics[[row, joint.semantic_index]] = F::one();
        }
        let embedded = positions.dot(&params.matrix(self.position_weight))
            + semantics.dot(&params.matrix(self.semantic_weight));
        let mut hidden = self.refine_hidden.forward(params, embedded.view());
        relu_inplace(&mut hidden);
        let mut joints = self.refine_out.forward(params, hidden.view());
        relu_inplace(&mut joints);
        Ok((
            joints,
            EmbedCache {
                positions,
                semantics,
                embedded,
                hidden,
            },
        ))
    }

    /// Pairwise reasoning over all ordered pairs `[f_i; f_j]` (diagonal
    /// included) followed by global max pooling over the pair grid.
    ///
    /// Works for any number of rows, which the unit tests exploit to check
    /// small instances by enumeration.
    pub fn relation_pool<F: Real>(
        &self,
        joints: &Array2<F>,
        params: &ParamSet<F>,
    ) -> Result<(ShapeEmbedding<F>, PoolCache<F>)> {
        let d2 = self.config.d2;
        if joints.ncols() != d2 || joints.nrows() == 0 {
            return Err(ReidError::ShapeMismatch(format!(
                "joint features must be (n, {d2}), got {:?}",
                joints.dim()
            )));
        }
        if !joints.iter().all(|v| v.is_finite()) {
            return Err(ReidError::ShapeMismatch("non-finite joint features".into()));
        }
        let (activated, out) = match &self.pooling {
            JointPooling::Relation {
                pair_weight,
                pair_bias,
                reason,
            } => {
                let pre = pair_preactivation(
                    joints.view(),
                    params.matrix(*pair_weight),
                    params.vector(*pair_bias).to_owned(),
                );
                let mut activated = pre;
                relu_inplace(&mut activated);
                let out = reason.forward(params, activated.view());
                (activated, out)
            }
            JointPooling::PerJoint { hidden, out } => {
                let mut activated = hidden.forward(params, joints.view());
                relu_inplace(&mut activated);
                let y = out.forward(params, activated.view());
                (activated, y)
            }
        };
        let (vector, argmax) = column_max(&out);
        Ok((
            ShapeEmbedding { vector },
            PoolCache {
                joints: joints.clone(),
                activated,
                argmax,
            },
        ))
    }

    pub fn forward<F: Real>(
        &self,
        kps: &KeypointSet,
        params: &ParamSet<F>,
    ) -> Result<(ShapeEmbedding<F>, ShapeCache<F>)> {
        let (joints, embed) = self.embed_joints(kps, params)?;
        let (shape, pool) = self.relation_pool(&joints, params)?;
        Ok((shape, ShapeCache { embed, pool }))
    }

    /// Backpropagates a gradient on `f^P` into every parameter.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &ShapeCache<F>,
        d_shape: &Array1<F>,
        grads: &mut Grads<F>,
    ) {
        let d_joints = self.pool_backward(params, &cache.pool, d_shape, grads);
        self.embed_backward(params, &cache.embed, cache.pool.joints.view(), d_joints, grads);
    }

    fn pool_backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &PoolCache<F>,
        d_shape: &Array1<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let d2 = self.config.d2;
        let mut d_out = Array2::<F>::zeros((cache.activated.nrows(), d2));
        for (c, &r) in cache.argmax.iter().enumerate() {
            d_out[[r, c]] = d_shape[c];
        }
        match &self.pooling {
            JointPooling::Relation {
                pair_weight,
                pair_bias,
                reason,
            } => {
                let n = cache.joints.nrows();
                let mut d_pre = reason.backward(params, cache.activated.view(), d_out.view(), grads);
                relu_backward_inplace(&mut d_pre, &cache.activated);
                grads
                    .vector_mut(*pair_bias)
                    .scaled_add(F::one(), &d_pre.sum_axis(Axis(0)));
                // Row i*n + j of d_pre belongs to pair (i, j).
                let grid = d_pre
                    .into_shape_with_order((n, n, d2))
                    .expect("pair grid layout");
                let d_first = grid.sum_axis(Axis(1));
                let d_second = grid.sum_axis(Axis(0));
                let w = params.matrix(*pair_weight);
                let (w_first, w_second) = w.split_at(Axis(0), d2);
                {
                    let mut gw = grads.matrix_mut(*pair_weight);
                    let (mut g_first, mut g_second) = gw.view_mut().split_at(Axis(0), d2);
                    g_first.scaled_add(F::one(), &cache.joints.t().dot(&d_first));
                    g_second.scaled_add(F::one(), &cache.joints.t().dot(&d_second));
                }
                d_first.dot(&w_first.t()) + d_second.dot(&w_second.t())
            }
            JointPooling::PerJoint { hidden, out } => {
                let mut d_act = out.backward(params, cache.activated.view(), d_out.view(), grads);
                relu_backward_inplace(&mut d_act, &cache.activated);
                hidden.backward(params, cache.joints.view(), d_act.view(), grads)
            }
        }
    }

    fn embed_backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &EmbedCache<F>,
        joints: ArrayView2<'_, F>,
        mut d_joints: Array2<F>,
        grads: &mut Grads<F>,
    ) {
        relu_backward_inplace(&mut d_joints, &joints);
        let mut d_hidden = self
            .refine_out
            .backward(params, cache.hidden.view(), d_joints.view(), grads);
        relu_backward_inplace(&mut d_hidden, &cache.hidden);
        let d_embedded =
            self.refine_hidden
                .backward(params, cache.embedded.view(), d_hidden.view(), grads);
        grads
            .matrix_mut(self.position_weight)
            .scaled_add(F::one(), &cache.positions.t().dot(&d_embedded));
        grads
            .matrix_mut(self.semantic_weight)
            .scaled_add(F::one(), &cache.semantics.t().dot(&d_embedded));
    }

    fn check_shapes<F: Real>(&self, params: &ParamSet<F>) -> Result<()> {
        let d1 = self.config.d1;
        let pw = params.get(self.position_weight).shape();
        let sw = params.get(self.semantic_weight).shape();
        if pw != [3, d1] || sw != [NUM_JOINTS, d1] {
            return Err(ReidError::ShapeMismatch(format!(
                "embedding weights {pw:?} / {sw:?} inconsistent with d1={d1}"
            )));
        }
        Ok(())
    }
}

/// Pre-activation of the first 1x1 relation convolution for every ordered
/// pair, computed as `A_i + B_j + b` with `A = f W_first`, `B = f W_second`.
/// Each pair row is assembled by the same scalar sequence wherever it sits in
/// the grid, which keeps pooling exactly invariant to joint order.
fn pair_preactivation<F: Real>(
    joints: ArrayView2<'_, F>,
    weight: ArrayView2<'_, F>,
    bias: Array1<F>,
) -> Array2<F> {
    let (n, d2) = joints.dim();
    let (w_first, w_second) = weight.split_at(Axis(0), d2);
    let first = joints.dot(&w_first);
    let second = joints.dot(&w_second);
    let mut pre = Array2::<F>::zeros((n * n, d2));
    for i in 0..n {
        for j in 0..n {
            let mut row = pre.row_mut(i * n + j);
            for c in 0..d2 {
                row[c] = first[[i, c]] + second[[j, c]] + bias[c];
            }
        }
    }
    pre
}

/// Column-wise maximum with first-occurrence argmax.
fn column_max<F: Real>(m: &Array2<F>) -> (Array1<F>, Vec<usize>) {
    let mut best = m.row(0).to_owned();
    let mut argmax = vec![0usize; m.ncols()];
    for (r, row) in m.outer_iter().enumerate().skip(1) {
        for (c, &v) in row.iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                argmax[c] = r;
            }
        }
    }
    (best, argmax)
}
