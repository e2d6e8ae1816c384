//! Cloth-elimination / shape-distillation block.
//!
//! Given a backbone map `f^I` and a shape vector `f^P`:
//!
//! ```text
//! f_norm  = IN(f^I)
//! f_tilde = (1 + G_s(f^P)) * f_norm + G_b(f^P)
//! f_R     = f^I - f_tilde
//! alpha   = sigmoid(G2(relu(G1(GAP(f_R)))))
//! f_C+    = alpha * f_R,   f_C- = (1 - alpha) * f_R
//! f^+     = relu(conv_plus(f_tilde + f_C-))
//! f^-     = relu(conv_minus(f_norm + f_C+))
//! ```

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, Grads, Initializer, Linear, ParamSet};
use crate::shape_embed::ShapeEmbedding;
use crate::tensor::{ensure_same_shape, sigmoid, FeatureMap, Real};

/// Attention weight used when the learned split is ablated.
pub const FIXED_ALPHA: f64 = 0.5;

/// Initial bias of the attention output layer. A positive value starts the
/// block with most of the residual routed to the cloth branch
/// (`sigmoid(2) ~ 0.88`).
pub const ATTENTION_BIAS_INIT: f64 = 2.0;

/// Attention logits are clamped to `[-B, B]` so that single-precision
/// `alpha` stays strictly inside `(0, 1)`; `sigmoid(17)` already rounds to 1
/// in f32.
pub const ATTENTION_LOGIT_BOUND: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CesdConfig {
    pub channels: usize,
    pub shape_dim: usize,
    pub reduction: usize,
    pub epsilon: f64,
    pub use_attention: bool,
}

#[derive(Clone, Debug)]
pub struct CesdBlock {
    config: CesdConfig,
    scale_head: Linear,
    shift_head: Linear,
    attention: Option<(Linear, Linear)>,
    refine_plus: Linear,
    refine_minus: Linear,
}

/// Per-channel statistics kept by instance normalization for its backward.
#[derive(Clone, Debug)]
pub struct NormStats<F> {
    pub mean: Array1<F>,
    pub inv_std: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CesdIntermediates<F> {
    pub f_norm: FeatureMap<F>,
    pub f_tilde: FeatureMap<F>,
    pub f_residual: FeatureMap<F>,
    /// `alpha * f_R`, the cloth-relevant part of the residual.
    pub f_cloth_relevant: FeatureMap<F>,
    /// `(1 - alpha) * f_R`, the cloth-irrelevant part.
    pub f_cloth_irrelevant: FeatureMap<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CesdOutputs<F> {
    /// Identity-relevant map; feeds the next backbone stage.
    pub f_plus: FeatureMap<F>,
    /// Cloth-relevant map; feeds only the clothing classifier.
    pub f_minus: FeatureMap<F>,
    pub alpha: Array1<F>,
    pub intermediates: Option<CesdIntermediates<F>>,
}

#[derive(Clone, Debug)]
pub struct CesdCache<F> {
    f_input: FeatureMap<F>,
    shape: Array1<F>,
    stats: NormStats<F>,
    inner: CesdIntermediates<F>,
    delta_gamma: Array1<F>,
    gap: Array1<F>,
    attn_hidden: Option<Array1<F>>,
    alpha: Array1<F>,
    plus_input: Array2<F>,
    minus_input: Array2<F>,
    f_plus: FeatureMap<F>,
    f_minus: FeatureMap<F>,
}

/// Per-sample, per-channel standardization over spatial positions using the
/// biased variance: `(x - mean) / sqrt(var + epsilon)`.
pub fn instance_normalize<F: Real>(x: &FeatureMap<F>, epsilon: F) -> (FeatureMap<F>, NormStats<F>) {
    let m = x.matrix();
    let n = F::from_usize(m.nrows()).expect("position count");
    let mean = m.mean_axis(Axis(0)).expect("non-empty map");
    let centered = &m - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| F::one() / (v + epsilon).sqrt());
    let normed = centered * &inv_std;
    (
        FeatureMap::from_matrix(x.h(), x.w(), normed),
        NormStats { mean, inv_std },
    )
}

/// Gradient of [`instance_normalize`] with respect to its input.
pub fn instance_normalize_backward<F: Real>(
    normed: &FeatureMap<F>,
    stats: &NormStats<F>,
    d_normed: &FeatureMap<F>,
) -> FeatureMap<F> {
    let xhat = normed.matrix();
    let dy = d_normed.matrix();
    let n = F::from_usize(xhat.nrows()).expect("position count");
    let sum_dy = dy.sum_axis(Axis(0));
    let sum_dy_xhat = (&dy * &xhat).sum_axis(Axis(0));
    let mut dx = Array2::<F>::zeros(xhat.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dy.rows())
        .and(xhat.rows())
        .for_each(|mut out, dyr, xr| {
            for c in 0..out.len() {
                out[c] = stats.inv_std[c] / n * (n * dyr[c] - sum_dy[c] - xr[c] * sum_dy_xhat[c]);
            }
        });
    FeatureMap::from_matrix(normed.h(), normed.w(), dx)
}

fn broadcast_scale<F: Real>(map: &FeatureMap<F>, scale: &Array1<F>) -> FeatureMap<F> {
    let m = &map.matrix() * scale;
    FeatureMap::from_matrix(map.h(), map.w(), m)
}

impl CesdBlock {
    pub fn new<F: Real>(
        config: CesdConfig,
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self> {
        let CesdConfig {
            channels: c,
            shape_dim: d2,
            reduction: r,
            epsilon,
            use_attention,
        } = config;
        if c == 0 || d2 == 0 {
            return Err(ReidError::InvalidConfig("CESD dimensions must be positive".into()));
        }
        if r == 0 || c % r != 0 {
            return Err(ReidError::InvalidConfig(format!(
                "channel count {c} not divisible by reduction {r}"
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(ReidError::InvalidConfig("epsilon must be positive".into()));
        }
        let head_std = (1.0 / d2 as f64).sqrt();
        // Small scale-offset head so that 1 + delta_gamma starts near one.
        let scale_head = Linear::new(params, init, &format!("{prefix}.scale_head"), d2, c, 0.1 * head_std, true);
        let shift_head = Linear::new(params, init, &format!("{prefix}.shift_head"), d2, c, head_std, true);
        let attention = use_attention.then(|| {
            let squeeze = Linear::he(params, init, &format!("{prefix}.attention.0"), c, c / r);
            let excite = Linear::new(
                params,
                init,
                &format!("{prefix}.attention.1"),
                c / r,
                c,
                (1.0 / (c / r) as f64).sqrt(),
                true,
            );
            let bias = excite.bias.expect("excite layer has a bias");
            params
                .set(bias, Initializer::filled(&[c], ATTENTION_BIAS_INIT))
                .expect("bias shape is unchanged");
            (squeeze, excite)
        });
        let refine_plus = Linear::he(params, init, &format!("{prefix}.refine_plus"), c, c);
        let refine_minus = Linear::he(params, init, &format!("{prefix}.refine_minus"), c, c);
        Ok(Self {
            config,
            scale_head,
            shift_head,
            attention,
            refine_plus,
            refine_minus,
        })
    }

    pub fn config(&self) -> &CesdConfig {
        &self.config
    }

    pub fn refine_plus(&self) -> &Linear {
        &self.refine_plus
    }

    pub fn attention_layers(&self) -> Option<&(Linear, Linear)> {
        self.attention.as_ref()
    }

    /// Shape-conditioned re-scaling `(1 + G_s(f^P)) * f_norm + G_b(f^P)`.
    /// Returns the map together with `delta_gamma` and `beta`.
    pub fn shape_distill<F: Real>(
        &self,
        params: &ParamSet<F>,
        f_norm: &FeatureMap<F>,
        shape: &ShapeEmbedding<F>,
    ) -> Result<(FeatureMap<F>, Array1<F>, Array1<F>)> {
        if shape.vector.len() != self.config.shape_dim || f_norm.c() != self.config.channels {
            return Err(ReidError::ShapeMismatch(format!(
                "shape vector {} / channels {} vs block ({}, {})",
                shape.vector.len(),
                f_norm.c(),
                self.config.shape_dim,
                self.config.channels
            )));
        }
        let delta_gamma = self.scale_head.forward_vec(params, shape.vector.view());
        let beta = self.shift_head.forward_vec(params, shape.vector.view());
        let gain = delta_gamma.mapv(|g| F::one() + g);
        let m = &f_norm.matrix() * &gain + &beta;
        Ok((FeatureMap::from_matrix(f_norm.h(), f_norm.w(), m), delta_gamma, beta))
    }

    fn attention_weights<F: Real>(
        &self,
        params: &ParamSet<F>,
        residual: &FeatureMap<F>,
    ) -> (Array1<F>, Array1<F>, Option<Array1<F>>) {
        let gap = residual.gap();
        match &self.attention {
            Some((squeeze, excite)) => {
                let mut hidden = squeeze.forward_vec(params, gap.view());
                relu_inplace(&mut hidden);
                let bound = F::lit(ATTENTION_LOGIT_BOUND);
                let logits = excite.forward_vec(params, hidden.view());
                (logits.mapv(|z| sigmoid(z.max(-bound).min(bound))), gap, Some(hidden))
            }
            None => (Array1::from_elem(residual.c(), F::lit(FIXED_ALPHA)), gap, None),
        }
    }

    /// Residual, attention split and the two refinement convolutions.
    pub fn cloth_eliminate<F: Real>(
        &self,
        params: &ParamSet<F>,
        f_input: &FeatureMap<F>,
        f_tilde: &FeatureMap<F>,
        f_norm: &FeatureMap<F>,
    ) -> Result<CesdOutputs<F>> {
        ensure_same_shape(f_input, f_tilde, "f^I vs f_tilde")?;
        ensure_same_shape(f_input, f_norm, "f^I vs f_norm")?;
        if f_input.c() != self.config.channels {
            return Err(ReidError::ShapeMismatch(format!(
                "block expects {} channels, got {}",
                self.config.channels,
                f_input.c()
            )));
        }
        let parts = self.eliminate_parts(params, f_input, f_tilde, f_norm);
        Ok(CesdOutputs {
            f_plus: parts.f_plus,
            f_minus: parts.f_minus,
            alpha: parts.alpha,
            intermediates: Some(CesdIntermediates {
                f_norm: f_norm.clone(),
                f_tilde: f_tilde.clone(),
                f_residual: parts.residual,
                f_cloth_relevant: parts.relevant,
                f_cloth_irrelevant: parts.irrelevant,
            }),
        })
    }

    fn eliminate_parts<F: Real>(
        &self,
        params: &ParamSet<F>,
        f_input: &FeatureMap<F>,
        f_tilde: &FeatureMap<F>,
        f_norm: &FeatureMap<F>,
    ) -> EliminateParts<F> {
        let (h, w) = (f_input.h(), f_input.w());
        let residual = FeatureMap::from_matrix(h, w, &f_input.matrix() - &f_tilde.matrix());
        let (alpha, gap, attn_hidden) = self.attention_weights(params, &residual);
        let one_minus = alpha.mapv(|a| F::one() - a);
        let relevant = broadcast_scale(&residual, &alpha);
        let irrelevant = broadcast_scale(&residual, &one_minus);
        let plus_input = &f_tilde.matrix() + &irrelevant.matrix();
        let minus_input = &f_norm.matrix() + &relevant.matrix();
        let mut plus = self.refine_plus.forward(params, plus_input.view());
        relu_inplace(&mut plus);
        let mut minus = self.refine_minus.forward(params, minus_input.view());
        relu_inplace(&mut minus);
        EliminateParts {
            residual,
            alpha,
            gap,
            attn_hidden,
            relevant,
            irrelevant,
            plus_input,
            minus_input,
            f_plus: FeatureMap::from_matrix(h, w, plus),
            f_minus: FeatureMap::from_matrix(h, w, minus),
        }
    }

    /// Full block. `retain` copies the intermediates into the outputs.
    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        f_input: &FeatureMap<F>,
        shape: &ShapeEmbedding<F>,
        retain: bool,
    ) -> Result<(CesdOutputs<F>, CesdCache<F>)> {
        if f_input.c() != self.config.channels {
            return Err(ReidError::ShapeMismatch(format!(
                "block expects {} channels, got {}",
                self.config.channels,
                f_input.c()
            )));
        }
        let (f_norm, stats) = instance_normalize(f_input, F::lit(self.config.epsilon));
        let (f_tilde, delta_gamma, _beta) = self.shape_distill(params, &f_norm, shape)?;
        let parts = self.eliminate_parts(params, f_input, &f_tilde, &f_norm);
        let inner = CesdIntermediates {
            f_norm,
            f_tilde,
            f_residual: parts.residual,
            f_cloth_relevant: parts.relevant,
            f_cloth_irrelevant: parts.irrelevant,
        };
        let outputs = CesdOutputs {
            f_plus: parts.f_plus.clone(),
            f_minus: parts.f_minus.clone(),
            alpha: parts.alpha.clone(),
            intermediates: retain.then(|| inner.clone()),
        };
        let cache = CesdCache {
            f_input: f_input.clone(),
            shape: shape.vector.clone(),
            stats,
            inner,
            delta_gamma,
            gap: parts.gap,
            attn_hidden: parts.attn_hidden,
            alpha: parts.alpha,
            plus_input: parts.plus_input,
            minus_input: parts.minus_input,
            f_plus: parts.f_plus,
            f_minus: parts.f_minus,
        };
        Ok((outputs, cache))
    }

    /// Backpropagates gradients on `f^+` and `f^-`, accumulating parameter
    /// gradients and returning `(d f^I, d f^P)`.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &CesdCache<F>,
        d_plus: &FeatureMap<F>,
        d_minus: &FeatureMap<F>,
        grads: &mut Grads<F>,
    ) -> (FeatureMap<F>, Array1<F>) {
        let (h, w) = (cache.f_input.h(), cache.f_input.w());
        let inner = &cache.inner;

        let mut dz_plus = d_plus.matrix().to_owned();
        relu_backward_inplace(&mut dz_plus, &cache.f_plus.matrix());
        let d_plus_in = self
            .refine_plus
            .backward(params, cache.plus_input.view(), dz_plus.view(), grads);
        let mut dz_minus = d_minus.matrix().to_owned();
        relu_backward_inplace(&mut dz_minus, &cache.f_minus.matrix());
        let d_minus_in = self
            .refine_minus
            .backward(params, cache.minus_input.view(), dz_minus.view(), grads);

        // plus_input = f_tilde + (1 - alpha) f_R; minus_input = f_norm + alpha f_R
        let mut d_tilde = d_plus_in.clone();
        let mut d_norm = d_minus_in.clone();
        let one_minus = cache.alpha.mapv(|a| F::one() - a);
        let mut d_residual = &d_minus_in * &cache.alpha + &d_plus_in * &one_minus;

        if let (Some((squeeze, excite)), Some(hidden)) = (&self.attention, &cache.attn_hidden) {
            let d_alpha = ((&d_minus_in - &d_plus_in) * inner.f_residual.matrix()).sum_axis(Axis(0));
            let bound = F::lit(ATTENTION_LOGIT_BOUND);
            let logits = excite.forward_vec(params, hidden.view());
            let d_logits = Zip::from(&d_alpha)
                .and(&cache.alpha)
                .and(&logits)
                .map_collect(|&g, &a, &z| {
                    if z.abs() > bound {
                        F::zero()
                    } else {
                        g * a * (F::one() - a)
                    }
                });
            let mut d_hidden = excite.backward_vec(params, hidden.view(), d_logits.view(), grads);
            relu_backward_inplace(&mut d_hidden, hidden);
            let d_gap = squeeze.backward_vec(params, cache.gap.view(), d_hidden.view(), grads);
            let n = F::from_usize(h * w).expect("position count");
            d_residual += &(d_gap / n);
        }

        // f_R = f^I - f_tilde
        let mut d_input = d_residual.clone();
        d_tilde -= &d_residual;

        // f_tilde = (1 + delta_gamma) f_norm + beta
        let gain = cache.delta_gamma.mapv(|g| F::one() + g);
        d_norm += &(&d_tilde * &gain);
        let d_delta_gamma = (&d_tilde * &inner.f_norm.matrix()).sum_axis(Axis(0));
        let d_beta = d_tilde.sum_axis(Axis(0));
        let d_shape = self
            .scale_head
            .backward_vec(params, cache.shape.view(), d_delta_gamma.view(), grads)
            + self
                .shift_head
                .backward_vec(params, cache.shape.view(), d_beta.view(), grads);

        let d_norm = FeatureMap::from_matrix(h, w, d_norm);
        let d_from_norm = instance_normalize_backward(&inner.f_norm, &cache.stats, &d_norm);
        d_input += &d_from_norm.matrix();
        (FeatureMap::from_matrix(h, w, d_input), d_shape)
    }
}

struct EliminateParts<F> {
    residual: FeatureMap<F>,
    alpha: Array1<F>,
    gap: Array1<F>,
    attn_hidden: Option<Array1<F>>,
    relevant: FeatureMap<F>,
    irrelevant: FeatureMap<F>,
    plus_input: Array2<F>,
    minus_input: Array2<F>,
    f_plus: FeatureMap<F>,
    f_minus: FeatureMap<F>,
}
