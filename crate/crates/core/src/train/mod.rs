//! Loss, schedule, augmentation, optimizer, and the training loop.

mod augment;
mod runner;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::model::TrainForwardOutput;
use crate::nn::{Grads, ParamSet};
use crate::tensor::{log_sum_exp, softmax, Real};

pub use augment::RandomErasing;
pub use runner::{train, EpochMetrics, TrainData, TrainOutcome, METRICS_FILE};

/// Per-block loss coefficients: `lambda` for the clothing terms and `mu` for
/// the identity terms, in block order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: vec![0.3, 0.6],
            mu: vec![0.5, 1.0],
        }
    }
}

impl LossWeights {
    /// Weights for a model with `blocks` CESD blocks. A single block keeps
    /// the deepest pair of coefficients.
    pub fn for_blocks(&self, blocks: usize) -> Result<Self> {
        self.validate()?;
        let n = self.lambda.len();
        match blocks {
            b if b == n => Ok(self.clone()),
            1 => Ok(Self {
                lambda: vec![self.lambda[n - 1]],
                mu: vec![self.mu[n - 1]],
            }),
            b => Err(ReidError::WrongArity { expected: n, got: b }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.len() != self.mu.len() || self.lambda.is_empty() {
            return Err(ReidError::WrongArity {
                expected: self.lambda.len(),
                got: self.mu.len(),
            });
        }
        if self.lambda.iter().chain(&self.mu).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ReidError::InvalidParams("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
    pub random_erasing: RandomErasing,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            base_lr: 0.01,
            lr_decay: 0.1,
            decay_every: 40,
            total_epochs: 120,
            random_erasing: RandomErasing::default(),
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReidError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.total_epochs == 0 || self.decay_every == 0 || self.checkpoint_every == 0 {
            return bad("batch size, epochs, decay interval and checkpoint interval must be positive");
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 || self.lr_decay.is_nan() || self.lr_decay <= 0.0 {
            return bad("learning rate and decay factor must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay must be non-negative");
        }
        self.random_erasing.validate()
    }
}

/// Step schedule: `base_lr * lr_decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(ReidError::EpochOutOfRange {
            epoch,
            total: config.total_epochs,
        });
    }
    Ok(config.base_lr * config.lr_decay.powi((epoch / config.decay_every) as i32))
}

/// Cross-entropy of one logit row and its gradient with respect to the logits.
pub fn cross_entropy<F: Real>(logits: ArrayView1<'_, F>, label: usize) -> Result<(F, Array1<F>)> {
    if label >= logits.len() {
        return Err(ReidError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let row = logits.to_vec();
    let loss = log_sum_exp(&row) - row[label];
    let mut grad = Array1::from(softmax(&row));
    grad[label] -= F::one();
    Ok((loss, grad))
}

/// Mean cross-entropy over the rows of a logit matrix.
pub fn mean_cross_entropy<F: Real>(logits: ArrayView2<'_, F>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(ReidError::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        sum += cross_entropy(row, label)?.0.to_f64_lossy();
    }
    Ok(sum / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Identity cross-entropy per block.
    pub identity: Vec<f64>,
    /// Clothing cross-entropy per block.
    pub cloth: Vec<f64>,
}

/// Combines per-block cross-entropies: `sum lambda_i CE_cloth_i + sum mu_i CE_id_i`.
pub fn weighted_total(identity: &[f64], cloth: &[f64], weights: &LossWeights) -> Result<LossBreakdown> {
    let w = weights.for_blocks(identity.len())?;
    if cloth.len() != identity.len() {
        return Err(ReidError::WrongArity {
            expected: identity.len(),
            got: cloth.len(),
        });
    }
    let total = w.lambda.iter().zip(cloth).map(|(l, c)| l * c).sum::<f64>()
        + w.mu.iter().zip(identity).map(|(m, i)| m * i).sum::<f64>();
    Ok(LossBreakdown {
        total,
        identity: identity.to_vec(),
        cloth: cloth.to_vec(),
    })
}

pub fn total_loss<F: Real>(
    output: &TrainForwardOutput<F>,
    person_labels: &[usize],
    cloth_labels: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut identity = Vec::with_capacity(output.stages.len());
    let mut cloth = Vec::with_capacity(output.stages.len());
    for s in &output.stages {
        identity.push(mean_cross_entropy(s.identity.view(), person_labels)?);
        cloth.push(mean_cross_entropy(s.clothing.view(), cloth_labels)?);
    }
    weighted_total(&identity, &cloth, weights)
}

/// SGD with momentum and L2 weight decay:
/// `g += wd * p; v = momentum * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub velocity: Grads<f32>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let v = self.velocity.get_mut(id);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = m * *v + (g + wd * *p);
                *p -= lr * *v;
            });
        }
    }
}
