use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, lr_at, weighted_total, LossWeights, Sgd, TrainConfig};
use crate::checkpoint::{checkpoint_file_name, load_checkpoint, save_checkpoint};
use crate::dataio::{normalize_image, Sample, Vocabularies};
use crate::error::{ReidError, Result};
use crate::model::Model;
use crate::nn::Grads;
use crate::seeds::{self, stream};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Training samples with their class indices.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub samples: Vec<Sample>,
    pub person_labels: Vec<usize>,
    pub cloth_labels: Vec<usize>,
    pub vocabularies: Vocabularies,
}

impl TrainData {
    pub fn new(samples: Vec<Sample>, vocabularies: Vocabularies) -> Result<Self> {
        if samples.is_empty() {
            return Err(ReidError::EmptySplit("train".into()));
        }
        let lookup = |id: u32, v: &crate::dataio::Vocabulary| {
            v.index_of(id).ok_or(ReidError::LabelOutOfRange {
                label: id as usize,
                classes: v.len(),
            })
        };
        let person_labels = samples
            .iter()
            .map(|s| lookup(s.record.person_id, &vocabularies.person))
            .collect::<Result<_>>()?;
        let cloth_labels = samples
            .iter()
            .map(|s| lookup(s.record.cloth_id, &vocabularies.cloth))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            person_labels,
            cloth_labels,
            vocabularies,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Number of completed epochs, starting at 1.
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_id: Vec<f64>,
    pub loss_cloth: Vec<f64>,
    /// Training identity accuracy of the deepest block's head.
    pub acc_id: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Metrics of the epochs run by this call.
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub final_epoch: usize,
}

struct SampleStep {
    grads: Grads<f32>,
    identity_ce: Vec<f64>,
    cloth_ce: Vec<f64>,
    correct: bool,
}

fn argmax(v: &Array1<f32>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    model: &Model<f32>,
    data: &TrainData,
    config: &TrainConfig,
    weights: &LossWeights,
    epoch: usize,
    index: usize,
    batch_len: usize,
) -> Result<SampleStep> {
    let sample = &data.samples[index];
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        config.seed,
        &[stream::AUGMENT, epoch as u64, index as u64],
    ));
    let mut raw = sample.image.clone();
    config.random_erasing.apply(&mut raw, &mut rng)?;
    let image = normalize_image::<f32>(&raw);
    let pass = model.forward_training(&image, &sample.keypoints)?;
    let scale = 1.0 / batch_len as f64;
    let (mut d_id, mut d_cl) = (Vec::new(), Vec::new());
    let (mut identity_ce, mut cloth_ce) = (Vec::new(), Vec::new());
    for b in 0..pass.output.identity_logits.len() {
        let (l, g) = cross_entropy(pass.output.identity_logits[b].view(), data.person_labels[index])?;
        identity_ce.push(l as f64);
        d_id.push(g * (weights.mu[b] * scale) as f32);
        let (l, g) = cross_entropy(pass.output.cloth_logits[b].view(), data.cloth_labels[index])?;
        cloth_ce.push(l as f64);
        d_cl.push(g * (weights.lambda[b] * scale) as f32);
    }
    let last = pass.output.identity_logits.last().expect("at least one block");
    let correct = argmax(last) == data.person_labels[index];
    let grads = model.backward(&pass, &d_id, &d_cl)?;
    Ok(SampleStep {
        grads,
        identity_ce,
        cloth_ce,
        correct,
    })
}

fn read_metrics(path: &Path, up_to_epoch: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: EpochMetrics = serde_json::from_str(&line)?;
        if m.epoch <= up_to_epoch {
            kept.push(line);
        }
    }
    Ok(kept)
}

/// Runs SGD over `data`, writing checkpoints and a metrics log into
/// `out_dir`. With `resume`, parameters and momentum are restored from the
/// checkpoint and training continues from its epoch; because data order and
/// augmentation are derived from `(seed, epoch, sample)`, the continuation is
/// bit-identical to an uninterrupted run.
pub fn train(
    model: &mut Model<f32>,
    data: &TrainData,
    config: &TrainConfig,
    weights: &LossWeights,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let weights = weights.for_blocks(model.num_blocks())?;
    let n_person = model.config().num_person_classes;
    let n_cloth = model.config().num_cloth_classes;
    if data.vocabularies.person.len() != n_person || data.vocabularies.cloth.len() != n_cloth {
        return Err(ReidError::InvalidConfig(format!(
            "model has {n_person}/{n_cloth} classes but the data has {}/{}",
            data.vocabularies.person.len(),
            data.vocabularies.cloth.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    data.vocabularies.save(out_dir)?;

    let mut sgd = Sgd::new(model.params());
    let mut start = 0;
    if let Some(path) = resume {
        let ck = load_checkpoint(path)?;
        if ck.model.config() != model.config() {
            return Err(ReidError::Checkpoint(
                "checkpoint model configuration differs from the requested model".into(),
            ));
        }
        *model = ck.model;
        if let Some(m) = ck.momentum {
            sgd.velocity = m;
        }
        start = ck.epoch;
        log::info!("resuming from {} at epoch {start}", path.display());
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = read_metrics(&metrics_path, start)?;
    let mut metrics_file = fs::File::create(&metrics_path)?;
    for line in &kept {
        writeln!(metrics_file, "{line}")?;
    }

    let chunk = rayon::current_num_threads().max(1);
    let n = data.len();
    let mut outcome = TrainOutcome {
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        final_epoch: start,
    };
    for epoch in start..config.total_epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, config)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[stream::EPOCH_ORDER, epoch as u64],
        )));
        let blocks = model.num_blocks();
        let mut id_sum = vec![0.0; blocks];
        let mut cl_sum = vec![0.0; blocks];
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = model.params().zeros_like();
            let mut batch_loss = 0.0;
            for group in batch.chunks(chunk) {
                let steps: Vec<SampleStep> = group
                    .par_iter()
                    .map(|&i| sample_step(model, data, config, &weights, epoch, i, batch.len()))
                    .collect::<Result<_>>()?;
                // Summed in sample order so the result is independent of the thread count.
                for s in steps {
                    grads.add_assign(&s.grads);
                    for b in 0..blocks {
                        id_sum[b] += s.identity_ce[b];
                        cl_sum[b] += s.cloth_ce[b];
                        batch_loss += weights.mu[b] * s.identity_ce[b] + weights.lambda[b] * s.cloth_ce[b];
                    }
                    correct += s.correct as usize;
                }
            }
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(ReidError::DivergedLoss {
                    epoch,
                    step,
                    detail: format!("batch loss {batch_loss}, finite gradients: {}", grads.all_finite()),
                });
            }
            sgd.step(model.params_mut(), &grads, lr, config.momentum, config.weight_decay);
        }
        let identity: Vec<f64> = id_sum.iter().map(|s| s / n as f64).collect();
        let cloth: Vec<f64> = cl_sum.iter().map(|s| s / n as f64).collect();
        let breakdown = weighted_total(&identity, &cloth, &weights)?;
        let done = epoch + 1;
        let m = EpochMetrics {
            epoch: done,
            lr,
            loss_total: breakdown.total,
            loss_id: identity,
            loss_cloth: cloth,
            acc_id: correct as f64 / n as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {done}/{} lr {lr:.2e} loss {:.4} acc_id {:.3} ({:.1}s)",
            config.total_epochs,
            m.loss_total,
            m.acc_id,
            m.wall_time_s
        );
        writeln!(metrics_file, "{}", serde_json::to_string(&m)?)?;
        metrics_file.flush()?;
        outcome.metrics.push(m);
        if done % config.checkpoint_every == 0 || done == config.total_epochs {
            let path = out_dir.join(checkpoint_file_name(done));
            save_checkpoint(&path, model, &data.vocabularies, done, Some(config), Some(&sgd.velocity))?;
            outcome.checkpoints.push(path);
        }
        outcome.final_epoch = done;
    }
    Ok(outcome)
}
