use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use reid_core::checkpoint::{file_digest, load_checkpoint};
use reid_core::dataio::toy::{generate_toy_dataset, ToyDatasetConfig};
use reid_core::dataio::{load_dataset, load_samples, Sample};
use reid_core::eval::{evaluate, export_embeddings, DatasetFingerprint, EvalReport};
use reid_core::train::{train, RandomErasing, TrainData};
use reid_core::{
    build_model, Ablations, DatasetIndex, KeypointTable, LossWeights, ModelConfig,
    Split, TrainConfig,
};

use crate::args::{BackboneKind, EvalArgs, ExtractArgs, ToygenArgs, TrainArgs};
use crate::manifest::{RunManifest, MANIFEST_FILE};

/// A flag combination rejected after parsing; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(err: impl fmt::Display) -> anyhow::Error {
    UsageError(err.to_string()).into()
}

pub fn toygen(args: &ToygenArgs, manifest: RunManifest) -> Result<()> {
    let config = ToyDatasetConfig {
        num_identities: args.ids as usize,
        outfits_per_identity: args.outfits as usize,
        images_per_outfit: args.images as usize,
        num_cameras: args.cams as usize,
        image_size: args.size,
        seed: args.seed,
    };
    config.validate().map_err(usage)?;
    let manifest = manifest.with_config(&config, Some(args.seed))?;
    let toy = generate_toy_dataset(&config, &args.out)
        .with_context(|| format!("writing toy dataset to {}", args.out.display()))?;
    info!(
        "wrote {} train / {} query / {} gallery images to {}",
        toy.train.len(),
        toy.query.len(),
        toy.gallery.len(),
        args.out.display()
    );
    manifest.finish(&args.out.join(MANIFEST_FILE))
}

fn load_split(
    root: &Path,
    split: Split,
    keypoints: &KeypointTable,
    input_size: (usize, usize),
    confidence: f64,
) -> Result<(DatasetIndex, Vec<Sample>)> {
    let index = load_dataset(root, split, true, None)
        .with_context(|| format!("loading {split} split from {}", root.display()))?;
    let samples = load_samples(&index, keypoints, input_size, confidence)
        .with_context(|| format!("loading {split} samples"))?;
    Ok((index, samples))
}

fn load_keypoints(path: &Path) -> Result<KeypointTable> {
    KeypointTable::load(path).with_context(|| format!("reading keypoints from {}", path.display()))
}

#[derive(Serialize)]
struct TrainRun<'a> {
    data: &'a Path,
    keypoints: &'a Path,
    resume: Option<&'a Path>,
    confidence: f64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    loss_weights: &'a LossWeights,
}

pub fn train_cmd(args: &TrainArgs, manifest: RunManifest) -> Result<()> {
    let train_config = TrainConfig {
        batch_size: args.batch,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        base_lr: args.lr,
        lr_decay: args.lr_decay,
        decay_every: args.decay_every,
        total_epochs: args.epochs,
        random_erasing: RandomErasing {
            probability: args.erasing_prob,
            ..RandomErasing::default()
        },
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
    };
    train_config.validate().map_err(usage)?;

    let keypoints = load_keypoints(&args.keypoints)?;
    let input_size = match args.backbone {
        BackboneKind::Tiny => ModelConfig::tiny(1, 1).input_size,
        BackboneKind::Deep => ModelConfig::deep(1, 1).input_size,
    };
    let (index, samples) = load_split(&args.data, Split::Train, &keypoints, input_size, args.confidence)?;
    let (np, nc) = (index.vocab.person.len(), index.vocab.cloth.len());
    let mut model_config = match args.backbone {
        BackboneKind::Tiny => ModelConfig::tiny(np, nc),
        BackboneKind::Deep => ModelConfig::deep(np, nc),
    };
    model_config.ablations = Ablations {
        use_se: !args.no_se,
        use_relation_network: !args.no_rn,
        use_attention: !args.no_attn,
        single_cesd: args.single_cesd,
    };
    model_config.validate().map_err(usage)?;
    let weights = LossWeights::default();
    let manifest = manifest.with_config(
        &TrainRun {
            data: &args.data,
            keypoints: &args.keypoints,
            resume: args.resume.as_deref(),
            confidence: args.confidence,
            model: &model_config,
            train: &train_config,
            loss_weights: &weights,
        },
        Some(args.seed),
    )?;

    info!(
        "training on {} images, {np} identities, {nc} outfits",
        samples.len()
    );
    let data = TrainData::new(samples, index.vocab.clone())?;
    let mut model = build_model::<f32>(&model_config, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let outcome = train(
        &mut model,
        &data,
        &train_config,
        &weights,
        &args.out,
        args.resume.as_deref(),
    )?;
    if let Some(last) = outcome.metrics.last() {
        info!(
            "finished epoch {}: loss {:.4}, identity accuracy {:.3}",
            last.epoch, last.loss_total, last.acc_id
        );
    }
    for path in &outcome.checkpoints {
        info!("checkpoint {}", path.display());
    }
    manifest.finish(&args.out.join(MANIFEST_FILE))
}

#[derive(Serialize)]
struct EvalRun<'a> {
    data: &'a Path,
    keypoints: &'a Path,
    checkpoint: &'a Path,
    protocol: reid_core::Protocol,
    max_rank: u64,
    confidence: f64,
}

pub fn eval_cmd(args: &EvalArgs, manifest: RunManifest) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}", args.protocol))
    });
    let manifest = manifest.with_config(
        &EvalRun {
            data: &args.data,
            keypoints: &args.keypoints,
            checkpoint: &args.checkpoint,
            protocol: args.protocol,
            max_rank: args.max_rank,
            confidence: args.confidence,
        },
        None,
    )?;
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let input_size = ck.model.config().input_size;
    let keypoints = load_keypoints(&args.keypoints)?;
    let (qi, query) = load_split(&args.data, Split::Query, &keypoints, input_size, args.confidence)?;
    let (gi, gallery) = load_split(&args.data, Split::Gallery, &keypoints, input_size, args.confidence)?;
    let result = evaluate(&ck.model, &query, &gallery, args.protocol, args.max_rank as usize)?;
    let report = EvalReport::new(
        args.protocol,
        &result,
        query.len(),
        gallery.len(),
        file_digest(&args.checkpoint)?,
        args.data.display().to_string(),
        DatasetFingerprint {
            query: qi.fingerprint(),
            gallery: gi.fingerprint(),
        },
    );
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    fs::create_dir_all(&out)?;
    reid_core::checkpoint::write_atomic(&out.join("report.json"), json.as_bytes())?;
    info!(
        "{}: rank-1 {:.4}, mAP {:.4} over {} valid queries",
        args.protocol, report.rank.r1, report.map, report.num_valid_queries
    );
    manifest.finish(&out.join(MANIFEST_FILE))
}

#[derive(Serialize)]
struct ExtractRun<'a> {
    data: &'a Path,
    keypoints: &'a Path,
    checkpoint: &'a Path,
    out: &'a Path,
    splits: &'a [Split],
    confidence: f64,
}

/// The manifest sits next to the export as `<file>.manifest.json`.
pub fn extract_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn extract_cmd(args: &ExtractArgs, manifest: RunManifest) -> Result<()> {
    let manifest = manifest.with_config(
        &ExtractRun {
            data: &args.data,
            keypoints: &args.keypoints,
            checkpoint: &args.checkpoint,
            out: &args.out,
            splits: &args.splits,
            confidence: args.confidence,
        },
        None,
    )?;
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let input_size = ck.model.config().input_size;
    let keypoints = load_keypoints(&args.keypoints)?;
    let mut loaded = Vec::with_capacity(args.splits.len());
    for &split in &args.splits {
        let (_, samples) = load_split(&args.data, split, &keypoints, input_size, args.confidence)?;
        loaded.push((split, samples));
    }
    let sets: Vec<(Split, &[Sample])> = loaded.iter().map(|(s, v)| (*s, v.as_slice())).collect();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let lines = export_embeddings(&ck.model, &sets, &args.out)?;
    info!("wrote {lines} embeddings to {}", args.out.display());
    manifest.finish(&extract_manifest_path(&args.out))
}
