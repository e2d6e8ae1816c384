#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use reid_core::dataio::toy::{generate_toy_dataset, ToyDatasetConfig};
use reid_core::dataio::{load_samples, Sample};
use reid_core::keypoints::{JointEncoding, DEFAULT_CONFIDENCE_THRESHOLD, NUM_JOINTS};
use reid_core::train::{RandomErasing, TrainData};
use reid_core::{KeypointSet, KeypointTable, TrainConfig};
use tempfile::TempDir;

pub const TOY_SIZE: (usize, usize) = (64, 32);

pub fn toy_config() -> ToyDatasetConfig {
    ToyDatasetConfig {
        num_identities: 16,
        outfits_per_identity: 4,
        images_per_outfit: 10,
        num_cameras: 4,
        image_size: TOY_SIZE,
        seed: 7,
    }
}

pub struct Toy {
    pub dir: TempDir,
    pub train: TrainData,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// Renders the toy set into a fresh temporary directory and loads all splits.
pub fn load_toy(config: &ToyDatasetConfig) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_dataset(config, dir.path()).unwrap();
    let kp = KeypointTable::load(&toy.keypoints_path).unwrap();
    let load = |idx| load_samples(idx, &kp, config.image_size, DEFAULT_CONFIDENCE_THRESHOLD).unwrap();
    let train = TrainData::new(load(&toy.train), toy.train.vocab.clone()).unwrap();
    let query = load(&toy.query);
    let gallery = load(&toy.gallery);
    Toy {
        dir,
        train,
        query,
        gallery,
    }
}

/// Desk-scale training recipe for the tiny backbone on the toy set.
pub fn toy_recipe(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        base_lr: 0.005,
        total_epochs: epochs,
        decay_every: (epochs * 2 / 3).max(1),
        random_erasing: RandomErasing {
            probability: 1.0,
            ..RandomErasing::default()
        },
        checkpoint_every: epochs,
        seed,
        ..TrainConfig::default()
    }
}

pub fn random_keypoints(rng: &mut ChaCha8Rng) -> KeypointSet {
    let aspect = rng.random_range(0.3..0.7);
    let joints = (0..NUM_JOINTS)
        .map(|s| {
            let detected = rng.random_bool(0.85);
            JointEncoding {
                position: if detected {
                    [rng.random(), rng.random(), aspect]
                } else {
                    [-1.0, -1.0, aspect]
                },
                semantic_index: s,
                detected,
            }
        })
        .collect();
    KeypointSet::new(joints).unwrap()
}
