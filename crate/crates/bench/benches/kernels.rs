use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::cesd::{CesdBlock, CesdConfig};
use reid_core::eval::RetrievalMeta;
use reid_core::keypoints::{JointEncoding, NUM_JOINTS};
use reid_core::nn::{Initializer, ParamSet};
use reid_core::shape_embed::{ShapeEmbedConfig, ShapeEmbedder, ShapeEmbedding};
use reid_core::{build_model, compute_cmc_map, FeatureMap, KeypointSet, ModelConfig, Protocol};

fn keypoints(rng: &mut ChaCha8Rng) -> KeypointSet {
    KeypointSet::new(
        (0..NUM_JOINTS)
            .map(|s| JointEncoding {
                position: [rng.random(), rng.random(), 0.5],
                semantic_index: s,
                detected: true,
            })
            .collect(),
    )
    .unwrap()
}

fn metas(rng: &mut ChaCha8Rng, n: usize) -> Vec<RetrievalMeta> {
    (0..n)
        .map(|_| {
            let person_id = rng.random_range(0..50);
            RetrievalMeta {
                person_id,
                cloth_id: person_id * 10 + rng.random_range(0..4),
                camera_id: rng.random_range(0..6),
            }
        })
        .collect()
}

fn cmc_map(c: &mut Criterion) {
    let mut group = c.benchmark_group("cmc_map");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (nq, ng) in [(50, 200), (200, 1000)] {
        let query = metas(&mut rng, nq);
        let gallery = metas(&mut rng, ng);
        let dist = Array2::from_shape_fn((nq, ng), |_| rng.random::<f64>());
        group.bench_with_input(BenchmarkId::from_parameter(format!("{nq}x{ng}")), &dist, |b, d| {
            b.iter(|| compute_cmc_map(black_box(d.view()), &query, &gallery, Protocol::ClothChanging, 20).unwrap())
        });
    }
    group.finish();
}

fn shape_embedding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kps = keypoints(&mut rng);
    let mut group = c.benchmark_group("shape_embedding");
    for (d1, d2) in [(32, 128), (128, 2048)] {
        let mut params = ParamSet::<f32>::new();
        let se = ShapeEmbedder::new(ShapeEmbedConfig::new(d1, d2), &mut params, &mut Initializer::new(0), "se");
        group.bench_function(BenchmarkId::from_parameter(format!("d1={d1},d2={d2}")), |b| {
            b.iter(|| se.forward(black_box(&kps), &params).unwrap())
        });
    }
    group.finish();
}

fn cesd_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("cesd_forward");
    for (hw, channels) in [((8, 4), 64), ((4, 2), 128), ((24, 12), 1024)] {
        let config = CesdConfig {
            channels,
            shape_dim: 128,
            reduction: 4,
            epsilon: 1e-5,
            use_attention: true,
        };
        let mut params = ParamSet::<f32>::new();
        let mut init = Initializer::new(3);
        let block = CesdBlock::new(config, &mut params, &mut init, "cesd").unwrap();
        let input = FeatureMap::new(Array3::from_elem((hw.0, hw.1, channels), 0.5f32)).unwrap();
        let shape = ShapeEmbedding {
            vector: Array1::from_elem(128, 0.1f32),
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{}x{}x{channels}", hw.0, hw.1)), |b| {
            b.iter(|| block.forward(&params, black_box(&input), &shape, false).unwrap())
        });
    }
    group.finish();
}

fn tiny_model(c: &mut Criterion) {
    let model = build_model::<f32>(&ModelConfig::tiny(16, 64), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kps = keypoints(&mut rng);
    let image = FeatureMap::new(Array3::from_shape_fn((64, 32, 3), |_| rng.random::<f32>())).unwrap();
    c.bench_function("tiny_model_extract_feature", |b| {
        b.iter(|| model.extract_feature(black_box(&image), &kps).unwrap())
    });
}

criterion_group!(benches, cmc_map, shape_embedding, cesd_block, tiny_model);
criterion_main!(benches);
