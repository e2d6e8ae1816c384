//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion and then asserts it. The tests share a lock so that the
//! measured runtimes are not inflated by each other.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::cesd::{instance_normalize, CesdBlock, CesdConfig};
use reid_core::checkpoint::checkpoint_file_name;
use reid_core::eval::{evaluate, export_embeddings, DatasetFingerprint, EvalReport, RetrievalMeta};
use reid_core::keypoints::NUM_JOINTS;
use reid_core::model::{ForwardOptions, StageLogits, TrainForwardOutput};
use reid_core::nn::{Initializer, ParamSet};
use reid_core::shape_embed::{ShapeEmbedConfig, ShapeEmbedder, ShapeEmbedding};
use reid_core::train::{cross_entropy, train};
use reid_core::*;

use common::{load_toy, random_keypoints, toy_config, toy_recipe};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to the process stdout so the line survives output capture.
fn report(criterion: usize, pass: bool, elapsed: Duration, limit: Duration, detail: &str) -> bool {
    let in_time = elapsed <= limit;
    let ok = pass && in_time;
    let line = format!(
        "[criterion {criterion}] {} {detail} (runtime {:.2}s, limit {:.0}s{})\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64(),
        if in_time { "" } else { ", exceeded" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    ok
}

fn random_map<F: Real>(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<F> {
    let scale: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..5.0)).collect();
    let offset: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let data = Array3::from_shape_fn((h, w, c), |(_, _, k)| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        F::lit(offset[k] + scale[k] * z)
    });
    FeatureMap::new(data).unwrap()
}

/// Largest `|a - b|` relative to the largest magnitude among the operands.
fn relative_gap(a: &Array2<f32>, b: &Array2<f32>, operands: &[&Array2<f32>]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let scale = operands
        .iter()
        .flat_map(|m| m.iter())
        .map(|v| v.abs() as f64)
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn cesd_decomposition_identities() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_residual, mut worst_split) = (0.0f64, 0.0f64);
    let mut alpha_in_range = true;
    for i in 0..1000u64 {
        let reduction = [1, 2, 4][rng.random_range(0..3)];
        let channels = reduction * rng.random_range(1..=4);
        let shape_dim = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let config = CesdConfig {
            channels,
            shape_dim,
            reduction,
            epsilon: 1e-5,
            use_attention: rng.random_bool(0.8),
        };
        let mut params = ParamSet::<f32>::new();
        let mut init = Initializer::new(i);
        let block = CesdBlock::new(config, &mut params, &mut init, "b").unwrap();
        // Perturb the initialization so zero-initialized biases take part.
        for id in params.ids().collect::<Vec<_>>() {
            let noise: ndarray::ArrayD<f32> = init.normal(params.get(id).shape(), 0.1);
            *params.get_mut(id) += &noise;
        }
        let input = random_map::<f32>(&mut rng, h, w, channels);
        let shape = ShapeEmbedding {
            vector: Array1::from_shape_fn(shape_dim, |_| rng.random_range(0.0f32..2.0)),
        };
        let (out, _) = block.forward(&params, &input, &shape, true).unwrap();
        let inner = out.intermediates.unwrap();
        let f_in = input.matrix().to_owned();
        let tilde = inner.f_tilde.matrix().to_owned();
        let res = inner.f_residual.matrix().to_owned();
        let plus = inner.f_cloth_relevant.matrix().to_owned();
        let minus = inner.f_cloth_irrelevant.matrix().to_owned();
        worst_residual = worst_residual.max(relative_gap(&(&tilde + &res), &f_in, &[&tilde, &res, &f_in]));
        worst_split = worst_split.max(relative_gap(&(&plus + &minus), &res, &[&plus, &minus, &res]));
        alpha_in_range &= out.alpha.iter().all(|&a| a > 0.0 && a < 1.0);
    }
    let pass = worst_residual < 1e-6 && worst_split < 1e-6 && alpha_in_range;
    let detail = format!(
        "CESD identities on 1000 f32 instances: max rel err residual {worst_residual:.2e}, split {worst_split:.2e} (< 1e-6), alpha in (0,1): {alpha_in_range}"
    );
    assert!(report(1, pass, t0.elapsed(), Duration::from_secs(10), &detail));
}

#[test]
fn instance_norm_contract() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_mean, mut worst_var, mut worst_affine) = (0.0f64, 0.0f64, 0.0f64);
    let mut maps = 0;
    while maps < 1000 {
        let (h, w, c) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=8));
        let x = random_map::<f64>(&mut rng, h, w, c);
        // The epsilon term bounds how well the variance and the affine
        // invariance can hold; maps must be well above it in spread.
        let spread_ok = x
            .matrix()
            .var_axis(ndarray::Axis(0), 0.0)
            .iter()
            .all(|&v| v >= 2.25);
        if !spread_ok {
            continue;
        }
        maps += 1;

        let x32 = x.cast::<f32>();
        let (y, _) = instance_normalize(&x32, 1e-5f32);
        let m = y.matrix().mapv(|v| v as f64);
        let mean = m.mean_axis(ndarray::Axis(0)).unwrap();
        let var = m.var_axis(ndarray::Axis(0), 0.0);
        worst_mean = mean.iter().fold(worst_mean, |a, v| a.max(v.abs()));
        worst_var = var.iter().fold(worst_var, |a, v| a.max((v - 1.0).abs()));

        let a: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..4.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut shifted = x.clone();
        for ((_, _, k), v) in shifted.data_mut().indexed_iter_mut() {
            *v = a[k] * *v + b[k];
        }
        let (y1, _) = instance_normalize(&x, 1e-5);
        let (y2, _) = instance_normalize(&shifted, 1e-5);
        let gap = y1
            .data()
            .iter()
            .zip(y2.data())
            .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        worst_affine = worst_affine.max(gap);
    }
    let pass = worst_mean < 1e-5 && worst_var < 1e-3 && worst_affine < 1e-5;
    let detail = format!(
        "instance norm on 1000 maps: max |mean| {worst_mean:.2e} (< 1e-5), max |var-1| {worst_var:.2e} (< 1e-3), affine gap {worst_affine:.2e} (< 1e-5)"
    );
    assert!(report(2, pass, t0.elapsed(), Duration::from_secs(10), &detail));
}

#[test]
fn shape_vector_permutation_invariance() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut identical = true;
    let mut checked = 0usize;
    for use_relation_network in [true, false] {
        let config = ShapeEmbedConfig {
            use_relation_network,
            ..ShapeEmbedConfig::new(32, 64)
        };
        let mut params = ParamSet::<f32>::new();
        let se = ShapeEmbedder::new(config, &mut params, &mut Initializer::new(3), "se");
        for _ in 0..20 {
            let kps = random_keypoints(&mut rng);
            let reference = se.forward(&kps, &params).unwrap().0.vector;
            for _ in 0..100 {
                let mut perm: Vec<usize> = (0..NUM_JOINTS).collect();
                perm.shuffle(&mut rng);
                let v = se.forward(&kps.permuted(&perm), &params).unwrap().0.vector;
                identical &= v.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
                checked += 1;
            }
        }
    }
    let detail = format!("f^P bit-identical under {checked} joint permutations of 20 sets per pooling variant: {identical}");
    assert!(report(3, identical, t0.elapsed(), Duration::from_secs(10), &detail));
}

fn gradient_check_config(use_relation_network: bool) -> ModelConfig {
    let mut c = ModelConfig::tiny(5, 7);
    c.backbone = BackboneConfig::Tiny {
        channels: [4, 8, 16, 16],
    };
    c.input_size = (16, 8);
    c.d1 = 8;
    c.se_hidden = 16;
    c.d2 = 16;
    c.attention_reduction = 4;
    c.ablations.use_relation_network = use_relation_network;
    c
}

/// Weighted cross-entropy of one sample, the quantity training minimizes.
fn sample_loss(output: &model::SampleOutput<f64>, weights: &LossWeights, person: usize, cloth: usize) -> f64 {
    (0..output.identity_logits.len())
        .map(|b| {
            weights.mu[b] * cross_entropy(output.identity_logits[b].view(), person).unwrap().0
                + weights.lambda[b] * cross_entropy(output.cloth_logits[b].view(), cloth).unwrap().0
        })
        .sum()
}

#[test]
fn shape_and_cesd_gradients_match_finite_differences() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut coords = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for use_rn in [true, false] {
        let config = gradient_check_config(use_rn);
        let model = build_model::<f64>(&config, 17).unwrap();
        let image = random_map::<f64>(&mut rng, 16, 8, 3);
        let kps = random_keypoints(&mut rng);
        let weights = LossWeights::default();
        let (person, cloth) = (2, 4);
        let loss = |m: &Model<f64>| {
            let o = m.forward_sample(&image, &kps, ForwardOptions::default()).unwrap();
            sample_loss(&o, &weights, person, cloth)
        };
        let pass = model.forward_training(&image, &kps).unwrap();
        let out = &pass.output;
        let d_id: Vec<Array1<f64>> = (0..out.identity_logits.len())
            .map(|b| cross_entropy(out.identity_logits[b].view(), person).unwrap().1 * weights.mu[b])
            .collect();
        let d_cl: Vec<Array1<f64>> = (0..out.cloth_logits.len())
            .map(|b| cross_entropy(out.cloth_logits[b].view(), cloth).unwrap().1 * weights.lambda[b])
            .collect();
        let grads = model.backward(&pass, &d_id, &d_cl).unwrap();
        let h = 1e-6;
        for pid in model.params().ids() {
            let name = model.params().name(pid).to_string();
            if !(name.starts_with("shape.") || name.starts_with("cesd")) {
                continue;
            }
            for i in 0..model.params().get(pid).len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.params_mut().get_mut(pid).as_slice_mut().unwrap()[i] += h;
                minus.params_mut().get_mut(pid).as_slice_mut().unwrap()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.get(pid).as_slice().unwrap()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                if err > worst {
                    worst = err;
                    worst_name = format!("{name}[{i}]");
                }
                coords += 1;
            }
        }
    }
    let pass = worst < 1e-3;
    let detail = format!(
        "f64 tiny-model finite differences over {coords} SE/CESD coordinates: max rel err {worst:.2e} at {worst_name} (< 1e-3)"
    );
    assert!(report(4, pass, t0.elapsed(), Duration::from_secs(120), &detail));
}

/// Exhaustive retrieval oracle: each valid gallery entry's rank is one plus
/// the number of valid entries that precede it under (distance, index).
fn oracle_cmc_map(
    dist: &Array2<f64>,
    query: &[RetrievalMeta],
    gallery: &[RetrievalMeta],
    protocol: Protocol,
    max_rank: usize,
) -> Option<(Vec<f64>, f64)> {
    let valid = |q: &RetrievalMeta, g: &RetrievalMeta| {
        let same_id = q.person_id == g.person_id;
        match protocol {
            Protocol::Standard => !(same_id && q.camera_id == g.camera_id),
            Protocol::ClothChanging => !(same_id && (q.camera_id == g.camera_id || q.cloth_id == g.cloth_id)),
        }
    };
    let mut first_ranks = Vec::new();
    let mut ap_sum = 0.0;
    for (qi, q) in query.iter().enumerate() {
        let kept: Vec<usize> = (0..gallery.len()).filter(|&g| valid(q, &gallery[g])).collect();
        let rank_of = |g: usize| {
            1 + kept
                .iter()
                .filter(|&&o| dist[[qi, o]] < dist[[qi, g]] || (dist[[qi, o]] == dist[[qi, g]] && o < g))
                .count()
        };
        let mut match_ranks: Vec<usize> = kept
            .iter()
            .filter(|&&g| gallery[g].person_id == q.person_id)
            .map(|&g| rank_of(g))
            .collect();
        if match_ranks.is_empty() {
            continue;
        }
        match_ranks.sort_unstable();
        let mut ap = 0.0;
        for (k, &r) in match_ranks.iter().enumerate() {
            ap += (k + 1) as f64 / r as f64;
        }
        ap_sum += ap / match_ranks.len() as f64;
        first_ranks.push(match_ranks[0]);
    }
    if first_ranks.is_empty() {
        return None;
    }
    let n = first_ranks.len() as f64;
    let cmc = (1..=max_rank)
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    Some((cmc, ap_sum / n))
}

fn random_metas(rng: &mut ChaCha8Rng, n: usize, ids: u32) -> Vec<RetrievalMeta> {
    (0..n)
        .map(|_| {
            let person_id = rng.random_range(0..ids);
            RetrievalMeta {
                person_id,
                cloth_id: person_id * 10 + rng.random_range(0..3),
                camera_id: rng.random_range(0..4),
            }
        })
        .collect()
}

#[test]
fn ranking_metrics_match_exhaustive_oracle() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for instance in 0..100 {
        let nq = rng.random_range(1..=50);
        let ng = rng.random_range(1..=200);
        let ids = rng.random_range(2..=12);
        let query = random_metas(&mut rng, nq, ids);
        let gallery = random_metas(&mut rng, ng, ids);
        // Coarse quantization on some instances produces distance ties.
        let levels = if instance % 3 == 0 { 5.0 } else { 1e9 };
        let dist = Array2::from_shape_fn((nq, ng), |_| (rng.random::<f64>() * levels).floor() / levels);
        let max_rank = rng.random_range(1..=25);
        for protocol in Protocol::ALL {
            compared += 1;
            let got = compute_cmc_map(dist.view(), &query, &gallery, protocol, max_rank);
            let want = oracle_cmc_map(&dist, &query, &gallery, protocol, max_rank);
            let same = match (got, want) {
                (Ok(r), Some((cmc, map))) => r.cmc == cmc && r.map == map,
                (Err(ReidError::NoValidQueries), None) => true,
                _ => false,
            };
            mismatches += usize::from(!same);
        }
    }
    let detail = format!("cmc/mAP vs exhaustive oracle: {mismatches} mismatches over {compared} instance-protocol pairs (exact equality)");
    assert!(report(5, mismatches == 0, t0.elapsed(), Duration::from_secs(30), &detail));
}

fn record(person_id: u32, camera_id: u32, cloth_id: u32) -> AnnotationRecord {
    AnnotationRecord {
        image_path: format!("{person_id}_{cloth_id}_{camera_id}.png").into(),
        person_id,
        cloth_id,
        camera_id,
        frame: 0,
        width: 32,
        height: 64,
    }
}

#[test]
fn protocol_truth_table() {
    let _guard = serial();
    let t0 = Instant::now();
    // (same id, same camera, same cloth) -> (standard valid, cloth-changing valid)
    let table = [
        ((true, true, true), (false, false)),
        ((true, true, false), (false, false)),
        ((true, false, true), (true, false)),
        ((true, false, false), (true, true)),
        ((false, true, true), (true, true)),
        ((false, true, false), (true, true)),
        ((false, false, true), (true, true)),
        ((false, false, false), (true, true)),
    ];
    let query = record(1, 1, 10);
    let gallery: Vec<AnnotationRecord> = table
        .iter()
        .map(|&((id, cam, cloth), _)| record(if id { 1 } else { 2 }, if cam { 1 } else { 2 }, if cloth { 10 } else { 11 }))
        .collect();
    let standard = filter_gallery(&query, &gallery, Protocol::Standard);
    let changing = filter_gallery(&query, &gallery, Protocol::ClothChanging);
    let rows_ok = table
        .iter()
        .enumerate()
        .all(|(i, &(_, (s, c)))| standard[i] == s && changing[i] == c);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut nested = standard.iter().zip(&changing).all(|(&s, &c)| !c || s);
    for _ in 0..200 {
        let q = record(rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..3));
        let g: Vec<AnnotationRecord> = (0..20)
            .map(|_| record(rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..3)))
            .collect();
        let s = filter_gallery(&q, &g, Protocol::Standard);
        let c = filter_gallery(&q, &g, Protocol::ClothChanging);
        nested &= s.iter().zip(&c).all(|(&s, &c)| !c || s);
    }
    let detail = format!("8-case protocol truth table matches: {rows_ok}; cloth-changing valid subset of standard valid: {nested}");
    assert!(report(6, rows_ok && nested, t0.elapsed(), Duration::from_secs(1), &detail));
}

#[test]
fn loss_and_schedule_values() {
    let _guard = serial();
    let t0 = Instant::now();
    // Two-class logits [0, x] with label 0 have cross-entropy ln(1 + e^x),
    // so x = ln(e^ce - 1) yields a chosen cross-entropy.
    let logits_for = |ce: f64| Array2::from_shape_vec((1, 2), vec![0.0, (ce.exp() - 1.0).ln()]).unwrap();
    let output = TrainForwardOutput {
        stages: vec![
            StageLogits {
                stage: 3,
                identity: logits_for(0.5),
                clothing: logits_for(1.0),
            },
            StageLogits {
                stage: 4,
                identity: logits_for(1.5),
                clothing: logits_for(2.0),
            },
        ],
        cesd: None,
        shape_evaluations: 1,
    };
    let loss = total_loss(&output, &[0], &[0], &LossWeights::default()).unwrap();
    let loss_ok = (loss.total - 3.25).abs() < 1e-9;
    let config = TrainConfig::default();
    let lrs: Vec<f64> = [0, 40, 119].iter().map(|&e| lr_at(e, &config).unwrap()).collect();
    let lr_ok = lrs
        .iter()
        .zip([0.01, 0.001, 0.0001])
        .all(|(got, want): (&f64, f64)| (got - want).abs() <= 1e-12 * want);
    let detail = format!(
        "total loss {:.12} (want 3.25); lr at epochs 0/40/119 = {:?} (want 0.01/0.001/0.0001)",
        loss.total, lrs
    );
    assert!(report(7, loss_ok && lr_ok, t0.elapsed(), Duration::from_secs(1), &detail));
}

const VARIANTS: [&str; 5] = ["full", "no-se", "no-rn", "no-attn", "single-cesd"];

fn variant_ablations(name: &str) -> Ablations {
    let mut a = Ablations::default();
    match name {
        "no-se" => a.use_se = false,
        "no-rn" => a.use_relation_network = false,
        "no-attn" => a.use_attention = false,
        "single-cesd" => a.single_cesd = true,
        _ => {}
    }
    a
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn toy_scale_behavioral_reproduction() {
    let _guard = serial();
    let t0 = Instant::now();
    let toy = load_toy(&toy_config());
    let vocab = &toy.train.vocabularies;
    let seeds = [0u64, 1, 2];
    let mut cc = vec![Vec::new(); VARIANTS.len()];
    let mut standard = vec![Vec::new(); VARIANTS.len()];
    for (vi, variant) in VARIANTS.iter().enumerate() {
        for &seed in &seeds {
            let mut config = ModelConfig::tiny(vocab.person.len(), vocab.cloth.len());
            config.ablations = variant_ablations(variant);
            let mut model = build_model::<f32>(&config, seed).unwrap();
            let out = tempfile::tempdir().unwrap();
            train(
                &mut model,
                &toy.train,
                &toy_recipe(seed, 30),
                &LossWeights::default(),
                out.path(),
                None,
            )
            .unwrap();
            let c = evaluate(&model, &toy.query, &toy.gallery, Protocol::ClothChanging, 20).unwrap();
            let s = evaluate(&model, &toy.query, &toy.gallery, Protocol::Standard, 20).unwrap();
            cc[vi].push(c.rank(1));
            standard[vi].push(s.rank(1));
        }
    }
    let full_cc_ok = cc[0].iter().all(|&r| r >= 0.90) && mean(&cc[0]) >= 0.90;
    let ordering_ok = (1..VARIANTS.len()).all(|v| mean(&cc[0]) >= mean(&cc[v]));
    let gap_ok = mean(&standard[0]) >= mean(&cc[0]);
    let per_variant: Vec<String> = VARIANTS
        .iter()
        .enumerate()
        .map(|(v, name)| format!("{name} cc {:.3} {:?}", mean(&cc[v]), cc[v]))
        .collect();
    let detail = format!(
        "toy reproduction: full cc R1 >= 0.90 per seed and mean: {full_cc_ok}; full >= every ablation: {ordering_ok}; standard {:.3} >= cc {:.3}: {gap_ok}; {}",
        mean(&standard[0]),
        mean(&cc[0]),
        per_variant.join(", ")
    );
    let pass = full_cc_ok && ordering_ok && gap_ok;
    assert!(report(8, pass, t0.elapsed(), Duration::from_secs(20 * 60), &detail));
}

/// Files produced by one single-threaded train/eval/export run.
fn pipeline_artifacts(toy: &common::Toy, out: &Path) -> Vec<(String, Vec<u8>)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let vocab = &toy.train.vocabularies;
        let config = ModelConfig::tiny(vocab.person.len(), vocab.cloth.len());
        let mut model = build_model::<f32>(&config, 5).unwrap();
        let train_config = TrainConfig {
            checkpoint_every: 1,
            ..toy_recipe(5, 3)
        };
        train(&mut model, &toy.train, &train_config, &LossWeights::default(), out, None).unwrap();
        let mut files: Vec<String> = (1..=3).map(checkpoint_file_name).collect();
        for protocol in Protocol::ALL {
            let result = evaluate(&model, &toy.query, &toy.gallery, protocol, 20).unwrap();
            let report = EvalReport::new(
                protocol,
                &result,
                toy.query.len(),
                toy.gallery.len(),
                checkpoint_file_name(3),
                "toy".into(),
                DatasetFingerprint {
                    query: "query".into(),
                    gallery: "gallery".into(),
                },
            );
            let name = format!("report_{protocol}.json");
            fs::write(out.join(&name), serde_json::to_vec_pretty(&report).unwrap()).unwrap();
            files.push(name);
        }
        export_embeddings(
            &model,
            &[(Split::Query, &toy.query), (Split::Gallery, &toy.gallery)],
            &out.join("embeddings.jsonl"),
        )
        .unwrap();
        files.push("embeddings.jsonl".into());
        files
            .into_iter()
            .map(|f| {
                let bytes = fs::read(out.join(&f)).unwrap();
                (f, bytes)
            })
            .collect()
    })
}

#[test]
fn single_threaded_runs_are_bit_identical() {
    let _guard = serial();
    let t0 = Instant::now();
    let toy = load_toy(&toy_config());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_artifacts(&toy, a.path());
    let second = pipeline_artifacts(&toy, b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty();
    let detail = format!(
        "two seeded single-threaded runs: {} artifacts (checkpoints, reports, export), differing: {:?}",
        first.len(),
        differing
    );
    assert!(report(9, pass, t0.elapsed(), Duration::from_secs(5 * 60), &detail));
}
