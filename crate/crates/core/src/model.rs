//! Backbone, shared shape embedding, and CESD blocks assembled into the full
//! network, with training forward/backward and descriptor extraction.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, StageCache, NUM_STAGES};
use crate::cesd::{CesdBlock, CesdCache, CesdConfig, CesdOutputs};
use crate::error::{ReidError, Result};
use crate::keypoints::KeypointSet;
use crate::nn::{Grads, Initializer, Linear, ParamId, ParamSet};
use crate::seeds::{self, stream};
use crate::shape_embed::{ShapeCache, ShapeEmbedConfig, ShapeEmbedder, ShapeEmbedding};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub use_se: bool,
    pub use_relation_network: bool,
    pub use_attention: bool,
    pub single_cesd: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_se: true,
            use_relation_network: true,
            use_attention: true,
            single_cesd: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// 1-based backbone stages followed by a CESD block.
    pub insertion_stages: Vec<usize>,
    pub d1: usize,
    pub se_hidden: usize,
    pub d2: usize,
    pub attention_reduction: usize,
    pub epsilon: f64,
    pub ablations: Ablations,
    pub num_person_classes: usize,
    pub num_cloth_classes: usize,
    /// `(height, width)` of network inputs.
    pub input_size: (usize, usize),
}

impl ModelConfig {
    /// Full-scale configuration: 50-layer residual backbone at 384x192.
    pub fn deep(num_person_classes: usize, num_cloth_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::Deep,
            insertion_stages: vec![3, 4],
            d1: 128,
            se_hidden: 512,
            d2: 2048,
            attention_reduction: 16,
            epsilon: 1e-5,
            ablations: Ablations::default(),
            num_person_classes,
            num_cloth_classes,
            input_size: (384, 192),
        }
    }

    /// Desk-scale configuration used with the synthetic toy set.
    pub fn tiny(num_person_classes: usize, num_cloth_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            insertion_stages: vec![3, 4],
            d1: 32,
            se_hidden: 128,
            d2: 128,
            attention_reduction: 4,
            epsilon: 1e-5,
            ablations: Ablations::default(),
            num_person_classes,
            num_cloth_classes,
            input_size: (64, 32),
        }
    }

    /// Stages that actually carry a block once ablations are applied.
    pub fn active_stages(&self) -> Vec<usize> {
        if self.ablations.single_cesd {
            self.insertion_stages.last().copied().into_iter().collect()
        } else {
            self.insertion_stages.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ReidError::InvalidConfig(msg));
        if self.insertion_stages.is_empty() {
            return bad("insertion stage list is empty".into());
        }
        if self.insertion_stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "insertion stages {:?} must be strictly increasing",
                self.insertion_stages
            ));
        }
        if let Some(&s) = self.insertion_stages.iter().find(|&&s| s == 0 || s > NUM_STAGES) {
            return bad(format!("insertion stage {s} outside 1..={NUM_STAGES}"));
        }
        if self.d1 == 0 || self.se_hidden == 0 || self.d2 == 0 {
            return bad("embedding widths must be positive".into());
        }
        if self.num_person_classes == 0 || self.num_cloth_classes == 0 {
            return bad("class counts must be positive".into());
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum ShapeSource {
    Embedder(ShapeEmbedder),
    /// Learned stand-in for `f^P` when the shape embedding is ablated.
    Constant(ParamId),
}

#[derive(Clone, Debug)]
struct InsertedBlock {
    /// 1-based stage index.
    stage: usize,
    cesd: CesdBlock,
    identity_head: Linear,
    cloth_head: Linear,
}

#[derive(Clone, Debug)]
struct Architecture {
    config: ModelConfig,
    backbone: Backbone,
    shape: ShapeSource,
    blocks: Vec<InsertedBlock>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    arch: Architecture,
    params: ParamSet<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Copy CESD intermediates into the outputs.
    pub retain_intermediates: bool,
    /// Record the input of every executed backbone stage.
    pub record_stage_inputs: bool,
}

/// Outputs of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleOutput<F> {
    /// One entry per CESD block, in stage order.
    pub identity_logits: Vec<Array1<F>>,
    pub cloth_logits: Vec<Array1<F>>,
    pub cesd: Vec<CesdOutputs<F>>,
    pub stage_inputs: Vec<FeatureMap<F>>,
    /// How many times the shape embedding was evaluated.
    pub shape_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct StageLogits<F> {
    pub stage: usize,
    /// `(batch, num_person_classes)`.
    pub identity: Array2<F>,
    /// `(batch, num_cloth_classes)`.
    pub clothing: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct TrainForwardOutput<F> {
    pub stages: Vec<StageLogits<F>>,
    /// Per sample, per block; filled when intermediates were requested.
    pub cesd: Option<Vec<Vec<CesdOutputs<F>>>>,
    pub shape_evaluations: usize,
}

#[derive(Clone, Debug)]
struct SampleCache<F> {
    shape: Option<ShapeCache<F>>,
    stages: Vec<StageCache<F>>,
    cesd: Vec<CesdCache<F>>,
    pooled_plus: Vec<Array1<F>>,
    pooled_minus: Vec<Array1<F>>,
    block_dims: Vec<(usize, usize)>,
}

/// A forward pass that can be differentiated.
#[derive(Clone, Debug)]
pub struct TrainingPass<F> {
    pub output: SampleOutput<F>,
    cache: SampleCache<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDescriptor<F> {
    /// Per-stage L2-normalized `GAP(f^+)`, concatenated in stage order.
    pub vector: Array1<F>,
    pub segment_lengths: Vec<usize>,
}

impl<F: Real> IdentityDescriptor<F> {
    pub fn segments(&self) -> Vec<ndarray::ArrayView1<'_, F>> {
        let mut start = 0;
        self.segment_lengths
            .iter()
            .map(|&len| {
                let s = self.vector.slice(ndarray::s![start..start + len]);
                start += len;
                s
            })
            .collect()
    }
}

/// Pooled block outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures<F> {
    pub stage: usize,
    pub f_plus: Array1<F>,
    pub f_minus: Array1<F>,
}

pub fn build_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    Model::new(config, seed)
}

fn l2_normalized<F: Real>(v: &Array1<F>) -> Array1<F> {
    let norm = v.dot(v).sqrt();
    let floor = F::lit(1e-12);
    v / if norm > floor { norm } else { floor }
}

fn broadcast_pooled_grad<F: Real>(d_pooled: &Array1<F>, h: usize, w: usize) -> FeatureMap<F> {
    let scale = F::one() / F::lit((h * w) as f64);
    let row = d_pooled * scale;
    let m = row.broadcast((h * w, row.len())).expect("broadcast").to_owned();
    FeatureMap::from_matrix(h, w, m)
}

impl<F: Real> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seeds::derive(seed, &[stream::MODEL_INIT, 0]));
        let backbone = Backbone::new(&config.backbone, &mut params, &mut init)?;

        let mut init = Initializer::new(seeds::derive(seed, &[stream::MODEL_INIT, 1]));
        let shape = if config.ablations.use_se {
            let se = ShapeEmbedConfig {
                d1: config.d1,
                hidden: config.se_hidden,
                d2: config.d2,
                use_relation_network: config.ablations.use_relation_network,
            };
            ShapeSource::Embedder(ShapeEmbedder::new(se, &mut params, &mut init, "shape"))
        } else {
            ShapeSource::Constant(params.register("shape.constant", init.normal(&[config.d2], 1.0)))
        };

        let channels = config.backbone.stage_channels();
        let mut blocks = Vec::new();
        for stage in config.active_stages() {
            // Seeded by stage so a block initializes identically across ablations.
            let mut init = Initializer::new(seeds::derive(seed, &[stream::MODEL_INIT, 2, stage as u64]));
            let c = channels[stage - 1];
            let cesd = CesdBlock::new(
                CesdConfig {
                    channels: c,
                    shape_dim: config.d2,
                    reduction: config.attention_reduction,
                    epsilon: config.epsilon,
                    use_attention: config.ablations.use_attention,
                },
                &mut params,
                &mut init,
                &format!("cesd{stage}"),
            )?;
            let identity_head = Linear::new(
                &mut params,
                &mut init,
                &format!("head{stage}.identity"),
                c,
                config.num_person_classes,
                0.01,
                true,
            );
            let cloth_head = Linear::new(
                &mut params,
                &mut init,
                &format!("head{stage}.cloth"),
                c,
                config.num_cloth_classes,
                0.01,
                true,
            );
            blocks.push(InsertedBlock {
                stage,
                cesd,
                identity_head,
                cloth_head,
            });
        }
        Ok(Self {
            arch: Architecture {
                config: config.clone(),
                backbone,
                shape,
                blocks,
            },
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.arch.blocks.len()
    }

    /// 1-based stages carrying a CESD block.
    pub fn block_stages(&self) -> Vec<usize> {
        self.arch.blocks.iter().map(|b| b.stage).collect()
    }

    pub fn block(&self, index: usize) -> &CesdBlock {
        &self.arch.blocks[index].cesd
    }

    pub fn shape_embedder(&self) -> Option<&ShapeEmbedder> {
        match &self.arch.shape {
            ShapeSource::Embedder(e) => Some(e),
            ShapeSource::Constant(_) => None,
        }
    }

    /// Descriptor length: the sum of the block stages' channel counts.
    pub fn descriptor_len(&self) -> usize {
        let ch = self.arch.config.backbone.stage_channels();
        self.arch.blocks.iter().map(|b| ch[b.stage - 1]).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn check_image(&self, image: &FeatureMap<F>) -> Result<()> {
        let (h, w) = self.arch.config.input_size;
        if image.dims() != (h, w, 3) {
            return Err(ReidError::ShapeMismatch(format!(
                "expected a {h}x{w}x3 image, got {:?}",
                image.dims()
            )));
        }
        Ok(())
    }

    fn shape_vector(&self, kps: &KeypointSet) -> Result<(ShapeEmbedding<F>, Option<ShapeCache<F>>, usize)> {
        match &self.arch.shape {
            ShapeSource::Embedder(e) => {
                let (s, cache) = e.forward(kps, &self.params)?;
                Ok((s, Some(cache), 1))
            }
            ShapeSource::Constant(id) => Ok((
                ShapeEmbedding {
                    vector: self.params.vector(*id).to_owned(),
                },
                None,
                0,
            )),
        }
    }

    fn run(
        &self,
        image: &FeatureMap<F>,
        kps: &KeypointSet,
        opts: ForwardOptions,
        heads: bool,
    ) -> Result<(SampleOutput<F>, SampleCache<F>)> {
        self.check_image(image)?;
        let (shape, shape_cache, shape_evaluations) = self.shape_vector(kps)?;
        let last = self.arch.blocks.last().map(|b| b.stage).unwrap_or(0);
        let mut out = SampleOutput {
            identity_logits: Vec::new(),
            cloth_logits: Vec::new(),
            cesd: Vec::new(),
            stage_inputs: Vec::new(),
            shape_evaluations,
        };
        let mut cache = SampleCache {
            shape: shape_cache,
            stages: Vec::with_capacity(last),
            cesd: Vec::new(),
            pooled_plus: Vec::new(),
            pooled_minus: Vec::new(),
            block_dims: Vec::new(),
        };
        let mut blocks = self.arch.blocks.iter().peekable();
        let mut x = image.clone();
        for s in 0..last {
            if opts.record_stage_inputs {
                out.stage_inputs.push(x.clone());
            }
            let (y, stage_cache) = self.arch.backbone.forward_stage(s, &self.params, &x);
            cache.stages.push(stage_cache);
            x = y;
            if let Some(block) = blocks.next_if(|b| b.stage == s + 1) {
                let (outputs, cesd_cache) =
                    block.cesd.forward(&self.params, &x, &shape, opts.retain_intermediates)?;
                let pooled_plus = outputs.f_plus.gap();
                let pooled_minus = outputs.f_minus.gap();
                if heads {
                    out.identity_logits
                        .push(block.identity_head.forward_vec(&self.params, pooled_plus.view()));
                    out.cloth_logits
                        .push(block.cloth_head.forward_vec(&self.params, pooled_minus.view()));
                }
                cache.block_dims.push((x.h(), x.w()));
                cache.pooled_plus.push(pooled_plus);
                cache.pooled_minus.push(pooled_minus);
                cache.cesd.push(cesd_cache);
                x = outputs.f_plus.clone();
                out.cesd.push(outputs);
            }
        }
        Ok((out, cache))
    }

    pub fn forward_sample(
        &self,
        image: &FeatureMap<F>,
        kps: &KeypointSet,
        opts: ForwardOptions,
    ) -> Result<SampleOutput<F>> {
        Ok(self.run(image, kps, opts, true)?.0)
    }

    pub fn forward_training(&self, image: &FeatureMap<F>, kps: &KeypointSet) -> Result<TrainingPass<F>> {
        let (output, cache) = self.run(image, kps, ForwardOptions::default(), true)?;
        Ok(TrainingPass { output, cache })
    }

    /// Batched forward. Samples are independent, so they are evaluated in
    /// parallel and assembled in input order.
    pub fn forward_train(
        &self,
        images: &[FeatureMap<F>],
        keypoints: &[KeypointSet],
        opts: ForwardOptions,
    ) -> Result<TrainForwardOutput<F>> {
        if images.len() != keypoints.len() {
            return Err(ReidError::ShapeMismatch(format!(
                "{} images but {} keypoint sets",
                images.len(),
                keypoints.len()
            )));
        }
        let samples: Vec<SampleOutput<F>> = images
            .par_iter()
            .zip(keypoints.par_iter())
            .map(|(img, kps)| self.forward_sample(img, kps, opts))
            .collect::<Result<_>>()?;
        let n = samples.len();
        let cfg = &self.arch.config;
        let stages = self
            .arch
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, block)| {
                let mut identity = Array2::zeros((n, cfg.num_person_classes));
                let mut clothing = Array2::zeros((n, cfg.num_cloth_classes));
                for (row, s) in samples.iter().enumerate() {
                    identity.row_mut(row).assign(&s.identity_logits[bi]);
                    clothing.row_mut(row).assign(&s.cloth_logits[bi]);
                }
                StageLogits {
                    stage: block.stage,
                    identity,
                    clothing,
                }
            })
            .collect();
        let shape_evaluations = samples.iter().map(|s| s.shape_evaluations).sum();
        let cesd = opts
            .retain_intermediates
            .then(|| samples.into_iter().map(|s| s.cesd).collect());
        Ok(TrainForwardOutput {
            stages,
            cesd,
            shape_evaluations,
        })
    }

    /// Gradients of a scalar objective given its gradients with respect to
    /// each block's identity and clothing logits.
    pub fn backward(
        &self,
        pass: &TrainingPass<F>,
        d_identity: &[Array1<F>],
        d_cloth: &[Array1<F>],
    ) -> Result<Grads<F>> {
        let nb = self.arch.blocks.len();
        if d_identity.len() != nb || d_cloth.len() != nb {
            return Err(ReidError::WrongArity {
                expected: nb,
                got: d_identity.len().min(d_cloth.len()),
            });
        }
        let params = &self.params;
        let cache = &pass.cache;
        let mut grads = params.zeros_like();
        let mut d_shape = Array1::<F>::zeros(self.arch.config.d2);
        let mut d_x: Option<FeatureMap<F>> = None;
        let mut bi = nb;
        for s in (0..cache.stages.len()).rev() {
            if bi > 0 && self.arch.blocks[bi - 1].stage == s + 1 {
                bi -= 1;
                let block = &self.arch.blocks[bi];
                let (h, w) = cache.block_dims[bi];
                let dp = block.identity_head.backward_vec(
                    params,
                    cache.pooled_plus[bi].view(),
                    d_identity[bi].view(),
                    &mut grads,
                );
                let dm = block.cloth_head.backward_vec(
                    params,
                    cache.pooled_minus[bi].view(),
                    d_cloth[bi].view(),
                    &mut grads,
                );
                let mut d_plus = broadcast_pooled_grad(&dp, h, w);
                if let Some(d) = &d_x {
                    *d_plus.data_mut() += d.data();
                }
                let d_minus = broadcast_pooled_grad(&dm, h, w);
                let (d_input, d_fp) =
                    block.cesd.backward(params, &cache.cesd[bi], &d_plus, &d_minus, &mut grads);
                d_shape += &d_fp;
                d_x = Some(d_input);
            }
            let dy = d_x.take().expect("gradient reaches every executed stage");
            d_x = self
                .arch
                .backbone
                .backward_stage(s, params, &cache.stages[s], &dy, &mut grads, s > 0);
        }
        match (&self.arch.shape, &cache.shape) {
            (ShapeSource::Embedder(e), Some(sc)) => e.backward(params, sc, &d_shape, &mut grads),
            (ShapeSource::Constant(id), _) => grads.vector_mut(*id).scaled_add(F::one(), &d_shape),
            _ => unreachable!("shape cache matches shape source"),
        }
        Ok(grads)
    }

    /// Per-block pooled `f^+` and `f^-`; classifier heads are not evaluated.
    pub fn pooled_features(&self, image: &FeatureMap<F>, kps: &KeypointSet) -> Result<Vec<PooledFeatures<F>>> {
        let (_, cache) = self.run(image, kps, ForwardOptions::default(), false)?;
        Ok(self
            .arch
            .blocks
            .iter()
            .zip(cache.pooled_plus.into_iter().zip(cache.pooled_minus))
            .map(|(b, (f_plus, f_minus))| PooledFeatures {
                stage: b.stage,
                f_plus,
                f_minus,
            })
            .collect())
    }

    pub fn extract_feature(&self, image: &FeatureMap<F>, kps: &KeypointSet) -> Result<IdentityDescriptor<F>> {
        let pooled = self.pooled_features(image, kps)?;
        let segment_lengths = pooled.iter().map(|p| p.f_plus.len()).collect();
        let parts: Vec<Array1<F>> = pooled.iter().map(|p| l2_normalized(&p.f_plus)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let vector = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| ReidError::ShapeMismatch(e.to_string()))?;
        Ok(IdentityDescriptor {
            vector,
            segment_lengths,
        })
    }
}
