//! Four-stage convolutional backbones.
//!
//! Stage indices are 1-based: stage 3 and stage 4 correspond to the
//! 1024- and 2048-channel stages of the 50-layer residual network.

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::nn::{
    relu_backward_inplace, relu_inplace, ChannelAffine, Conv2d, ConvCache, Grads, Initializer,
    MaxPool2d, MaxPoolCache, ParamSet,
};
use crate::tensor::{FeatureMap, Real};

pub const NUM_STAGES: usize = 4;
const DEEP_BLOCKS: [usize; NUM_STAGES] = [3, 4, 6, 3];
const DEEP_WIDTHS: [usize; NUM_STAGES] = [64, 128, 256, 512];
const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// One stride-2 3x3 convolution with ReLU per stage.
    Tiny { channels: [usize; NUM_STAGES] },
    /// 50-layer bottleneck residual network; batch normalization is folded
    /// into per-channel affine layers.
    Deep,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig::Tiny {
            channels: [16, 32, 64, 128],
        }
    }

    pub fn stage_channels(&self) -> [usize; NUM_STAGES] {
        match self {
            BackboneConfig::Tiny { channels } => *channels,
            BackboneConfig::Deep => DEEP_WIDTHS.map(|w| w * BOTTLENECK_EXPANSION),
        }
    }
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    affine: ChannelAffine,
    pool: MaxPool2d,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv2d,
    reduce_affine: ChannelAffine,
    spatial: Conv2d,
    spatial_affine: ChannelAffine,
    expand: Conv2d,
    expand_affine: ChannelAffine,
    shortcut: Option<(Conv2d, ChannelAffine)>,
}

#[derive(Clone, Debug)]
enum Stage {
    Tiny(Conv2d),
    Deep {
        stem: Option<Stem>,
        blocks: Vec<Bottleneck>,
    },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct StemCache<F> {
    conv: ConvCache<F>,
    conv_out: FeatureMap<F>,
    activated: FeatureMap<F>,
    pool: MaxPoolCache,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<F> {
    reduce: ConvCache<F>,
    reduce_out: FeatureMap<F>,
    reduce_act: FeatureMap<F>,
    spatial: ConvCache<F>,
    spatial_out: FeatureMap<F>,
    spatial_act: FeatureMap<F>,
    expand: ConvCache<F>,
    expand_out: FeatureMap<F>,
    shortcut: Option<(ConvCache<F>, FeatureMap<F>)>,
    output: FeatureMap<F>,
}

#[derive(Clone, Debug)]
pub enum StageCache<F> {
    Tiny {
        conv: ConvCache<F>,
        output: FeatureMap<F>,
    },
    Deep {
        stem: Option<StemCache<F>>,
        blocks: Vec<BottleneckCache<F>>,
    },
}

impl Bottleneck {
    fn new<F: Real>(
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
    ) -> Self {
        let out_ch = width * BOTTLENECK_EXPANSION;
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(params, init, &format!("{name}.downsample.conv"), in_ch, out_ch, 1, stride, 0, false),
                ChannelAffine::new(params, &format!("{name}.downsample.bn"), out_ch, 1.0),
            )
        });
        Self {
            reduce: Conv2d::new(params, init, &format!("{name}.conv1"), in_ch, width, 1, 1, 0, false),
            reduce_affine: ChannelAffine::new(params, &format!("{name}.bn1"), width, 1.0),
            spatial: Conv2d::new(params, init, &format!("{name}.conv2"), width, width, 3, stride, 1, false),
            spatial_affine: ChannelAffine::new(params, &format!("{name}.bn2"), width, 1.0),
            expand: Conv2d::new(params, init, &format!("{name}.conv3"), width, out_ch, 1, 1, 0, false),
            // Residual branches start silent so that the untrained stack is
            // an identity-like map.
            expand_affine: ChannelAffine::new(params, &format!("{name}.bn3"), out_ch, 0.0),
            shortcut,
        }
    }

    fn forward<F: Real>(&self, params: &ParamSet<F>, x: &FeatureMap<F>) -> BottleneckCache<F> {
        let (reduce_out, reduce) = self.reduce.forward(params, x);
        let mut reduce_act = self.reduce_affine.forward(params, &reduce_out);
        relu_inplace(reduce_act.data_mut());
        let (spatial_out, spatial) = self.spatial.forward(params, &reduce_act);
        let mut spatial_act = self.spatial_affine.forward(params, &spatial_out);
        relu_inplace(spatial_act.data_mut());
        let (expand_out, expand) = self.expand.forward(params, &spatial_act);
        let main = self.expand_affine.forward(params, &expand_out);
        let (shortcut, skip) = match &self.shortcut {
            Some((conv, affine)) => {
                let (out, cache) = conv.forward(params, x);
                let skip = affine.forward(params, &out);
                (Some((cache, out)), skip)
            }
            None => (None, x.clone()),
        };
        let mut output = main;
        *output.data_mut() += skip.data();
        relu_inplace(output.data_mut());
        BottleneckCache {
            reduce,
            reduce_out,
            reduce_act,
            spatial,
            spatial_out,
            spatial_act,
            expand,
            expand_out,
            shortcut,
            output,
        }
    }

    fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &BottleneckCache<F>,
        dy: &FeatureMap<F>,
        grads: &mut Grads<F>,
    ) -> FeatureMap<F> {
        let mut d = dy.clone();
        relu_backward_inplace(d.data_mut(), cache.output.data());
        let d_expand = self.expand_affine.backward(params, &cache.expand_out, &d, grads);
        let mut d_spatial_act = self.expand.backward(params, &cache.expand, &d_expand, grads);
        relu_backward_inplace(d_spatial_act.data_mut(), cache.spatial_act.data());
        let d_spatial = self
            .spatial_affine
            .backward(params, &cache.spatial_out, &d_spatial_act, grads);
        let mut d_reduce_act = self.spatial.backward(params, &cache.spatial, &d_spatial, grads);
        relu_backward_inplace(d_reduce_act.data_mut(), cache.reduce_act.data());
        let d_reduce = self
            .reduce_affine
            .backward(params, &cache.reduce_out, &d_reduce_act, grads);
        let mut dx = self.reduce.backward(params, &cache.reduce, &d_reduce, grads);
        match (&self.shortcut, &cache.shortcut) {
            (Some((conv, affine)), Some((conv_cache, conv_out))) => {
                let d_out = affine.backward(params, conv_out, &d, grads);
                *dx.data_mut() += conv.backward(params, conv_cache, &d_out, grads).data();
            }
            _ => *dx.data_mut() += d.data(),
        }
        dx
    }
}

impl Backbone {
    pub fn new<F: Real>(
        config: &BackboneConfig,
        params: &mut ParamSet<F>,
        init: &mut Initializer,
    ) -> Result<Self> {
        let stages = match config {
            BackboneConfig::Tiny { channels } => {
                if channels.contains(&0) {
                    return Err(ReidError::InvalidConfig("stage channels must be positive".into()));
                }
                let mut in_ch = 3;
                channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv2d::new(params, init, &format!("backbone.stage{}", i + 1), in_ch, c, 3, 2, 1, true);
                        in_ch = c;
                        Stage::Tiny(conv)
                    })
                    .collect()
            }
            BackboneConfig::Deep => {
                let mut in_ch = 64;
                let mut stages = Vec::with_capacity(NUM_STAGES);
                for s in 0..NUM_STAGES {
                    let stem = (s == 0).then(|| Stem {
                        conv: Conv2d::new(params, init, "backbone.stem.conv", 3, 64, 7, 2, 3, false),
                        affine: ChannelAffine::new(params, "backbone.stem.bn", 64, 1.0),
                        pool: MaxPool2d {
                            kernel: 3,
                            stride: 2,
                            padding: 1,
                        },
                    });
                    let mut blocks = Vec::with_capacity(DEEP_BLOCKS[s]);
                    for b in 0..DEEP_BLOCKS[s] {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        let name = format!("backbone.stage{}.{b}", s + 1);
                        blocks.push(Bottleneck::new(params, init, &name, in_ch, DEEP_WIDTHS[s], stride));
                        in_ch = DEEP_WIDTHS[s] * BOTTLENECK_EXPANSION;
                    }
                    stages.push(Stage::Deep { stem, blocks });
                }
                stages
            }
        };
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Runs stage `index` (0-based).
    pub fn forward_stage<F: Real>(
        &self,
        index: usize,
        params: &ParamSet<F>,
        x: &FeatureMap<F>,
    ) -> (FeatureMap<F>, StageCache<F>) {
        match &self.stages[index] {
            Stage::Tiny(conv) => {
                let (mut y, cache) = conv.forward(params, x);
                relu_inplace(y.data_mut());
                (
                    y.clone(),
                    StageCache::Tiny {
                        conv: cache,
                        output: y,
                    },
                )
            }
            Stage::Deep { stem, blocks } => {
                let mut current = x.clone();
                let stem_cache = stem.as_ref().map(|stem| {
                    let (conv_out, conv) = stem.conv.forward(params, &current);
                    let mut activated = stem.affine.forward(params, &conv_out);
                    relu_inplace(activated.data_mut());
                    let (pooled, pool) = stem.pool.forward(&activated);
                    current = pooled;
                    StemCache {
                        conv,
                        conv_out,
                        activated,
                        pool,
                    }
                });
                let mut caches = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let cache = block.forward(params, &current);
                    current = cache.output.clone();
                    caches.push(cache);
                }
                (
                    current,
                    StageCache::Deep {
                        stem: stem_cache,
                        blocks: caches,
                    },
                )
            }
        }
    }

    /// Backpropagates through stage `index`. The input gradient is skipped
    /// when `input_grad` is false (the first stage's input is the image).
    pub fn backward_stage<F: Real>(
        &self,
        index: usize,
        params: &ParamSet<F>,
        cache: &StageCache<F>,
        dy: &FeatureMap<F>,
        grads: &mut Grads<F>,
        input_grad: bool,
    ) -> Option<FeatureMap<F>> {
        match (&self.stages[index], cache) {
            (Stage::Tiny(conv), StageCache::Tiny { conv: cc, output }) => {
                let mut d = dy.clone();
                relu_backward_inplace(d.data_mut(), output.data());
                if input_grad {
                    Some(conv.backward(params, cc, &d, grads))
                } else {
                    conv.accumulate(cc, &d, grads);
                    None
                }
            }
            (Stage::Deep { stem, blocks }, StageCache::Deep { stem: sc, blocks: bc }) => {
                let mut d = dy.clone();
                for (block, cache) in blocks.iter().zip(bc).rev() {
                    d = block.backward(params, cache, &d, grads);
                }
                match (stem, sc) {
                    (Some(stem), Some(sc)) => {
                        let mut d_act = stem.pool.backward(&sc.pool, &d);
                        relu_backward_inplace(d_act.data_mut(), sc.activated.data());
                        let d_conv = stem.affine.backward(params, &sc.conv_out, &d_act, grads);
                        if input_grad {
                            Some(stem.conv.backward(params, &sc.conv, &d_conv, grads))
                        } else {
                            stem.conv.accumulate(&sc.conv, &d_conv, grads);
                            None
                        }
                    }
                    _ => Some(d),
                }
            }
            _ => unreachable!("stage cache does not match stage kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_stages_halve_resolution() {
        let mut params = ParamSet::<f32>::new();
        let bb = Backbone::new(&BackboneConfig::tiny(), &mut params, &mut Initializer::new(0)).unwrap();
        let mut x = FeatureMap::<f32>::zeros(64, 32, 3);
        let mut dims = Vec::new();
        for s in 0..NUM_STAGES {
            let (y, _) = bb.forward_stage(s, &params, &x);
            dims.push(y.dims());
            x = y;
        }
        assert_eq!(dims, vec![(32, 16, 16), (16, 8, 32), (8, 4, 64), (4, 2, 128)]);
    }

    #[test]
    fn deep_backbone_has_standard_stage_widths() {
        let mut params = ParamSet::<f32>::new();
        let bb = Backbone::new(&BackboneConfig::Deep, &mut params, &mut Initializer::new(0)).unwrap();
        // Roughly 23.5M weights in the convolutional trunk.
        let n = params.num_scalars();
        assert!((23_000_000..24_000_000).contains(&n), "{n}");
        let mut init = Initializer::new(1);
        let mut x = FeatureMap::new(init.normal::<f32>(&[64, 32, 3], 1.0).into_dimensionality().unwrap()).unwrap();
        let mut shapes = Vec::new();
        for s in 0..NUM_STAGES {
            let (y, _) = bb.forward_stage(s, &params, &x);
            shapes.push(y.dims());
            x = y;
        }
        assert_eq!(shapes, vec![(16, 8, 256), (8, 4, 512), (4, 2, 1024), (2, 1, 2048)]);
        assert!(x.is_finite());
    }

    #[test]
    fn deep_bottleneck_backward_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Initializer::new(2);
        let block = Bottleneck::new(&mut params, &mut init, "b", 4, 2, 2);
        // Give the silent expand affine a non-zero scale so every path carries gradient.
        let id = params.find("b.bn3.scale").unwrap();
        params.set(id, Initializer::filled(&[8], 0.7)).unwrap();
        let x = FeatureMap::new(init.normal::<f64>(&[5, 4, 4], 1.0).into_dimensionality().unwrap()).unwrap();
        let probe = FeatureMap::new(init.normal::<f64>(&[3, 2, 8], 1.0).into_dimensionality().unwrap()).unwrap();
        let objective = |p: &ParamSet<f64>, x: &FeatureMap<f64>| -> f64 {
            let c = block.forward(p, x);
            c.output.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let cache = block.forward(&params, &x);
        let mut grads = params.zeros_like();
        let dx = block.backward(&params, &cache, &probe, &mut grads);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut().as_slice_mut().unwrap()[i] += h;
            xm.data_mut().as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * h);
            assert!((fd - dx.data().as_slice().unwrap()[i]).abs() < 1e-5);
        }
        for pid in params.ids() {
            for i in 0..params.get(pid).len() {
                let mut pp = params.clone();
                let mut pm = params.clone();
                pp.get_mut(pid).as_slice_mut().unwrap()[i] += h;
                pm.get_mut(pid).as_slice_mut().unwrap()[i] -= h;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
                let an = grads.get(pid).as_slice().unwrap()[i];
                assert!((fd - an).abs() < 1e-5, "{}[{i}] {fd} vs {an}", params.name(pid));
            }
        }
    }
}
