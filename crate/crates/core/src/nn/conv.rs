use ndarray::{Array1, Array2, Axis};

use super::{Grads, Initializer, Linear, ParamId, ParamSet};
use crate::tensor::{FeatureMap, Real};

/// Square-kernel 2-D convolution over `(h, w, c)` maps, lowered to a matrix
/// product through im2col.
///
/// The weight matrix is `(k * k * in_channels, out_channels)` with rows
/// ordered by kernel row, kernel column, then input channel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub linear: Linear,
}

#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dims: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let linear = Linear::new(
            params,
            init,
            name,
            fan_in,
            out_channels,
            (2.0 / fan_in as f64).sqrt(),
            bias,
        );
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            linear,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &FeatureMap<F>,
    ) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        let (h, w, _) = x.dims();
        let (ho, wo) = self.output_size(h, w);
        let cols = if self.is_pointwise() {
            x.matrix().to_owned()
        } else {
            self.im2col(x, ho, wo)
        };
        let y = self.linear.forward(params, cols.view());
        (
            FeatureMap::from_matrix(ho, wo, y),
            ConvCache {
                cols,
                in_dims: x.dims(),
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &ConvCache<F>,
        dy: &FeatureMap<F>,
        grads: &mut Grads<F>,
    ) -> FeatureMap<F> {
        let dcols = self
            .linear
            .backward(params, cache.cols.view(), dy.matrix(), grads);
        let (h, w, _) = cache.in_dims;
        if self.is_pointwise() {
            FeatureMap::from_matrix(h, w, dcols)
        } else {
            self.col2im(&dcols, cache.in_dims, dy.h(), dy.w())
        }
    }

    /// Parameter gradients only; used when the input is the raw image.
    pub fn accumulate<F: Real>(&self, cache: &ConvCache<F>, dy: &FeatureMap<F>, grads: &mut Grads<F>) {
        self.linear.accumulate(cache.cols.view(), dy.matrix(), grads);
    }

    fn im2col<F: Real>(&self, x: &FeatureMap<F>, ho: usize, wo: usize) -> Array2<F> {
        let (h, w, c) = x.dims();
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = Array2::<F>::zeros((ho * wo, row_len));
        let src = x.data().as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut dst[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (iy as usize * w + ix as usize) * c;
                        let d = (ky * k + kx) * c;
                        row[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(
        &self,
        dcols: &Array2<F>,
        in_dims: (usize, usize, usize),
        ho: usize,
        wo: usize,
    ) -> FeatureMap<F> {
        let (h, w, c) = in_dims;
        let k = self.kernel;
        let row_len = k * k * c;
        let mut dx = FeatureMap::<F>::zeros(h, w, c);
        let src = dcols.as_slice().expect("standard layout");
        let dst = dx.data_mut().as_slice_mut().expect("fresh array");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &src[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (ky * k + kx) * c;
                        let d = (iy as usize * w + ix as usize) * c;
                        for (t, &v) in dst[d..d + c].iter_mut().zip(&row[s..s + c]) {
                            *t += v;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel affine transform `y = x * scale + shift`.
///
/// Stands in for batch normalization with folded (frozen) statistics in the
/// deep backbone, which is how imported pretrained weights are consumed.
#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    pub fn new<F: Real>(params: &mut ParamSet<F>, name: &str, channels: usize, scale: f64) -> Self {
        Self {
            scale: params.register(
                format!("{name}.scale"),
                Initializer::filled(&[channels], scale),
            ),
            shift: params.register(format!("{name}.shift"), Initializer::zeros(&[channels])),
        }
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &FeatureMap<F>) -> FeatureMap<F> {
        let mut m = x.matrix().to_owned();
        m *= &params.vector(self.scale);
        m += &params.vector(self.shift);
        FeatureMap::from_matrix(x.h(), x.w(), m)
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &FeatureMap<F>,
        dy: &FeatureMap<F>,
        grads: &mut Grads<F>,
    ) -> FeatureMap<F> {
        let dym = dy.matrix();
        let dscale: Array1<F> = (&dym * &x.matrix()).sum_axis(Axis(0));
        grads.vector_mut(self.scale).scaled_add(F::one(), &dscale);
        grads
            .vector_mut(self.shift)
            .scaled_add(F::one(), &dym.sum_axis(Axis(0)));
        let dx = &dym * &params.vector(self.scale);
        FeatureMap::from_matrix(x.h(), x.w(), dx)
    }
}

/// Max pooling with square window; ties resolve to the first position.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_dims: (usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward<F: Real>(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, MaxPoolCache) {
        let (h, w, c) = x.dims();
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let src = x.data().as_slice().expect("standard layout");
        let mut out = FeatureMap::<F>::zeros(ho, wo, c);
        let mut argmax = vec![0usize; ho * wo * c];
        let dst = out.data_mut().as_slice_mut().expect("fresh array");
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (iy as usize * w + ix as usize) * c + ch;
                            if src[idx] > best || best_idx == usize::MAX {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    dst[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                in_dims: (h, w, c),
            },
        )
    }

    pub fn backward<F: Real>(&self, cache: &MaxPoolCache, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let (h, w, c) = cache.in_dims;
        let mut dx = FeatureMap::<F>::zeros(h, w, c);
        let dst = dx.data_mut().as_slice_mut().expect("fresh array");
        let src = dy.data().as_slice().expect("standard layout");
        for (o, &i) in cache.argmax.iter().enumerate() {
            dst[i] += src[o];
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn naive_conv(
        x: &Array3<f64>,
        weight: &Array2<f64>,
        bias: &Array1<f64>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (h, w, c) = x.dim();
        let co = weight.ncols();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut y = Array3::zeros((ho, wo, co));
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = bias[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x[[iy as usize, ix as usize, ci]]
                                    * weight[[(ky * k + kx) * c + ci, o]];
                            }
                        }
                    }
                    y[[oy, ox, o]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Initializer::new(3);
        let conv = Conv2d::new(&mut params, &mut init, "c", 3, 4, 3, 2, 1, true);
        params
            .set(conv.linear.bias.unwrap(), init.normal(&[4], 1.0))
            .unwrap();
        let x = FeatureMap::new(
            init.normal::<f64>(&[7, 5, 3], 1.0)
                .into_dimensionality()
                .unwrap(),
        )
        .unwrap();
        let (y, _) = conv.forward(&params, &x);
        let expected = naive_conv(
            x.data(),
            &params.matrix(conv.linear.weight).to_owned(),
            &params.vector(conv.linear.bias.unwrap()).to_owned(),
            3,
            2,
            1,
        );
        assert_eq!(y.dims(), expected.dim());
        for (a, b) in y.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Initializer::new(5);
        let conv = Conv2d::new(&mut params, &mut init, "c", 2, 3, 3, 2, 1, true);
        let x = FeatureMap::new(
            init.normal::<f64>(&[5, 4, 2], 1.0)
                .into_dimensionality()
                .unwrap(),
        )
        .unwrap();
        let probe = init.normal::<f64>(&[3, 2, 3], 1.0);
        let loss = |p: &ParamSet<f64>, x: &FeatureMap<f64>| -> f64 {
            let (y, _) = conv.forward(p, x);
            y.data().iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward(&params, &x);
        let dy = FeatureMap::new(probe.clone().into_dimensionality().unwrap()).unwrap();
        let mut grads = params.zeros_like();
        let dx = conv.backward(&params, &cache, &dy, &mut grads);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut().as_slice_mut().unwrap()[i] += h;
            xm.data_mut().as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((fd - dx.data().as_slice().unwrap()[i]).abs() < 1e-6);
        }
        let wid = conv.linear.weight;
        for i in 0..params.get(wid).len() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.get_mut(wid).as_slice_mut().unwrap()[i] += h;
            pm.get_mut(wid).as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads.get(wid).as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let data = Array3::from_shape_vec((2, 2, 1), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let x = FeatureMap::new(data).unwrap();
        let pool = MaxPool2d {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.data()[[0, 0, 0]], 4.0);
        let dy = FeatureMap::new(Array3::from_elem((1, 1, 1), 1.5)).unwrap();
        let dx = pool.backward(&cache, &dy);
        assert_eq!(dx.data().as_slice().unwrap(), &[0.0, 1.5, 0.0, 0.0]);
    }
}
