//! Feature-extraction backbones.
//!
//! The training pipeline only sees the [`Backbone`] trait (image in, feature
//! map out). [`ConvStub`] is the shipped implementation: a stack of 3×3
//! stride-2 convolutions with ReLU, small enough to train from scratch on a
//! synthetic dataset while exposing the same stride contract a pretrained
//! network binding would.

use crate::cam::FeatureMap;
use crate::tensor::Tensor3;
use crate::{real, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn leaky_slope<T: Scalar>() -> T {
    real::<T>(0.01)
}

/// Image → feature-map handle. Implementations must be deterministic for
/// fixed weights and declare the stride relating input to output resolution.
pub trait Backbone<T: Scalar>: Send + Sync {
    fn input_channels(&self) -> usize;
    /// Spatial reduction factor; outputs are `ceil(H/stride) × ceil(W/stride)`.
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn forward(&self, image: &Tensor3<T>) -> FeatureMap<T>;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct ConvLayer<T> {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`, 3×3 kernels.
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn init(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform: keeps activation variance roughly constant through
        // the ReLU stack
        let fan_in = (in_ch * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weights = (0..out_ch * in_ch * 9)
            .map(|_| real::<T>(rng.gen_range(-bound..bound)))
            .collect();
        ConvLayer {
            in_ch,
            out_ch,
            weights,
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
    }

    /// 3×3 conv, stride 2, padding 1, then leaky ReLU (slope 0.01 on the
    /// negative side, so units cannot die under a hot learning rate).
    fn forward(&self, input: &Tensor3<T>) -> Tensor3<T> {
        let (ic, h, w) = input.shape();
        debug_assert_eq!(ic, self.in_ch);
        let oh = h.div_ceil(2);
        let ow = w.div_ceil(2);
        let mut out = Tensor3::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += self.w(o, i, ky, kx)
                                    * input.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(o, oy, ox) = if acc > T::zero() {
                        acc
                    } else {
                        acc * leaky_slope::<T>()
                    };
                }
            }
        }
        out
    }

    /// Backward through ReLU + conv. Returns gradients in parameter layout
    /// and the gradient w.r.t. the layer input.
    fn backward(
        &self,
        input: &Tensor3<T>,
        output: &Tensor3<T>,
        grad_out: &Tensor3<T>,
    ) -> (Vec<T>, Vec<T>, Tensor3<T>) {
        let (_, h, w) = input.shape();
        let (oc, oh, ow) = output.shape();
        let mut gw = vec![T::zero(); self.weights.len()];
        let mut gb = vec![T::zero(); self.out_ch];
        let mut gin = Tensor3::zeros(self.in_ch, h, w);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    // activation derivative from the stored output sign
                    let slope = if output.at(o, oy, ox) > T::zero() {
                        T::one()
                    } else {
                        leaky_slope::<T>()
                    };
                    let g = grad_out.at(o, oy, ox) * slope;
                    if g == T::zero() {
                        continue;
                    }
                    gb[o] += g;
                    for i in 0..self.in_ch {
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                gw[((o * self.in_ch + i) * 3 + ky) * 3 + kx] +=
                                    g * input.at(i, iy, ix);
                                *gin.at_mut(i, iy, ix) += g * self.w(o, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
        (gw, gb, gin)
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Deterministic trainable conv backbone; stride is `2^depth`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvStub<T> {
    in_channels: usize,
    layers: Vec<ConvLayer<T>>,
}

/// Per-layer activations retained by [`ConvStub::forward_cached`] for the
/// backward pass.
pub struct StubCache<T> {
    /// `acts[0]` is the input image, `acts[i]` the output of layer `i−1`.
    acts: Vec<Tensor3<T>>,
}

impl<T: Scalar> ConvStub<T> {
    /// `channel_plan` gives the output channels of each stage, e.g.
    /// `[8, 12, 16]` for a stride-8 stub.
    pub fn new(in_channels: usize, channel_plan: &[usize], seed: u64) -> Self {
        assert!(!channel_plan.is_empty(), "need at least one stage");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(channel_plan.len());
        let mut prev = in_channels;
        for &ch in channel_plan {
            layers.push(ConvLayer::init(prev, ch, &mut rng));
            prev = ch;
        }
        ConvStub { in_channels, layers }
    }

    pub fn forward_cached(&self, image: &Tensor3<T>) -> (FeatureMap<T>, StubCache<T>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(image.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().unwrap());
            acts.push(next);
        }
        let features = FeatureMap::new(acts.last().unwrap().clone(), self.stride());
        (features, StubCache { acts })
    }

    /// Gradient of a scalar loss w.r.t. all parameters given the gradient on
    /// the output features. Layout matches [`ConvStub::params_flat`].
    pub fn backward(&self, cache: &StubCache<T>, grad_features: &Tensor3<T>) -> Vec<T> {
        let mut grads: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_features.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (gw, gb, gin) = layer.backward(&cache.acts[idx], &cache.acts[idx + 1], &grad);
            let mut flat = gw;
            flat.extend(gb);
            grads.push(flat);
            grad = gin;
        }
        grads.reverse();
        grads.concat()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "parameter length mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }
}

impl<T: Scalar> Backbone<T> for ConvStub<T> {
    fn input_channels(&self) -> usize {
        self.in_channels
    }

    fn stride(&self) -> usize {
        1 << self.layers.len()
    }

    fn out_channels(&self) -> usize {
        self.layers.last().unwrap().out_ch
    }

    fn forward(&self, image: &Tensor3<T>) -> FeatureMap<T> {
        self.forward_cached(image).0
    }
}
