//! Class activation maps from image-level labels.
//!
//! A backbone turns an image into a feature map; a 1×1 classifier head
//! projects features into per-class activation maps and, through global
//! average pooling, into classification logits trained with the multi-label
//! soft-margin loss. Activation maps are normalized with an elementwise
//! sigmoid before they are used as soft masks.

use crate::backbone::Backbone;
use crate::tensor::{Matrix, Tensor3};
use crate::{real, Error, Result, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An image with its multi-hot image-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample<T> {
    pub id: String,
    /// `channels × H × W`, values in `[0, 1]`.
    pub pixels: Tensor3<T>,
    /// Multi-hot presence vector, length = number of classes.
    pub label: Vec<bool>,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(id: impl Into<String>, pixels: Tensor3<T>, label: Vec<bool>) -> Result<Self> {
        if !label.iter().any(|&b| b) {
            return Err(Error::argument("label must have at least one present class"));
        }
        if pixels.height() < 16 || pixels.width() < 16 {
            return Err(Error::argument(format!(
                "image must be at least 16x16, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if !pixels.all_finite() {
            return Err(Error::argument("image contains non-finite pixels"));
        }
        Ok(ImageSample {
            id: id.into(),
            pixels,
            label,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label.len()
    }

    /// Indices of the classes present in this image, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.label
            .iter()
            .enumerate()
            .filter_map(|(k, &on)| on.then_some(k))
            .collect()
    }
}

/// Backbone output: `C × H' × W'` features at a known stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor3<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor3<T>, stride: usize) -> Self {
        assert!(stride > 0);
        FeatureMap { values, stride }
    }
}

/// 1×1 convolution weights projecting `C` feature channels onto `K` classes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierHead<T> {
    /// `C × K`.
    pub weights: Matrix<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(weights: Matrix<T>) -> Result<Self> {
        if !weights.all_finite() {
            return Err(Error::argument("head weights must be finite"));
        }
        Ok(ClassifierHead { weights })
    }

    /// Seeded uniform fan-in initialization. The bound matches the backbone
    /// stages so freshly initialized activation maps carry nonvanishing
    /// logits instead of collapsing to σ ≈ 0.5 everywhere.
    pub fn init(channels: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / channels as f64).sqrt();
        ClassifierHead {
            weights: Matrix::from_fn(channels, num_classes, |_, _| {
                real::<T>(rng.gen_range(-bound..bound))
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }
}

/// Per-class spatial maps, either raw logits or sigmoid-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMaps<T> {
    /// `K × H' × W'`.
    pub values: Tensor3<T>,
    pub normalized: bool,
}

impl<T: Scalar> ActivationMaps<T> {
    pub fn num_classes(&self) -> usize {
        self.values.channels()
    }
}

/// Run the backbone on a sample.
pub fn extract_features<T: Scalar>(
    sample: &ImageSample<T>,
    backbone: &dyn Backbone<T>,
) -> Result<FeatureMap<T>> {
    if sample.pixels.channels() != backbone.input_channels() {
        return Err(Error::config(format!(
            "backbone expects {} input channels, image has {}",
            backbone.input_channels(),
            sample.pixels.channels()
        )));
    }
    Ok(backbone.forward(&sample.pixels))
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)), stable at both ends
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Multi-label soft-margin classification loss, averaged over classes:
/// `−(1/K) Σ_k [y_k·ln σ(z_k) + (1−y_k)·ln(1−σ(z_k))]`.
pub fn multilabel_soft_margin_loss<T: Scalar>(logits: &[T], label: &[bool]) -> Result<T> {
    if logits.len() != label.len() {
        return Err(Error::argument(format!(
            "logits length {} != label length {}",
            logits.len(),
            label.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::argument("empty logit vector"));
    }
    let k = real::<T>(logits.len() as f64);
    let mut total = T::zero();
    for (&z, &y) in logits.iter().zip(label.iter()) {
        // −ln σ(z) = softplus(−z), −ln(1−σ(z)) = softplus(z)
        total += if y { softplus(-z) } else { softplus(z) };
    }
    Ok(total / k)
}

/// Gradient of [`multilabel_soft_margin_loss`] w.r.t. the logits:
/// `(σ(z_k) − y_k) / K`.
pub fn multilabel_soft_margin_grad<T: Scalar>(logits: &[T], label: &[bool]) -> Result<Vec<T>> {
    if logits.len() != label.len() {
        return Err(Error::argument(format!(
            "logits length {} != label length {}",
            logits.len(),
            label.len()
        )));
    }
    let k = real::<T>(logits.len() as f64);
    Ok(logits
        .iter()
        .zip(label.iter())
        .map(|(&z, &y)| {
            let target = if y { T::one() } else { T::zero() };
            (sigmoid(z) - target) / k
        })
        .collect())
}

/// Raw activation maps: `P_k(h,w) = W_k · Z(·,h,w)` for every class `k`.
pub fn compute_raw_cam<T: Scalar>(
    features: &FeatureMap<T>,
    head: &ClassifierHead<T>,
) -> Result<ActivationMaps<T>> {
    let (c, h, w) = features.values.shape();
    if c != head.channels() {
        return Err(Error::argument(format!(
            "head expects {} channels, features have {c}",
            head.channels()
        )));
    }
    let k = head.num_classes();
    let mut values = Tensor3::zeros(k, h, w);
    for ki in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for ci in 0..c {
                    acc += head.weights.at(ci, ki) * features.values.at(ci, y, x);
                }
                *values.at_mut(ki, y, x) = acc;
            }
        }
    }
    Ok(ActivationMaps {
        values,
        normalized: false,
    })
}

/// Backward of [`compute_raw_cam`]: gradients w.r.t. head weights and
/// features given the gradient on the raw maps.
pub fn raw_cam_vjp<T: Scalar>(
    features: &FeatureMap<T>,
    head: &ClassifierHead<T>,
    grad_maps: &Tensor3<T>,
) -> (Matrix<T>, Tensor3<T>) {
    let (c, h, w) = features.values.shape();
    let k = head.num_classes();
    debug_assert_eq!(grad_maps.shape(), (k, h, w));
    let mut gw = Matrix::zeros(c, k);
    let mut gf = Tensor3::zeros(c, h, w);
    for ki in 0..k {
        for y in 0..h {
            for x in 0..w {
                let g = grad_maps.at(ki, y, x);
                if g == T::zero() {
                    continue;
                }
                for ci in 0..c {
                    *gw.at_mut(ci, ki) += g * features.values.at(ci, y, x);
                    *gf.at_mut(ci, y, x) += g * head.weights.at(ci, ki);
                }
            }
        }
    }
    (gw, gf)
}

/// Elementwise sigmoid over raw maps. The raw logits go straight through
/// the sigmoid — there is no per-class max normalization beforehand.
/// Rejects maps that are already normalized.
pub fn sigmoid_normalize<T: Scalar>(raw: &ActivationMaps<T>) -> Result<ActivationMaps<T>> {
    if raw.normalized {
        return Err(Error::argument("maps are already sigmoid-normalized"));
    }
    Ok(ActivationMaps {
        values: raw.values.map(sigmoid),
        normalized: true,
    })
}

/// Backward of [`sigmoid_normalize`] given the normalized maps `P` and the
/// gradient on them: `dL/draw = dL/dP · P · (1−P)`.
pub fn sigmoid_normalize_vjp<T: Scalar>(
    normalized: &ActivationMaps<T>,
    grad_out: &Tensor3<T>,
) -> Tensor3<T> {
    let (k, h, w) = normalized.values.shape();
    debug_assert_eq!(grad_out.shape(), (k, h, w));
    let mut out = Tensor3::zeros(k, h, w);
    for i in 0..k * h * w {
        let p = normalized.values.as_slice()[i];
        out.as_mut_slice()[i] = grad_out.as_slice()[i] * p * (T::one() - p);
    }
    out
}

/// Classification logits: global average pooling over space, then the 1×1
/// head. Equals the per-class spatial mean of [`compute_raw_cam`].
pub fn classification_logits<T: Scalar>(
    features: &FeatureMap<T>,
    head: &ClassifierHead<T>,
) -> Result<Vec<T>> {
    let (c, _, _) = features.values.shape();
    if c != head.channels() {
        return Err(Error::argument(format!(
            "head expects {} channels, features have {c}",
            head.channels()
        )));
    }
    let pooled: Vec<T> = (0..c).map(|ci| features.values.channel_mean(ci)).collect();
    Ok(head.weights.vec_mul(&pooled))
}

/// Backward of [`classification_logits`]: gradients w.r.t. head weights and
/// features given the gradient on the logits.
pub fn classification_logits_vjp<T: Scalar>(
    features: &FeatureMap<T>,
    head: &ClassifierHead<T>,
    grad_logits: &[T],
) -> (Matrix<T>, Tensor3<T>) {
    let (c, h, w) = features.values.shape();
    let k = head.num_classes();
    debug_assert_eq!(grad_logits.len(), k);
    let inv_area = T::one() / real::<T>((h * w) as f64);
    let pooled: Vec<T> = (0..c).map(|ci| features.values.channel_mean(ci)).collect();
    let mut gw = Matrix::zeros(c, k);
    let mut gf = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let mut gpool = T::zero();
        for (ki, &gl) in grad_logits.iter().enumerate() {
            *gw.at_mut(ci, ki) += gl * pooled[ci];
            gpool += gl * head.weights.at(ci, ki);
        }
        let spread = gpool * inv_area;
        for v in gf.channel_mut(ci) {
            *v = spread;
        }
    }
    (gw, gf)
}
