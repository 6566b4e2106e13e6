//! Vision-language encoder interfaces and CAM-masked image construction.
//!
//! Encoders are frozen: the traits expose no parameter mutation, and the
//! training loop never owns encoder state. Gradients flow through the
//! masked-image *inputs* (the CAM multiplication), never into the encoders.
//!
//! The shipped implementation is a deterministic mock pair: the visual side
//! is a fixed seeded projection of pooled pixel statistics, the text side a
//! fixed seeded unit vector derived from the prompt string. Runs need no
//! pretrained weights and are reproducible bit for bit.

use crate::cam::{ActivationMaps, ImageSample};
use crate::prompt::PromptSet;
use crate::tensor::{bilinear_resize, dot, norm, Matrix, Tensor3};
use crate::{derive_seed, fnv1a64, real, Error, Result, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    Visual,
    Text,
}

/// A visual or text feature vector of the encoder dimensionality.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
    pub modality: Modality,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>, modality: Modality) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("embedding must be finite and nonempty"));
        }
        Ok(EmbeddingVector { values, modality })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Foreground,
    Background,
}

/// An image multiplied by an (upsampled) activation map or its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage<T> {
    pub pixels: Tensor3<T>,
    pub polarity: Polarity,
    pub class_index: usize,
}

/// Frozen image encoder: pixels in, length-`dim` embedding out, plus the
/// vector-Jacobian product back onto the pixels.
pub trait VisualEncoder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, pixels: &Tensor3<T>) -> Vec<T>;
    /// Gradient of `<encode(pixels), grad_out>` w.r.t. the pixels.
    fn encode_vjp(&self, pixels: &Tensor3<T>, grad_out: &[T]) -> Tensor3<T>;
    fn fingerprint(&self) -> String;
    /// Checksum over the frozen state; must never change once constructed.
    fn state_checksum(&self) -> u64;
}

/// Frozen text encoder: prompt string in, length-`dim` embedding out.
pub trait TextEncoder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Vec<T>;
    fn fingerprint(&self) -> String;
    fn state_checksum(&self) -> u64;
}

/// Deterministic stand-in for a pretrained image encoder: adaptive mean
/// pooling onto a `grid × grid` lattice per channel, a constant bias
/// feature, then a fixed seeded linear projection.
pub struct MockVisualEncoder<T> {
    dim: usize,
    channels: usize,
    grid: usize,
    seed: u64,
    /// `dim × (channels·grid² + 1)`; the trailing column is what a zero
    /// image maps to, keeping every embedding nonzero.
    proj: Matrix<T>,
}

impl<T: Scalar> MockVisualEncoder<T> {
    pub fn new(seed: u64, dim: usize, channels: usize, grid: usize) -> Self {
        let stats = channels * grid * grid + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mock-visual"));
        let scale = 1.0 / (stats as f64).sqrt();
        let proj = Matrix::from_fn(dim, stats, |_, _| {
            real::<T>(rng.gen_range(-1.0..1.0) * scale)
        });
        MockVisualEncoder {
            dim,
            channels,
            grid,
            seed,
            proj,
        }
    }

    fn cell_bounds(&self, g: usize, len: usize) -> (usize, usize) {
        // lo < len always; hi ≤ len and ≥ lo+1, so every cell is nonempty
        let lo = g * len / self.grid;
        let hi = ((g + 1) * len / self.grid).max(lo + 1);
        (lo, hi)
    }

    fn stats(&self, pixels: &Tensor3<T>) -> Vec<T> {
        let (c, h, w) = pixels.shape();
        debug_assert_eq!(c, self.channels);
        let mut out = Vec::with_capacity(c * self.grid * self.grid + 1);
        for ci in 0..c {
            for gy in 0..self.grid {
                let (y0, y1) = self.cell_bounds(gy, h);
                for gx in 0..self.grid {
                    let (x0, x1) = self.cell_bounds(gx, w);
                    let mut acc = T::zero();
                    for y in y0..y1.min(h) {
                        for x in x0..x1.min(w) {
                            acc += pixels.at(ci, y, x);
                        }
                    }
                    let count = (y1.min(h) - y0) * (x1.min(w) - x0);
                    out.push(acc / real::<T>(count.max(1) as f64));
                }
            }
        }
        out.push(T::one());
        out
    }
}

impl<T: Scalar> VisualEncoder<T> for MockVisualEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, pixels: &Tensor3<T>) -> Vec<T> {
        self.proj.mul_vec(&self.stats(pixels))
    }

    fn encode_vjp(&self, pixels: &Tensor3<T>, grad_out: &[T]) -> Tensor3<T> {
        debug_assert_eq!(grad_out.len(), self.dim);
        let (c, h, w) = pixels.shape();
        // d stats = projᵀ · grad_out (bias entry discarded)
        let n_stats = self.channels * self.grid * self.grid;
        let mut gstats = vec![T::zero(); n_stats];
        for (r, &g) in grad_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let row = self.proj.row(r);
            for (s, gs) in gstats.iter_mut().enumerate() {
                *gs += g * row[s];
            }
        }
        let mut gpix = Tensor3::zeros(c, h, w);
        let mut idx = 0;
        for ci in 0..c {
            for gy in 0..self.grid {
                let (y0, y1) = self.cell_bounds(gy, h);
                for gx in 0..self.grid {
                    let (x0, x1) = self.cell_bounds(gx, w);
                    let count = (y1.min(h) - y0) * (x1.min(w) - x0);
                    let spread = gstats[idx] / real::<T>(count.max(1) as f64);
                    for y in y0..y1.min(h) {
                        for x in x0..x1.min(w) {
                            *gpix.at_mut(ci, y, x) += spread;
                        }
                    }
                    idx += 1;
                }
            }
        }
        gpix
    }

    fn fingerprint(&self) -> String {
        format!(
            "mock-visual:seed={}:dim={}:ch={}:grid={}",
            self.seed, self.dim, self.channels, self.grid
        )
    }

    fn state_checksum(&self) -> u64 {
        let bytes: Vec<u8> = self
            .proj
            .as_slice()
            .iter()
            .flat_map(|v| v.to_f64().unwrap().to_le_bytes())
            .collect();
        fnv1a64(&bytes)
    }
}

/// Deterministic stand-in for a pretrained text encoder: each distinct
/// prompt string hashes to its own seeded unit vector.
pub struct MockTextEncoder<T> {
    dim: usize,
    seed: u64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MockTextEncoder<T> {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockTextEncoder {
            dim,
            seed,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> TextEncoder<T> for MockTextEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Vec<T> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, prompt) ^ 0x7465_7874);
        let raw: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.into_iter().map(|v| real::<T>(v / n)).collect()
    }

    fn fingerprint(&self) -> String {
        format!("mock-text:seed={}:dim={}", self.seed, self.dim)
    }

    fn state_checksum(&self) -> u64 {
        derive_seed(self.seed, "mock-text-state")
    }
}

/// A frozen visual/text encoder pair with a prompt-keyed embedding cache.
pub struct EncoderPair<T: Scalar> {
    visual: Box<dyn VisualEncoder<T>>,
    text: Box<dyn TextEncoder<T>>,
    dim: usize,
    frozen: bool,
    cache: Mutex<HashMap<String, Vec<T>>>,
    disk_path: Option<PathBuf>,
}

impl<T: Scalar> EncoderPair<T> {
    pub fn new(visual: Box<dyn VisualEncoder<T>>, text: Box<dyn TextEncoder<T>>) -> Result<Self> {
        if visual.dim() != text.dim() {
            return Err(Error::config(format!(
                "encoder dims differ: visual {} vs text {}",
                visual.dim(),
                text.dim()
            )));
        }
        let dim = visual.dim();
        Ok(EncoderPair {
            visual,
            text,
            dim,
            frozen: true,
            cache: Mutex::new(HashMap::new()),
            disk_path: None,
        })
    }

    /// The deterministic mock pair used for desk-scale runs and tests.
    pub fn mock(seed: u64, dim: usize) -> Self {
        EncoderPair::new(
            Box::new(MockVisualEncoder::new(seed, dim, 3, 8)),
            Box::new(MockTextEncoder::new(seed, dim)),
        )
        .expect("mock dims agree")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn fingerprint(&self) -> String {
        format!("{}|{}", self.visual.fingerprint(), self.text.fingerprint())
    }

    /// Combined checksum of the frozen encoder state; training must leave it
    /// untouched.
    pub fn state_checksum(&self) -> u64 {
        self.visual.state_checksum() ^ self.text.state_checksum().rotate_left(17)
    }

    /// Attach a persistent text-embedding cache under `dir` and load any
    /// previous entries for this encoder fingerprint.
    pub fn with_disk_cache(mut self, dir: &Path) -> Result<Self> {
        let file = dir.join(format!("text-cache-{:016x}.json", fnv1a64(self.fingerprint().as_bytes())));
        if file.exists() {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Error::config(format!("cache read {}: {e}", file.display())))?;
            let entries: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("cache parse {}: {e}", file.display())))?;
            let mut cache = self.cache.lock().unwrap();
            for (k, v) in entries {
                cache.insert(k, v.into_iter().map(real::<T>).collect());
            }
        }
        self.disk_path = Some(file);
        Ok(self)
    }

    /// Write the accumulated text-embedding cache back to disk, if attached.
    pub fn persist_cache(&self) -> Result<()> {
        let Some(path) = &self.disk_path else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::config(format!("cache dir {}: {e}", parent.display())))?;
        }
        let cache = self.cache.lock().unwrap();
        let entries: BTreeMap<&String, Vec<f64>> = cache
            .iter()
            .map(|(k, v)| (k, v.iter().map(|x| x.to_f64().unwrap()).collect()))
            .collect();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(&entries).unwrap())
            .map_err(|e| Error::config(format!("cache write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::config(format!("cache rename {}: {e}", path.display())))?;
        Ok(())
    }

    /// Embed a masked image. Gradients flow into the pixels (and from there
    /// into the mask); the encoder itself is frozen.
    pub fn encode_image(&self, img: &MaskedImage<T>) -> Result<EmbeddingVector<T>> {
        if !img.pixels.all_finite() {
            return Err(Error::argument("masked image contains non-finite pixels"));
        }
        EmbeddingVector::new(self.visual.encode(&img.pixels), Modality::Visual)
    }

    /// VJP of [`EncoderPair::encode_image`] onto the masked-image pixels.
    pub fn encode_image_vjp(&self, img: &MaskedImage<T>, grad_out: &[T]) -> Tensor3<T> {
        self.visual.encode_vjp(&img.pixels, grad_out)
    }

    /// Embed one prompt string, via the cache (insert-if-absent).
    pub fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector<T>> {
        if prompt.is_empty() {
            return Err(Error::argument("empty prompt string"));
        }
        let mut cache = self.cache.lock().unwrap();
        let values = cache
            .entry(prompt.to_string())
            .or_insert_with(|| self.text.encode(prompt))
            .clone();
        EmbeddingVector::new(values, Modality::Text)
    }

    /// Embed every prompt of a set, order preserved and index-aligned.
    pub fn encode_texts(&self, prompts: &PromptSet) -> Result<Vec<EmbeddingVector<T>>> {
        if prompts.is_empty() {
            return Err(Error::argument("empty prompt set"));
        }
        prompts.prompts.iter().map(|p| self.encode_text(p)).collect()
    }
}

/// Upsample one class map to the image grid and split the image into its
/// foreground and background parts. The background is computed as the exact
/// complement so the two parts always reconstruct the image.
pub fn make_masked_pair<T: Scalar>(
    sample: &ImageSample<T>,
    maps: &ActivationMaps<T>,
    k: usize,
) -> Result<(MaskedImage<T>, MaskedImage<T>)> {
    let (fg, bg, _) = masked_pair_and_weights(sample, maps, k)?;
    Ok((fg, bg))
}

/// As [`make_masked_pair`] but also returns the upsampled mask plane the
/// backward pass needs.
pub(crate) fn masked_pair_and_weights<T: Scalar>(
    sample: &ImageSample<T>,
    maps: &ActivationMaps<T>,
    k: usize,
) -> Result<(MaskedImage<T>, MaskedImage<T>, Vec<T>)> {
    if !maps.normalized {
        return Err(Error::argument(
            "masking requires sigmoid-normalized activation maps",
        ));
    }
    if k >= maps.num_classes() {
        return Err(Error::argument(format!(
            "class index {k} out of range for {} maps",
            maps.num_classes()
        )));
    }
    let (c, h, w) = sample.pixels.shape();
    let up = bilinear_resize(
        maps.values.channel(k),
        maps.values.height(),
        maps.values.width(),
        h,
        w,
    );
    let mut fg = Tensor3::zeros(c, h, w);
    let mut bg = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let src = sample.pixels.channel(ci);
        let f = fg.channel_mut(ci);
        for i in 0..h * w {
            f[i] = src[i] * up[i];
        }
        let b = bg.channel_mut(ci);
        for i in 0..h * w {
            b[i] = src[i] - f[i];
        }
    }
    Ok((
        MaskedImage {
            pixels: fg,
            polarity: Polarity::Foreground,
            class_index: k,
        },
        MaskedImage {
            pixels: bg,
            polarity: Polarity::Background,
            class_index: k,
        },
        up,
    ))
}

/// Cosine similarity `(u·v)/(|u||v|)`, clamped into `[−1, 1]` against
/// floating-point overshoot.
pub fn cosine_similarity<T: Scalar>(u: &EmbeddingVector<T>, v: &EmbeddingVector<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::argument(format!(
            "embedding dims differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let nu = norm(&u.values);
    let nv = norm(&v.values);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::argument("cosine similarity of a zero-norm vector"));
    }
    let s = dot(&u.values, &v.values) / (nu * nv);
    Ok(s.min(T::one()).max(-T::one()))
}

/// Partials of the cosine similarity w.r.t. both arguments, scaled by an
/// upstream gradient: returns `(ds·∂s/∂u, ds·∂s/∂v)`.
pub fn cosine_similarity_vjp<T: Scalar>(u: &[T], v: &[T], upstream: T) -> (Vec<T>, Vec<T>) {
    let nu = norm(u);
    let nv = norm(v);
    let s = dot(u, v) / (nu * nv);
    let inv = T::one() / (nu * nv);
    let gu = u
        .iter()
        .zip(v.iter())
        .map(|(&ui, &vi)| upstream * (vi * inv - s * ui / (nu * nu)))
        .collect();
    let gv = u
        .iter()
        .zip(v.iter())
        .map(|(&ui, &vi)| upstream * (ui * inv - s * vi / (nv * nv)))
        .collect();
    (gu, gv)
}
