//! On-disk dataset layout and loading.
//!
//! Two directory shapes are accepted.
//!
//! The flat layout written by `make-toy`:
//!
//! ```text
//! meta.json      {"num_classes", "class_names", ...}
//! labels.json    {"<id>": [0,1,...], ...}   multi-hot per image
//! images/<id>.png|jpg
//! masks/<id>.png          optional 8-bit label masks (0 = background)
//! ```
//!
//! And a VOC-style tree (no data ships with this crate):
//!
//! ```text
//! classes.txt                          one class name per line
//! ImageSets/Segmentation/<split>.txt   image ids
//! JPEGImages/<id>.jpg
//! SegmentationClass/<id>.png           8-bit label masks, 0 = background
//! ```
//!
//! In the VOC shape the image-level multi-hot labels are derived from the
//! masks. Void pixels must be remapped before use; labels above the class
//! count are rejected.

use crate::config::AugmentConfig;
use image::GenericImageView;
use pole_core::cam::ImageSample;
use pole_core::pseudo::PseudoMask;
use pole_core::tensor::{bilinear_resize, Tensor3};
use pole_core::{Error, Real, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Sorted by image id.
    pub samples: Vec<ImageSample<Real>>,
    /// Reference masks aligned with `samples`, when the dataset ships them.
    pub references: Option<Vec<PseudoMask>>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Decode an RGB image into a `3×H×W` tensor with values in `[0, 1]`.
pub fn load_image_tensor(path: &Path) -> Result<Tensor3<Real>> {
    let img = image::open(path)
        .map_err(|e| Error::config(format!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = img.dimensions();
    let rgb = img.to_rgb8();
    Ok(Tensor3::from_fn(3, h as usize, w as usize, |c, y, x| {
        rgb.get_pixel(x as u32, y as u32).0[c] as Real / 255.0
    }))
}

/// Decode an 8-bit single-channel label mask.
pub fn load_mask(path: &Path, id: &str) -> Result<PseudoMask> {
    let img = image::open(path)
        .map_err(|e| Error::config(format!("cannot decode {}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    PseudoMask::new(id, h as usize, w as usize, gray.into_raw())
}

/// Write an 8-bit single-channel label mask.
pub fn save_mask(path: &Path, mask: &PseudoMask) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.labels.clone(),
    )
    .expect("mask buffer matches dims");
    img.save(path)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

/// Dispatch on the directory shape.
pub fn load_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    if dir.join("meta.json").exists() {
        load_flat(dir)
    } else if dir.join("JPEGImages").is_dir() {
        load_voc(dir, split)
    } else {
        Err(Error::config(format!(
            "{} is neither a flat dataset (meta.json) nor a VOC-style tree (JPEGImages/)",
            dir.display()
        )))
    }
}

fn load_flat(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    if meta.class_names.len() != meta.num_classes {
        return Err(Error::config(format!(
            "meta.json lists {} class names for {} classes",
            meta.class_names.len(),
            meta.num_classes
        )));
    }
    let labels: BTreeMap<String, Vec<u8>> = read_json(&dir.join("labels.json"))?;
    if labels.is_empty() {
        return Err(Error::config("labels.json holds no images"));
    }
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let mut samples = Vec::with_capacity(labels.len());
    let mut references = Vec::new();
    let mut have_all_masks = masks_dir.is_dir();
    for (id, hot) in &labels {
        if hot.len() != meta.num_classes {
            return Err(Error::config(format!(
                "label for {id} has {} entries, expected {}",
                hot.len(),
                meta.num_classes
            )));
        }
        let img_path = find_image(&images_dir, id).ok_or_else(|| {
            Error::config(format!("no image file for id {id} under {}", images_dir.display()))
        })?;
        let pixels = load_image_tensor(&img_path)?;
        let label: Vec<bool> = hot.iter().map(|&v| v != 0).collect();
        samples.push(ImageSample::new(id.clone(), pixels, label)?);
        if have_all_masks {
            let mask_path = masks_dir.join(format!("{id}.png"));
            if mask_path.exists() {
                references.push(load_mask(&mask_path, id)?);
            } else {
                have_all_masks = false;
            }
        }
    }
    Ok(Dataset {
        meta,
        samples,
        references: have_all_masks.then_some(references),
    })
}

fn load_voc(dir: &Path, split: &str) -> Result<Dataset> {
    let classes_path = dir.join("classes.txt");
    let classes_text = std::fs::read_to_string(&classes_path).map_err(|e| {
        Error::config(format!(
            "VOC-style dataset needs {}: {e}",
            classes_path.display()
        ))
    })?;
    let class_names: Vec<String> = classes_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if class_names.is_empty() {
        return Err(Error::config("classes.txt lists no classes"));
    }
    let num_classes = class_names.len();

    let list_path = dir.join("ImageSets/Segmentation").join(format!("{split}.txt"));
    let list = std::fs::read_to_string(&list_path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", list_path.display())))?;
    let mut ids: Vec<String> = list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::config(format!("{} lists no images", list_path.display())));
    }

    let mut samples = Vec::with_capacity(ids.len());
    let mut references = Vec::with_capacity(ids.len());
    for id in &ids {
        let img_path = find_image(&dir.join("JPEGImages"), id).ok_or_else(|| {
            Error::config(format!("no image for id {id} under JPEGImages/"))
        })?;
        let pixels = load_image_tensor(&img_path)?;
        let mask = load_mask(&dir.join("SegmentationClass").join(format!("{id}.png")), id)?;
        let mut hot = vec![false; num_classes];
        for &l in &mask.labels {
            let l = l as usize;
            if l == 0 {
                continue;
            }
            if l > num_classes {
                return Err(Error::config(format!(
                    "mask for {id} holds label {l} but there are {num_classes} classes; \
                     remap void pixels to 0 first"
                )));
            }
            hot[l - 1] = true;
        }
        samples.push(ImageSample::new(id.clone(), pixels, hot)?);
        references.push(mask);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            num_classes,
            class_names,
            size: None,
            seed: None,
        },
        samples,
        references: Some(references),
    })
}

fn resize_tensor(src: &Tensor3<Real>, h: usize, w: usize) -> Tensor3<Real> {
    let mut out = Tensor3::zeros(src.channels(), h, w);
    for c in 0..src.channels() {
        let plane = bilinear_resize(src.channel(c), src.height(), src.width(), h, w);
        out.channel_mut(c).copy_from_slice(&plane);
    }
    out
}

/// Random rescale, crop, and horizontal flip; deterministic for a given
/// stream seed. Images smaller than the crop window are used whole.
pub fn augment_sample(
    sample: &ImageSample<Real>,
    cfg: &AugmentConfig,
    stream_seed: u64,
) -> ImageSample<Real> {
    if !cfg.enabled {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let (_, h, w) = sample.pixels.shape();
    let scale = rng.gen_range(cfg.rescale_min..=cfg.rescale_max);
    let nh = ((h as f64 * scale).round() as usize).max(16);
    let nw = ((w as f64 * scale).round() as usize).max(16);
    let mut pixels = resize_tensor(&sample.pixels, nh, nw);
    if cfg.crop < nh && cfg.crop < nw {
        let oy = rng.gen_range(0..=nh - cfg.crop);
        let ox = rng.gen_range(0..=nw - cfg.crop);
        pixels = Tensor3::from_fn(3, cfg.crop, cfg.crop, |c, y, x| {
            pixels.at(c, y + oy, x + ox)
        });
    }
    if cfg.hflip && rng.gen_bool(0.5) {
        let (c, hh, ww) = pixels.shape();
        pixels = Tensor3::from_fn(c, hh, ww, |ci, y, x| pixels.at(ci, y, ww - 1 - x));
    }
    ImageSample {
        id: sample.id.clone(),
        pixels,
        label: sample.label.clone(),
    }
}
