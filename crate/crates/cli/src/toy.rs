//! Synthetic blob dataset for desk-scale runs.
//!
//! Each image is a noisy background with one or two colored discs; the disc
//! color identifies the class, the multi-hot label records which classes
//! were placed, and the paired reference mask is the exact rasterization.
//! Alongside the data, `write_dataset` emits a synonym file for the toy
//! class names and a ready-to-train `config.toml` tuned for this scale.

use crate::dataset::save_mask;
use pole_core::cam::ImageSample;
use pole_core::pseudo::PseudoMask;
use pole_core::tensor::Tensor3;
use pole_core::{derive_seed, Error, Real, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct ToyParams {
    pub count: usize,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
}

const COLOR_NAMES: [&str; 8] = [
    "red", "orange", "yellow", "green", "teal", "blue", "violet", "magenta",
];

/// Saturated palette color for class `k` of `num_classes`, by hue.
fn class_color(k: usize, num_classes: usize) -> [f64; 3] {
    let hue = k as f64 / num_classes as f64 * 360.0;
    hsv_to_rgb(hue, 0.8, 0.85)
}

pub fn class_name(k: usize, num_classes: usize) -> String {
    let hue = k as f64 / num_classes as f64 * 360.0;
    let bucket = ((hue / 45.0).floor() as usize) % 8;
    let base = COLOR_NAMES[bucket];
    // hue buckets repeat past eight classes; suffix keeps names unique
    if num_classes > 8 {
        format!("{base} disc {k}")
    } else {
        format!("{base} disc")
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(crate) struct Blob {
    pub(crate) class: usize,
    pub(crate) cy: f64,
    pub(crate) cx: f64,
    pub(crate) radius: f64,
}

/// Generate the dataset in memory: one (sample, reference mask) per image.
pub fn generate(params: &ToyParams) -> Result<Vec<(ImageSample<Real>, PseudoMask)>> {
    Ok(generate_detailed(params)?
        .into_iter()
        .map(|(s, m, _)| (s, m))
        .collect())
}

pub(crate) fn generate_detailed(
    params: &ToyParams,
) -> Result<Vec<(ImageSample<Real>, PseudoMask, Vec<Blob>)>> {
    if params.count == 0 || params.num_classes == 0 || params.size < 16 {
        return Err(Error::argument(
            "toy dataset needs count ≥ 1, classes ≥ 1, size ≥ 16",
        ));
    }
    if params.num_classes > 24 {
        return Err(Error::argument("toy palette supports at most 24 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "toy-dataset"));
    let size = params.size;
    let mut out = Vec::with_capacity(params.count);
    for i in 0..params.count {
        // textured background: per-channel base tone plus pixel noise
        let base: [f64; 3] = [
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
        ];
        let mut pixels = Tensor3::zeros(3, size, size);
        for c in 0..3 {
            let plane = pixels.channel_mut(c);
            for v in plane.iter_mut() {
                *v = (base[c] + rng.gen_range(-0.07..0.07)).clamp(0.0, 1.0);
            }
        }

        // choose one or two distinct classes and place non-overlapping discs
        let want = if params.num_classes > 1 && rng.gen_bool(0.4) {
            2
        } else {
            1
        };
        let mut classes: Vec<usize> = Vec::new();
        while classes.len() < want {
            let k = rng.gen_range(0..params.num_classes);
            if !classes.contains(&k) {
                classes.push(k);
            }
        }
        let mut blobs: Vec<Blob> = Vec::new();
        for &k in &classes {
            let mut placed = false;
            for _ in 0..40 {
                // discs large enough that global average pooling sees them
                let radius = rng.gen_range(size as f64 / 6.0..size as f64 / 4.0);
                let cy = rng.gen_range(radius + 1.0..size as f64 - radius - 1.0);
                let cx = rng.gen_range(radius + 1.0..size as f64 - radius - 1.0);
                let clear = blobs.iter().all(|b| {
                    let d = ((b.cy - cy).powi(2) + (b.cx - cx).powi(2)).sqrt();
                    d > b.radius + radius + 2.0
                });
                if clear {
                    blobs.push(Blob {
                        class: k,
                        cy,
                        cx,
                        radius,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed && blobs.is_empty() {
                return Err(Error::pipeline("could not place the first toy blob"));
            }
        }

        let mut labels = vec![0u8; size * size];
        let mut hot = vec![false; params.num_classes];
        for b in &blobs {
            hot[b.class] = true;
            let color = class_color(b.class, params.num_classes);
            let r2 = b.radius * b.radius;
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f64 + 0.5 - b.cy;
                    let dx = x as f64 + 0.5 - b.cx;
                    if dy * dy + dx * dx <= r2 {
                        labels[y * size + x] = (b.class + 1) as u8;
                        for c in 0..3 {
                            let v = (color[c] + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                            *pixels.at_mut(c, y, x) = v;
                        }
                    }
                }
            }
        }

        let id = format!("toy_{i:04}");
        let sample = ImageSample::new(id.clone(), pixels, hot)?;
        let mask = PseudoMask::new(id, size, size, labels)?;
        out.push((sample, mask, blobs));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PoolEntry<'a> {
    class: &'a str,
    class_index: usize,
    synonyms: Vec<String>,
    corpus: &'a str,
}

fn quantize_png(pixels: &Tensor3<Real>) -> image::RgbImage {
    let (c, h, w) = pixels.shape();
    assert_eq!(c, 3);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (pixels.at(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Write the toy dataset directory: images, masks, labels, meta, a synonym
/// file for the toy class names, and a training config tuned to this scale.
pub fn write_dataset(dir: &Path, params: &ToyParams) -> Result<()> {
    let data = generate(params)?;
    std::fs::create_dir_all(dir.join("images"))
        .and_then(|_| std::fs::create_dir_all(dir.join("masks")))
        .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;

    let mut labels: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (sample, mask) in &data {
        let img = quantize_png(&sample.pixels);
        img.save(dir.join("images").join(format!("{}.png", sample.id)))
            .map_err(|e| Error::config(format!("image write failed: {e}")))?;
        save_mask(&dir.join("masks").join(format!("{}.png", sample.id)), mask)?;
        labels.insert(
            sample.id.clone(),
            sample.label.iter().map(|&b| b as u8).collect(),
        );
    }
    let class_names: Vec<String> = (0..params.num_classes)
        .map(|k| class_name(k, params.num_classes))
        .collect();
    let meta = serde_json::json!({
        "num_classes": params.num_classes,
        "class_names": class_names,
        "size": params.size,
        "seed": params.seed,
    });
    write_text(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta).unwrap())?;
    write_text(
        &dir.join("labels.json"),
        &serde_json::to_string_pretty(&labels).unwrap(),
    )?;

    let pools: Vec<PoolEntry> = class_names
        .iter()
        .enumerate()
        .map(|(k, name)| PoolEntry {
            class: name,
            class_index: k,
            synonyms: vec![
                format!("{name} shape"),
                format!("{name} blob"),
                format!("round {name}"),
            ],
            corpus: "toy",
        })
        .collect();
    write_text(
        &dir.join("synonyms.json"),
        &serde_json::to_string_pretty(&pools).unwrap(),
    )?;

    write_text(&dir.join("config.toml"), &toy_config_toml(params))?;
    Ok(())
}

/// The training configuration emitted next to a toy dataset. Scale-bound
/// keys (learning rate, batch, epochs, backbone width, augmentation) are
/// pinned for the blob images; everything else keeps the library defaults.
fn toy_config_toml(params: &ToyParams) -> String {
    format!(
        r#"# training configuration for the toy blob dataset in this directory
dataset = "."
pools = "synonyms.json"
out_dir = "runs/train"
pool_size = 4
seed = {seed}
bg_threshold = 0.25

[encoder]
kind = "mock"
mock_seed = {seed}
dim = 64

[optimizer]
lr = 0.3
weight_decay = 0.0001
momentum = 0.9
schedule = "cosine"
epochs = 5
batch_size = 4
clip_grad_norm = 2.0

[loss]
alpha = 1.0
beta = 1.0
lambda = 1.0

[adapter]
hidden = 64
gate_mode = "learnable"

[backbone]
channels = [8, 12, 16]

[augment]
enabled = false
"#,
        seed = params.seed
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}
