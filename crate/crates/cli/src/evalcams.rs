//! CAM evaluation: dump per-image activation maps, derive pseudo-masks, and
//! score them against the dataset's reference masks.
//!
//! Map blobs are row-major little-endian `f32` with a JSON sidecar carrying
//! the shape, so a dump can be reloaded bit for bit by any consumer.

use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::dataset::save_mask;
use crate::trainer::{build_components, forward_maps, Components};
use pole_core::cam::ActivationMaps;
use pole_core::pseudo::{cams_to_pseudo_mask, evaluate_miou, EvalReport, PseudoMask};
use pole_core::{Error, Real, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamSidecar {
    pub image_id: String,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub class_indices: Vec<usize>,
}

/// Run metadata stored with an evaluation so reports can label and sort
/// runs without re-reading configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub pool_size: u32,
    pub gate_mode: String,
    pub dataset: String,
    pub epoch: u32,
    pub bg_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFile {
    pub run: RunMeta,
    pub report: EvalReport<Real>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    /// Present when reference masks were available.
    pub report: Option<EvalReport<Real>>,
}

pub fn write_cam_dump(dir: &Path, id: &str, maps: &ActivationMaps<Real>) -> Result<()> {
    let (k, h, w) = maps.values.shape();
    let side = CamSidecar {
        image_id: id.to_string(),
        k,
        h,
        w,
        class_indices: (0..k).collect(),
    };
    let mut bytes = Vec::with_capacity(k * h * w * 4);
    for v in maps.values.as_slice() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(dir.join(format!("{id}.bin")))
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::config(format!("cam blob write failed: {e}")))?;
    std::fs::write(
        dir.join(format!("{id}.json")),
        serde_json::to_string(&side).unwrap(),
    )
    .map_err(|e| Error::config(format!("cam sidecar write failed: {e}")))?;
    Ok(())
}

pub fn read_cam_dump(dir: &Path, id: &str) -> Result<(CamSidecar, Vec<f32>)> {
    let side: CamSidecar = serde_json::from_str(
        &std::fs::read_to_string(dir.join(format!("{id}.json")))
            .map_err(|e| Error::config(format!("cam sidecar read failed: {e}")))?,
    )
    .map_err(|e| Error::config(format!("cam sidecar parse failed: {e}")))?;
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(format!("{id}.bin")))
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::config(format!("cam blob read failed: {e}")))?;
    if bytes.len() != side.k * side.h * side.w * 4 {
        return Err(Error::config(format!(
            "cam blob for {id} holds {} bytes, sidecar wants {}",
            bytes.len(),
            side.k * side.h * side.w * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((side, values))
}

/// Evaluate a checkpoint over the configured dataset: writes CAM dumps and
/// pseudo-masks, then scores against reference masks when they exist.
pub fn eval_cams(cfg: &RunConfig, checkpoint_path: &Path, out_dir: &Path, label: &str) -> Result<EvalOutcome> {
    let comps = build_components(cfg)?;
    let (state, saved_hash) = checkpoint::load(checkpoint_path)?;
    if saved_hash != cfg.semantic_hash() {
        return Err(Error::config(format!(
            "checkpoint {} does not match this configuration",
            checkpoint_path.display()
        )));
    }
    eval_with_state(cfg, &comps, &state, out_dir, label)
}

/// As [`eval_cams`] with an already-loaded state (used by tests and the
/// training smoke path).
pub fn eval_with_state(
    cfg: &RunConfig,
    comps: &Components,
    state: &TrainState,
    out_dir: &Path,
    label: &str,
) -> Result<EvalOutcome> {
    let cam_dir = out_dir.join("cams");
    let mask_dir = out_dir.join("pseudo");
    std::fs::create_dir_all(&cam_dir)
        .and_then(|_| std::fs::create_dir_all(&mask_dir))
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut predictions: Vec<PseudoMask> = Vec::with_capacity(comps.dataset.samples.len());
    for sample in &comps.dataset.samples {
        let (_, maps) = forward_maps(&state.backbone, &state.head, sample)?;
        write_cam_dump(&cam_dir, &sample.id, &maps)?;
        let (_, h, w) = sample.pixels.shape();
        let mask = cams_to_pseudo_mask(&maps, &sample.label, cfg.bg_threshold, &sample.id, h, w)?;
        save_mask(&mask_dir.join(format!("{}.png", sample.id)), &mask)?;
        predictions.push(mask);
    }

    let report = match &comps.dataset.references {
        None => {
            eprintln!(
                "warning: dataset {} ships no reference masks; dumps written, evaluation skipped",
                cfg.dataset.display()
            );
            None
        }
        Some(refs) => {
            let report =
                evaluate_miou::<Real>(&predictions, refs, comps.dataset.num_classes())?;
            let file = EvalFile {
                run: RunMeta {
                    label: label.to_string(),
                    pool_size: cfg.pool_size,
                    gate_mode: format!("{:?}", cfg.adapter.gate_mode).to_lowercase(),
                    dataset: cfg.dataset.display().to_string(),
                    epoch: state.epoch,
                    bg_threshold: cfg.bg_threshold,
                },
                report: report.clone(),
            };
            std::fs::write(
                out_dir.join("eval.json"),
                serde_json::to_string_pretty(&file).unwrap(),
            )
            .map_err(|e| Error::config(format!("eval report write failed: {e}")))?;
            Some(report)
        }
    };

    Ok(EvalOutcome {
        out_dir: out_dir.to_path_buf(),
        report,
    })
}
