//! The training loop.
//!
//! Per step: backbone features → raw CAMs → sigmoid maps → (re)select class
//! tokens → masked embeddings through the adapters → classification loss +
//! contrastive loss → SGD with momentum and cosine-annealed learning rate.
//! Every stochastic stream is derived from the run seed, reductions are
//! sequential, and checkpoints serialize the full optimizer state, so two
//! runs of the same configuration produce byte-identical artifacts and a
//! resumed run rejoins a straight-through run exactly.

use crate::checkpoint::{self, TrainState};
use crate::config::{EncoderKind, GateModeConfig, RunConfig, Schedule};
use crate::dataset::{augment_sample, load_dataset, Dataset};
use pole_core::adapter::{init_adapter, AdapterGrads};
use pole_core::backbone::ConvStub;
use pole_core::cam::{
    classification_logits, classification_logits_vjp, compute_raw_cam, multilabel_soft_margin_grad,
    multilabel_soft_margin_loss, raw_cam_vjp, sigmoid_normalize, sigmoid_normalize_vjp,
    ActivationMaps, ClassifierHead, FeatureMap, ImageSample,
};
use pole_core::encoder::{EncoderPair, Modality};
use pole_core::objective::{batch_objective, AdapterSet, LossWeights};
use pole_core::prompt::{
    load_pools, truncate_pool, validate_pools_against, PromptTemplate, SynonymPool,
};
use pole_core::selector::{select_for_batch, SelectionRecord};
use pole_core::tensor::Tensor3;
use pole_core::{derive_seed, Error, Real, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything immutable a run needs, assembled from the configuration.
pub struct Components {
    pub dataset: Dataset,
    pub pools: BTreeMap<usize, SynonymPool>,
    pub template: PromptTemplate,
    pub encoder: EncoderPair<Real>,
    pub loss_weights: LossWeights<Real>,
}

/// Build the encoder pair named in the configuration. Honors the
/// `POLE_CACHE_DIR` environment variable for the text-embedding cache.
pub fn build_encoder(cfg: &RunConfig) -> Result<EncoderPair<Real>> {
    let enc = match cfg.encoder.kind {
        EncoderKind::Mock => {
            let seed = cfg
                .encoder
                .mock_seed
                .ok_or_else(|| Error::config("mock encoder requires mock_seed"))?;
            EncoderPair::mock(seed, cfg.encoder.dim)
        }
        EncoderKind::ClipResnet50 | EncoderKind::ClipVitB16 => {
            return Err(Error::config(
                "pretrained encoder weights are not bundled with this build; \
                 use encoder kind \"mock\" for self-contained runs",
            ))
        }
    };
    match std::env::var_os("POLE_CACHE_DIR") {
        Some(dir) => enc.with_disk_cache(Path::new(&dir)),
        None => Ok(enc),
    }
}

pub fn build_components(cfg: &RunConfig) -> Result<Components> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset, &cfg.split)?;
    let raw_pools = load_pools(&cfg.pools)?;
    validate_pools_against(&raw_pools, &dataset.meta.class_names)?;
    let mut pools = BTreeMap::new();
    for (k, pool) in &raw_pools {
        pools.insert(*k, truncate_pool(pool, cfg.synonym_budget())?);
    }
    let template = PromptTemplate::new(cfg.template.prefix.clone(), cfg.template.terminator.clone());
    let encoder = build_encoder(cfg)?;
    let loss_weights = LossWeights {
        alpha: cfg.loss.alpha,
        beta: cfg.loss.beta,
        sim_eps: cfg.loss.sim_eps,
        temperature: cfg.loss.temperature,
    };
    Ok(Components {
        dataset,
        pools,
        template,
        encoder,
        loss_weights,
    })
}

/// Fresh training state from the run seed.
pub fn init_state(cfg: &RunConfig, num_classes: usize) -> Result<TrainState> {
    let backbone = ConvStub::new(3, &cfg.backbone.channels, derive_seed(cfg.seed, "backbone"));
    let head = ClassifierHead::init(
        backbone_out_channels(cfg),
        num_classes,
        derive_seed(cfg.seed, "head"),
    );
    let dim = cfg.encoder.dim;
    let hidden = cfg.adapter.hidden.unwrap_or_else(|| (dim / 4).max(1));
    let mut adapter_visual = init_adapter(dim, hidden, Modality::Visual, derive_seed(cfg.seed, "adapter-visual"))?;
    let mut adapter_text = init_adapter(dim, hidden, Modality::Text, derive_seed(cfg.seed, "adapter-text"))?;
    if cfg.adapter.gate_mode == GateModeConfig::Fixed {
        adapter_visual.pin_gate(cfg.adapter.gate_value);
        adapter_text.pin_gate(cfg.adapter.gate_value);
    }
    Ok(TrainState {
        mom_head: vec![0.0; head.weights.as_slice().len()],
        mom_backbone: vec![0.0; backbone.num_params()],
        mom_adapter_visual: vec![0.0; adapter_visual.num_params()],
        mom_adapter_text: vec![0.0; adapter_text.num_params()],
        head,
        backbone,
        adapter_visual,
        adapter_text,
        epoch: 0,
        global_step: 0,
        frozen_selections: None,
    })
}

fn backbone_out_channels(cfg: &RunConfig) -> usize {
    *cfg.backbone.channels.last().expect("validated nonempty")
}

/// Forward a sample to its sigmoid-normalized activation maps.
pub fn forward_maps(
    backbone: &ConvStub<Real>,
    head: &ClassifierHead<Real>,
    sample: &ImageSample<Real>,
) -> Result<(FeatureMap<Real>, ActivationMaps<Real>)> {
    let features = backbone.forward_cached(&sample.pixels).0;
    let maps = sigmoid_normalize(&compute_raw_cam(&features, head)?)?;
    Ok((features, maps))
}

/// Selection over a whole dataset with the current weights (no
/// augmentation), used by the `select` command and by selection freezing.
pub fn select_over_dataset(
    cfg: &RunConfig,
    comps: &Components,
    state: &TrainState,
) -> Result<Vec<SelectionRecord<Real>>> {
    let mut maps = Vec::with_capacity(comps.dataset.samples.len());
    for sample in &comps.dataset.samples {
        maps.push(forward_maps(&state.backbone, &state.head, sample)?.1);
    }
    let refine = (cfg.selection.after_adapter && cfg.adapter.gate_mode != GateModeConfig::Off)
        .then_some(&state.adapter_visual);
    select_for_batch(
        &comps.dataset.samples,
        &maps,
        &comps.pools,
        &comps.template,
        &comps.encoder,
        refine,
    )
}

/// Losses and parameter gradients for one batch at the current state.
pub struct BatchComputation {
    pub cls_loss: Real,
    pub cont_loss: Real,
    pub per_sample_cont: Vec<Real>,
    /// Flat layout matching the head weight slice; includes both the
    /// classification path and the λ-scaled contrastive path.
    pub head_grad: Vec<Real>,
    /// Flat layout matching [`ConvStub::params_flat`].
    pub backbone_grad: Vec<Real>,
    /// Contrastive-only adapter gradients, not yet λ-scaled.
    pub visual_adapter_grads: Option<AdapterGrads<Real>>,
    pub text_adapter_grads: Option<AdapterGrads<Real>>,
}

/// Full forward and backward of one batch: classification and contrastive
/// losses plus the gradients the optimizer consumes. Pure in the state.
pub fn compute_batch(
    cfg: &RunConfig,
    comps: &Components,
    state: &TrainState,
    batch_samples: &[ImageSample<Real>],
) -> Result<BatchComputation> {
    let b = batch_samples.len();
    let inv_b = 1.0 / b as Real;
    let lambda = cfg.loss.lambda;
    let adapters_on = cfg.adapter.gate_mode != GateModeConfig::Off;

    // forward
    let mut features = Vec::with_capacity(b);
    let mut caches = Vec::with_capacity(b);
    let mut maps = Vec::with_capacity(b);
    let mut cls_loss = 0.0;
    let mut logit_grads = Vec::with_capacity(b);
    for sample in batch_samples {
        let (feat, cache) = state.backbone.forward_cached(&sample.pixels);
        if !feat.values.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite features for image {}",
                sample.id
            )));
        }
        let raw = compute_raw_cam(&feat, &state.head)?;
        let normalized = sigmoid_normalize(&raw)?;
        let logits = classification_logits(&feat, &state.head)?;
        cls_loss += multilabel_soft_margin_loss(&logits, &sample.label)? * inv_b;
        let mut g = multilabel_soft_margin_grad(&logits, &sample.label)?;
        for v in g.iter_mut() {
            *v *= inv_b;
        }
        logit_grads.push(g);
        features.push(feat);
        caches.push(cache);
        maps.push(normalized);
    }

    // class-token selection
    let live_selection;
    let selections: &[SelectionRecord<Real>] = match &state.frozen_selections {
        Some(frozen) => frozen,
        None => {
            let refine = (cfg.selection.after_adapter && adapters_on)
                .then_some(&state.adapter_visual);
            live_selection = select_for_batch(
                batch_samples,
                &maps,
                &comps.pools,
                &comps.template,
                &comps.encoder,
                refine,
            )?;
            &live_selection
        }
    };

    // contrastive objective with gradient taps
    let adapter_set = adapters_on.then(|| AdapterSet {
        visual: state.adapter_visual.clone(),
        text: state.adapter_text.clone(),
    });
    let taps = batch_objective(
        batch_samples,
        &maps,
        selections,
        adapter_set.as_ref(),
        &comps.encoder,
        &comps.template,
        &comps.loss_weights,
    )?;

    // backward through sigmoid, CAM head, GAP head, backbone
    let c = state.head.channels();
    let mut head_grad = vec![0.0; state.head.weights.as_slice().len()];
    let mut backbone_grad = vec![0.0; state.backbone.num_params()];
    for i in 0..b {
        let mut d_maps = taps.map_grads[i].clone();
        for v in d_maps.as_mut_slice() {
            *v *= lambda;
        }
        let d_raw = sigmoid_normalize_vjp(&maps[i], &d_maps);
        let (gw_cam, gf_cam) = raw_cam_vjp(&features[i], &state.head, &d_raw);
        let (gw_cls, gf_cls) =
            classification_logits_vjp(&features[i], &state.head, &logit_grads[i]);
        for (acc, (a, b)) in head_grad
            .iter_mut()
            .zip(gw_cam.as_slice().iter().zip(gw_cls.as_slice().iter()))
        {
            *acc += a + b;
        }
        let (fc, fh, fw) = features[i].values.shape();
        debug_assert_eq!(fc, c);
        let mut gf = Tensor3::zeros(fc, fh, fw);
        for (o, (a, b)) in gf
            .as_mut_slice()
            .iter_mut()
            .zip(gf_cam.as_slice().iter().zip(gf_cls.as_slice().iter()))
        {
            *o = a + b;
        }
        let bg = state.backbone.backward(&caches[i], &gf);
        for (acc, g) in backbone_grad.iter_mut().zip(bg.iter()) {
            *acc += g;
        }
    }

    Ok(BatchComputation {
        cls_loss,
        cont_loss: taps.loss,
        per_sample_cont: taps.per_sample_loss,
        head_grad,
        backbone_grad,
        visual_adapter_grads: taps.visual_adapter_grads,
        text_adapter_grads: taps.text_adapter_grads,
    })
}

fn sgd_step(params: &mut [Real], grads: &[Real], mom: &mut [Real], lr: Real, momentum: Real, wd: Real) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), mom.len());
    for i in 0..params.len() {
        let g = grads[i] + wd * params[i];
        mom[i] = momentum * mom[i] + g;
        params[i] -= lr * mom[i];
    }
}

fn learning_rate(cfg: &RunConfig, step: u64, total_steps: u64) -> Real {
    match cfg.optimizer.schedule {
        Schedule::Constant => cfg.optimizer.lr,
        Schedule::Cosine => {
            let t = step as Real / total_steps.max(1) as Real;
            cfg.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub first_total: Real,
    pub last_total: Real,
    pub steps: u64,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Run (or resume) training under a configuration.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    let comps = build_components(cfg)?;
    let n = comps.dataset.samples.len();
    let k = comps.dataset.num_classes();
    let batch = cfg.optimizer.batch_size as usize;
    let epochs = cfg.optimizer.epochs;
    let config_hash = cfg.semantic_hash();

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", cfg.out_dir.display())))?;

    let mut state = match resume {
        Some(path) => {
            let (state, saved_hash) = checkpoint::load(path)?;
            if saved_hash != config_hash {
                return Err(Error::config(format!(
                    "checkpoint {} was trained under a different configuration \
                     (hash {saved_hash:016x}, current {config_hash:016x})",
                    path.display()
                )));
            }
            if state.epoch > epochs {
                return Err(Error::config(format!(
                    "checkpoint has {} completed epochs but the run wants {epochs}",
                    state.epoch
                )));
            }
            state
        }
        None => {
            let state = init_state(cfg, k)?;
            checkpoint::save(&checkpoint_path(&cfg.out_dir, 0), &state, config_hash)?;
            state
        }
    };

    let encoder_checksum = comps.encoder.state_checksum();
    let batches_per_epoch = n.div_ceil(batch) as u64;
    let total_steps = epochs as u64 * batches_per_epoch;
    let lambda = cfg.loss.lambda;
    let adapters_on = cfg.adapter.gate_mode != GateModeConfig::Off;

    let csv_path = cfg.out_dir.join("loss.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", csv_path.display())))?;
    writeln!(csv, "step,cls_loss,cont_loss,total").map_err(io_err)?;

    let mut first_total = None;
    let mut last_total = 0.0;

    for epoch in state.epoch..epochs {
        // lock selection records once the configured number of epochs is done
        if let Some(freeze_at) = cfg.selection.freeze_epoch {
            if epoch >= freeze_at && state.frozen_selections.is_none() {
                state.frozen_selections = Some(select_over_dataset(cfg, &comps, &state)?);
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle-epoch-{epoch}")));
        order.shuffle(&mut rng);

        for chunk in order.chunks(batch) {
            let step = state.global_step;
            let batch_samples: Vec<ImageSample<Real>> = chunk
                .iter()
                .map(|&idx| {
                    let sample = &comps.dataset.samples[idx];
                    if cfg.augment.enabled {
                        augment_sample(
                            sample,
                            &cfg.augment,
                            derive_seed(cfg.seed, &format!("augment-{epoch}-{idx}")),
                        )
                    } else {
                        sample.clone()
                    }
                })
                .collect();
            let batch = match compute_batch(cfg, &comps, &state, &batch_samples) {
                Ok(b) => b,
                Err(Error::Numeric(msg)) => {
                    let dump = write_nan_dump(cfg, epoch, step, &batch_samples, None, None);
                    return Err(Error::Numeric(format!(
                        "{msg} at epoch {epoch}, step {step}; batch dumped to {}",
                        dump.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            let mut batch = batch;
            let clip_scale = grad_clip_scale(cfg, &batch);
            if clip_scale < 1.0 {
                for g in batch.head_grad.iter_mut() {
                    *g *= clip_scale;
                }
                for g in batch.backbone_grad.iter_mut() {
                    *g *= clip_scale;
                }
            }
            let (cls_loss, cont_loss) = (batch.cls_loss, batch.cont_loss);
            let total = cls_loss + lambda * cont_loss;
            if !total.is_finite() {
                let dump = write_nan_dump(
                    cfg,
                    epoch,
                    step,
                    &batch_samples,
                    Some((cls_loss, cont_loss)),
                    Some(&batch.per_sample_cont),
                );
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step}; batch dumped to {}",
                    dump.display()
                )));
            }

            // optimizer step
            let lr = learning_rate(cfg, step, total_steps);
            let momentum = cfg.optimizer.momentum;
            let wd = cfg.optimizer.weight_decay;
            {
                let mut head_params = state.head.weights.as_slice().to_vec();
                sgd_step(&mut head_params, &batch.head_grad, &mut state.mom_head, lr, momentum, wd);
                state
                    .head
                    .weights
                    .as_mut_slice()
                    .copy_from_slice(&head_params);
            }
            {
                let mut bb = state.backbone.params_flat();
                sgd_step(&mut bb, &batch.backbone_grad, &mut state.mom_backbone, lr, momentum, wd);
                state.backbone.set_params_flat(&bb);
            }
            if adapters_on {
                let gv = batch.visual_adapter_grads.as_ref().expect("adapters on");
                let gt = batch.text_adapter_grads.as_ref().expect("adapters on");
                apply_adapter_step(
                    &mut state.adapter_visual,
                    gv,
                    &mut state.mom_adapter_visual,
                    lr,
                    momentum,
                    wd,
                    lambda * clip_scale,
                    cfg,
                );
                apply_adapter_step(
                    &mut state.adapter_text,
                    gt,
                    &mut state.mom_adapter_text,
                    lr,
                    momentum,
                    wd,
                    lambda * clip_scale,
                    cfg,
                );
            }

            writeln!(csv, "{step},{cls_loss},{cont_loss},{total}").map_err(io_err)?;
            first_total.get_or_insert(total);
            last_total = total;
            state.global_step += 1;
        }

        state.epoch = epoch + 1;
        checkpoint::save(&checkpoint_path(&cfg.out_dir, state.epoch), &state, config_hash)?;
    }
    csv.sync_all().map_err(io_err)?;

    debug_assert_eq!(
        comps.encoder.state_checksum(),
        encoder_checksum,
        "frozen encoders must never change"
    );
    comps.encoder.persist_cache()?;

    // byte-identical to the last epoch checkpoint (the serializer is
    // deterministic), and well-defined even when no epoch ran
    let final_path = cfg.out_dir.join("final.ckpt");
    checkpoint::save(&final_path, &state, config_hash)?;

    Ok(TrainReport {
        out_dir: cfg.out_dir.clone(),
        final_checkpoint: final_path,
        first_total: first_total.unwrap_or(0.0),
        last_total,
        steps: state.global_step,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_adapter_step(
    params: &mut pole_core::adapter::AdapterParams<Real>,
    grads: &AdapterGrads<Real>,
    mom: &mut [Real],
    lr: Real,
    momentum: Real,
    wd: Real,
    grad_scale: Real,
    cfg: &RunConfig,
) {
    let mut flat = params.params_flat();
    let mut grad_flat = Vec::with_capacity(flat.len());
    grad_flat.extend_from_slice(grads.w1.as_slice());
    grad_flat.extend_from_slice(grads.w2.as_slice());
    grad_flat.extend_from_slice(&grads.gate);
    for g in grad_flat.iter_mut() {
        *g *= grad_scale;
    }
    let gate_offset = flat.len() - params.dim();
    if cfg.adapter.gate_mode == GateModeConfig::Fixed {
        // the gate is a pinned constant: no gradient, no decay
        for g in grad_flat[gate_offset..].iter_mut() {
            *g = 0.0;
        }
    }
    let wd_mask = |i: usize| {
        if cfg.adapter.gate_mode == GateModeConfig::Fixed && i >= gate_offset {
            0.0
        } else {
            wd
        }
    };
    for i in 0..flat.len() {
        let g = grad_flat[i] + wd_mask(i) * flat[i];
        mom[i] = momentum * mom[i] + g;
        flat[i] -= lr * mom[i];
    }
    if cfg.adapter.clamp_gate && cfg.adapter.gate_mode == GateModeConfig::Learnable {
        for v in flat[gate_offset..].iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    params.set_params_flat(&flat);
}

/// Scale factor that caps the global gradient norm at the configured
/// limit; 1.0 when clipping is off or the norm is already inside it.
fn grad_clip_scale(cfg: &RunConfig, batch: &BatchComputation) -> Real {
    let Some(limit) = cfg.optimizer.clip_grad_norm else {
        return 1.0;
    };
    let lambda = cfg.loss.lambda;
    let mut sq = 0.0;
    for g in batch.head_grad.iter().chain(batch.backbone_grad.iter()) {
        sq += g * g;
    }
    let include_gate = cfg.adapter.gate_mode == GateModeConfig::Learnable;
    for grads in [&batch.visual_adapter_grads, &batch.text_adapter_grads]
        .into_iter()
        .flatten()
    {
        for g in grads.w1.as_slice().iter().chain(grads.w2.as_slice()) {
            let s = lambda * g;
            sq += s * s;
        }
        if include_gate {
            for g in &grads.gate {
                let s = lambda * g;
                sq += s * s;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > limit {
        limit / norm
    } else {
        1.0
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::config(format!("i/o failure: {e}"))
}

/// Diagnostic dump for the batch that produced a numeric failure.
fn write_nan_dump(
    cfg: &RunConfig,
    epoch: u32,
    step: u64,
    batch: &[ImageSample<Real>],
    losses: Option<(Real, Real)>,
    per_sample: Option<&[Real]>,
) -> PathBuf {
    let diag = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "image_ids": batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "cls_loss": losses.map(|l| l.0),
        "cont_loss": losses.map(|l| l.1),
        "per_sample_cont_loss": per_sample,
    });
    let dump = cfg.out_dir.join("nan_dump.json");
    std::fs::write(&dump, serde_json::to_string_pretty(&diag).unwrap()).ok();
    dump
}
