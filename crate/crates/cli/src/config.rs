//! Run configuration: one TOML file, every key overridable by a CLI flag.
//!
//! Defaults mirror the published training recipe (SGD at 2.5e-4 with cosine
//! annealing, weight decay 1e-4, momentum 0.9, batch 16, 10 epochs, 512 px
//! crops). Toy runs override the scale-sensitive keys in the config file
//! that `make-toy` emits next to the dataset.

use pole_core::adapter::GateMode;
use pole_core::{fnv1a64, Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mock,
    ClipResnet50,
    ClipVitB16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Required when `kind = "mock"`.
    pub mock_seed: Option<u64>,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Mock,
            mock_seed: None,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub prefix: String,
    pub terminator: String,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            prefix: "A photo of ".into(),
            terminator: ".".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub epochs: u32,
    pub batch_size: u32,
    /// Clip the global gradient norm (over every trained parameter) to
    /// this value before the momentum update; absent = no clipping.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.00025,
            weight_decay: 1e-4,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            epochs: 10,
            batch_size: 16,
            clip_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    pub sim_eps: f64,
    pub temperature: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            sim_eps: 1e-12,
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateModeConfig {
    /// No adapters in the path at all.
    Off,
    /// Gate pinned at `gate_value`; only the MLPs train.
    Fixed,
    /// Gate is a trained per-dimension vector.
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Bottleneck width; defaults to `dim / 4`.
    pub hidden: Option<usize>,
    pub gate_mode: GateModeConfig,
    pub gate_value: f64,
    /// Clamp trained gates into `[0, 1]` after each step.
    pub clamp_gate: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            hidden: None,
            gate_mode: GateModeConfig::Learnable,
            gate_value: 0.5,
            clamp_gate: false,
        }
    }
}

impl AdapterConfig {
    pub fn gate_mode(&self) -> GateMode {
        match self.gate_mode {
            GateModeConfig::Off => GateMode::Off,
            GateModeConfig::Fixed => GateMode::Fixed(self.gate_value),
            GateModeConfig::Learnable => GateMode::Learnable,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Lock selection records once this many epochs have completed;
    /// absent = reselect at every forward pass.
    pub freeze_epoch: Option<u32>,
    /// Score the adapter-refined visual embedding instead of the raw one.
    pub after_adapter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels per stride-2 stage; stride is `2^len`.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![8, 12, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop: usize,
    pub rescale_min: f64,
    pub rescale_max: f64,
    pub hflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop: 512,
            rescale_min: 0.75,
            rescale_max: 1.25,
            hflip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub pools: PathBuf,
    pub out_dir: PathBuf,
    /// Candidate pool size counted *including* the ground-truth name
    /// (`pool_size = m + 1`); 1 reproduces the fixed-prompt baseline.
    #[serde(default = "default_pool_size")]
    pub pool_size: u32,
    /// Image-set split used by VOC-style dataset trees; the flat toy layout
    /// ignores it.
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Background threshold used when activation maps become pseudo-masks.
    #[serde(default = "default_bg_threshold")]
    pub bg_threshold: f64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub template: TemplateConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_pool_size() -> u32 {
    4
}
fn default_split() -> String {
    "train".into()
}
fn default_seed() -> u64 {
    7
}
fn default_bg_threshold() -> f64 {
    0.25
}

impl RunConfig {
    /// Parse a TOML config file; relative paths inside it resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.dataset = resolve(base, &cfg.dataset);
        cfg.pools = resolve(base, &cfg.pools);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.exists() {
            return Err(Error::config(format!(
                "dataset path does not exist: {}",
                self.dataset.display()
            )));
        }
        if !self.pools.exists() {
            return Err(Error::config(format!(
                "synonym pool file does not exist: {}",
                self.pools.display()
            )));
        }
        if self.pool_size == 0 {
            return Err(Error::config("pool_size must be at least 1 (the ground truth)"));
        }
        if self.encoder.dim == 0 {
            return Err(Error::config("encoder dim must be positive"));
        }
        if self.encoder.kind == EncoderKind::Mock && self.encoder.mock_seed.is_none() {
            return Err(Error::config("encoder kind \"mock\" requires mock_seed"));
        }
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(c) = self.optimizer.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip_grad_norm must be positive"));
            }
        }
        if !(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 || self.loss.lambda < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(self.loss.sim_eps > 0.0 && self.loss.sim_eps < 0.5) {
            return Err(Error::config("sim_eps must lie in (0, 0.5)"));
        }
        if let Some(t) = self.loss.temperature {
            if t <= 0.0 {
                return Err(Error::config("temperature must be positive"));
            }
        }
        if !(self.bg_threshold > 0.0 && self.bg_threshold < 1.0) {
            return Err(Error::config("bg_threshold must lie in (0, 1)"));
        }
        if self.backbone.channels.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.augment.enabled {
            if self.augment.crop < 16 {
                return Err(Error::config("augment crop must be at least 16"));
            }
            if !(self.augment.rescale_min > 0.0
                && self.augment.rescale_max >= self.augment.rescale_min)
            {
                return Err(Error::config("augment rescale range is invalid"));
            }
        }
        Ok(())
    }

    /// Synonyms kept per class: the pool size minus the ground-truth slot.
    pub fn synonym_budget(&self) -> i64 {
        self.pool_size as i64 - 1
    }

    /// Hash over everything that affects training math (the output
    /// directory is deliberately excluded so a resumed run may write
    /// elsewhere).
    pub fn semantic_hash(&self) -> u64 {
        let mut clone = self.clone();
        clone.out_dir = PathBuf::new();
        let canonical = serde_json::to_string(&clone).expect("config serializes");
        fnv1a64(canonical.as_bytes())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One CLI flag per config key; set flags win over the file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub pools: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Candidate pool size including the ground-truth name (m + 1).
    #[arg(long)]
    pub pool_size: Option<u32>,
    /// Image-set split for VOC-style trees.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bg_threshold: Option<f64>,
    /// Encoder kind: mock | clip-resnet50 | clip-vit-b16.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub mock_seed: Option<u64>,
    #[arg(long)]
    pub encoder_dim: Option<usize>,
    #[arg(long)]
    pub template_prefix: Option<String>,
    #[arg(long)]
    pub template_terminator: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Learning-rate schedule: cosine | constant.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sim_eps: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub adapter_hidden: Option<usize>,
    /// Gate mode: off | fixed | learnable.
    #[arg(long)]
    pub gate_mode: Option<String>,
    #[arg(long)]
    pub gate_value: Option<f64>,
    #[arg(long)]
    pub clamp_gate: Option<bool>,
    #[arg(long)]
    pub freeze_selection_epoch: Option<u32>,
    #[arg(long)]
    pub select_after_adapter: Option<bool>,
    /// Comma-separated stage widths, e.g. "8,12,16".
    #[arg(long)]
    pub backbone_channels: Option<String>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub hflip: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = &$value {
                    $field = v.clone();
                }
            };
        }
        set!(cfg.dataset, self.dataset);
        set!(cfg.pools, self.pools);
        set!(cfg.out_dir, self.out_dir);
        set!(cfg.pool_size, self.pool_size);
        set!(cfg.split, self.split);
        set!(cfg.seed, self.seed);
        set!(cfg.bg_threshold, self.bg_threshold);
        if let Some(kind) = &self.encoder {
            cfg.encoder.kind = match kind.as_str() {
                "mock" => EncoderKind::Mock,
                "clip-resnet50" => EncoderKind::ClipResnet50,
                "clip-vit-b16" => EncoderKind::ClipVitB16,
                other => {
                    return Err(Error::config(format!(
                        "unknown encoder kind {other:?} (expected mock | clip-resnet50 | clip-vit-b16)"
                    )))
                }
            };
        }
        if self.mock_seed.is_some() {
            cfg.encoder.mock_seed = self.mock_seed;
        }
        set!(cfg.encoder.dim, self.encoder_dim);
        set!(cfg.template.prefix, self.template_prefix);
        set!(cfg.template.terminator, self.template_terminator);
        set!(cfg.optimizer.lr, self.lr);
        set!(cfg.optimizer.weight_decay, self.weight_decay);
        set!(cfg.optimizer.momentum, self.momentum);
        if let Some(s) = &self.schedule {
            cfg.optimizer.schedule = match s.as_str() {
                "cosine" => Schedule::Cosine,
                "constant" => Schedule::Constant,
                other => {
                    return Err(Error::config(format!(
                        "unknown schedule {other:?} (expected cosine | constant)"
                    )))
                }
            };
        }
        set!(cfg.optimizer.epochs, self.epochs);
        set!(cfg.optimizer.batch_size, self.batch_size);
        if self.clip_grad_norm.is_some() {
            cfg.optimizer.clip_grad_norm = self.clip_grad_norm;
        }
        set!(cfg.loss.alpha, self.alpha);
        set!(cfg.loss.beta, self.beta);
        set!(cfg.loss.lambda, self.lambda);
        set!(cfg.loss.sim_eps, self.sim_eps);
        if self.temperature.is_some() {
            cfg.loss.temperature = self.temperature;
        }
        if self.adapter_hidden.is_some() {
            cfg.adapter.hidden = self.adapter_hidden;
        }
        if let Some(mode) = &self.gate_mode {
            cfg.adapter.gate_mode = match mode.as_str() {
                "off" => GateModeConfig::Off,
                "fixed" => GateModeConfig::Fixed,
                "learnable" => GateModeConfig::Learnable,
                other => {
                    return Err(Error::config(format!(
                        "unknown gate mode {other:?} (expected off | fixed | learnable)"
                    )))
                }
            };
        }
        set!(cfg.adapter.gate_value, self.gate_value);
        set!(cfg.adapter.clamp_gate, self.clamp_gate);
        if self.freeze_selection_epoch.is_some() {
            cfg.selection.freeze_epoch = self.freeze_selection_epoch;
        }
        set!(cfg.selection.after_adapter, self.select_after_adapter);
        if let Some(list) = &self.backbone_channels {
            let channels: std::result::Result<Vec<usize>, _> =
                list.split(',').map(|s| s.trim().parse()).collect();
            cfg.backbone.channels = channels
                .map_err(|e| Error::config(format!("bad backbone channel list {list:?}: {e}")))?;
        }
        set!(cfg.augment.enabled, self.augment);
        set!(cfg.augment.crop, self.crop);
        set!(cfg.augment.hflip, self.hflip);
        Ok(cfg)
    }
}
