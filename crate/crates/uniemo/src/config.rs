//! Run configuration: a flat `key = value` text format with typed defaults.
//!
//! Precedence (lowest to highest): built-in defaults, config file, the
//! `UNIEMO_SEED` environment variable (seed only), `--seed`, then `--set`
//! overrides in the order given. Unknown keys are rejected so typos fail
//! loudly instead of silently training with defaults.

use crate::autograd::Precision;
use crate::backbone::BackboneConfig;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Which fusion map combines the two CLS embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Gamma1,
    Gamma2,
    Gamma3,
    Gamma4,
}

impl FusionStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gamma1" => Some(Self::Gamma1),
            "gamma2" => Some(Self::Gamma2),
            "gamma3" => Some(Self::Gamma3),
            "gamma4" => Some(Self::Gamma4),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gamma1 => "gamma1",
            Self::Gamma2 => "gamma2",
            Self::Gamma3 => "gamma3",
            Self::Gamma4 => "gamma4",
        }
    }
}

/// Teacher implementation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    /// Deterministic seeded stand-in; no external weights.
    Stub,
    /// Adapter for externally supplied frozen weights.
    External,
}

impl TeacherKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stub" => Some(Self::Stub),
            "external" => Some(Self::External),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Stub => "stub",
            Self::External => "external",
        }
    }
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Self::Cosine),
            "constant" => Some(Self::Constant),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Constant => "constant",
        }
    }
}

/// Optimizer hyperparameters for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
}

/// Full run configuration. One instance drives pretraining, fine-tuning,
/// and evaluation; every field has a documented flat key.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub fusion_strategy: FusionStrategy,
    pub fusion_kappa: usize,
    pub teacher_kind: TeacherKind,
    pub teacher_seed: u64,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub ft_base_lr: f64,
    pub ft_weight_decay: f64,
    pub ft_beta1: f64,
    pub ft_beta2: f64,
    pub ft_warmup_steps: usize,
    pub ft_total_steps: usize,
    pub ft_batch_size: usize,
    pub num_classes: usize,
    pub mixup_alpha: f64,
    pub freeze_encoder: bool,
    pub val_fraction: f64,
    pub manifest: String,
    pub bins_per_channel: usize,
    pub split_candidates: usize,
    pub norm_pix: bool,
    pub norm_floor: bool,
    pub loss_w1: f64,
    pub loss_w2: f64,
    pub loss_w3: f64,
    pub eval_split: String,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backbone: BackboneConfig::default(),
            fusion_strategy: FusionStrategy::Gamma1,
            fusion_kappa: 4,
            teacher_kind: TeacherKind::Stub,
            teacher_seed: 0,
            optim: OptimConfig {
                base_lr: 1.5e-4,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.95,
                warmup_steps: 10,
                total_steps: 300,
                schedule: Schedule::Cosine,
            },
            batch_size: 16,
            checkpoint_every: 0,
            ft_base_lr: 1e-4,
            ft_weight_decay: 0.05,
            ft_beta1: 0.9,
            ft_beta2: 0.999,
            ft_warmup_steps: 10,
            ft_total_steps: 200,
            ft_batch_size: 16,
            num_classes: 8,
            mixup_alpha: 0.8,
            freeze_encoder: false,
            val_fraction: 0.1,
            manifest: String::new(),
            bins_per_channel: 16,
            split_candidates: 20,
            norm_pix: false,
            norm_floor: false,
            loss_w1: 1.0,
            loss_w2: 1.0,
            loss_w3: 1.0,
            eval_split: "val".to_string(),
            seed: 42,
            precision: Precision::Double,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::invalid(format!(
            "invalid value for {key}: {other:?} (expected true or false)"
        ))),
    }
}

impl Config {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "backbone.image_size" => self.backbone.image_size = parse_num(key, v)?,
            "backbone.patch" => self.backbone.patch = parse_num(key, v)?,
            "backbone.in_channels" => self.backbone.in_channels = parse_num(key, v)?,
            "backbone.encoder_width" => self.backbone.encoder_width = parse_num(key, v)?,
            "backbone.encoder_depth" => self.backbone.encoder_depth = parse_num(key, v)?,
            "backbone.encoder_heads" => self.backbone.encoder_heads = parse_num(key, v)?,
            "backbone.decoder_width" => self.backbone.decoder_width = parse_num(key, v)?,
            "backbone.decoder_depth" => self.backbone.decoder_depth = parse_num(key, v)?,
            "backbone.cls_proj_dim" => self.backbone.cls_proj_dim = parse_num(key, v)?,
            "backbone.mask_ratio" => self.backbone.mask_ratio = parse_num(key, v)?,
            "fusion.strategy" => {
                self.fusion_strategy = FusionStrategy::parse(v).ok_or_else(|| {
                    Error::invalid(format!(
                        "invalid value for {key}: {v:?} (expected gamma1|gamma2|gamma3|gamma4)"
                    ))
                })?;
            }
            "fusion.kappa" => self.fusion_kappa = parse_num(key, v)?,
            "teacher.kind" => {
                self.teacher_kind = TeacherKind::parse(v).ok_or_else(|| {
                    Error::invalid(format!(
                        "invalid value for {key}: {v:?} (expected stub|external)"
                    ))
                })?;
            }
            "teacher.seed" => self.teacher_seed = parse_num(key, v)?,
            "optim.base_lr" => self.optim.base_lr = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse_num(key, v)?,
            "optim.total_steps" => self.optim.total_steps = parse_num(key, v)?,
            "optim.schedule" => {
                self.optim.schedule = Schedule::parse(v).ok_or_else(|| {
                    Error::invalid(format!(
                        "invalid value for {key}: {v:?} (expected cosine|constant)"
                    ))
                })?;
            }
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "finetune.base_lr" => self.ft_base_lr = parse_num(key, v)?,
            "finetune.weight_decay" => self.ft_weight_decay = parse_num(key, v)?,
            "finetune.beta1" => self.ft_beta1 = parse_num(key, v)?,
            "finetune.beta2" => self.ft_beta2 = parse_num(key, v)?,
            "finetune.warmup_steps" => self.ft_warmup_steps = parse_num(key, v)?,
            "finetune.total_steps" => self.ft_total_steps = parse_num(key, v)?,
            "finetune.batch_size" => self.ft_batch_size = parse_num(key, v)?,
            "finetune.num_classes" => self.num_classes = parse_num(key, v)?,
            "finetune.mixup_alpha" => self.mixup_alpha = parse_num(key, v)?,
            "finetune.freeze_encoder" => self.freeze_encoder = parse_bool(key, v)?,
            "finetune.val_fraction" => self.val_fraction = parse_num(key, v)?,
            "data.manifest" => self.manifest = v.to_string(),
            "data.bins_per_channel" => self.bins_per_channel = parse_num(key, v)?,
            "data.split.candidates" => self.split_candidates = parse_num(key, v)?,
            "recon.norm_pix" => self.norm_pix = parse_bool(key, v)?,
            "distill.norm_floor" => self.norm_floor = parse_bool(key, v)?,
            "loss.w1" => self.loss_w1 = parse_num(key, v)?,
            "loss.w2" => self.loss_w2 = parse_num(key, v)?,
            "loss.w3" => self.loss_w3 = parse_num(key, v)?,
            "eval.split_hint" => self.eval_split = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "precision" => {
                self.precision = Precision::parse(v).ok_or_else(|| {
                    Error::invalid(format!(
                        "invalid value for {key}: {v:?} (expected double|single)"
                    ))
                })?;
            }
            other => {
                return Err(Error::invalid(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse `key = value` text. `#` starts a comment; blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!(
                    "config line {} is not key = value: {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Load a config file on top of defaults.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Read the seed from `UNIEMO_SEED` if set; errors on non-integer values.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("UNIEMO_SEED") {
            self.seed = parse_num("UNIEMO_SEED", &v)?;
        }
        Ok(())
    }

    /// Serialize every key in canonical order; `apply_text` round-trips it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("backbone.image_size", self.backbone.image_size.to_string()),
            ("backbone.patch", self.backbone.patch.to_string()),
            ("backbone.in_channels", self.backbone.in_channels.to_string()),
            ("backbone.encoder_width", self.backbone.encoder_width.to_string()),
            ("backbone.encoder_depth", self.backbone.encoder_depth.to_string()),
            ("backbone.encoder_heads", self.backbone.encoder_heads.to_string()),
            ("backbone.decoder_width", self.backbone.decoder_width.to_string()),
            ("backbone.decoder_depth", self.backbone.decoder_depth.to_string()),
            ("backbone.cls_proj_dim", self.backbone.cls_proj_dim.to_string()),
            ("backbone.mask_ratio", format!("{:?}", self.backbone.mask_ratio)),
            ("fusion.strategy", self.fusion_strategy.name().to_string()),
            ("fusion.kappa", self.fusion_kappa.to_string()),
            ("teacher.kind", self.teacher_kind.name().to_string()),
            ("teacher.seed", self.teacher_seed.to_string()),
            ("optim.base_lr", format!("{:?}", self.optim.base_lr)),
            ("optim.weight_decay", format!("{:?}", self.optim.weight_decay)),
            ("optim.beta1", format!("{:?}", self.optim.beta1)),
            ("optim.beta2", format!("{:?}", self.optim.beta2)),
            ("optim.warmup_steps", self.optim.warmup_steps.to_string()),
            ("optim.total_steps", self.optim.total_steps.to_string()),
            ("optim.schedule", self.optim.schedule.name().to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("finetune.base_lr", format!("{:?}", self.ft_base_lr)),
            ("finetune.weight_decay", format!("{:?}", self.ft_weight_decay)),
            ("finetune.beta1", format!("{:?}", self.ft_beta1)),
            ("finetune.beta2", format!("{:?}", self.ft_beta2)),
            ("finetune.warmup_steps", self.ft_warmup_steps.to_string()),
            ("finetune.total_steps", self.ft_total_steps.to_string()),
            ("finetune.batch_size", self.ft_batch_size.to_string()),
            ("finetune.num_classes", self.num_classes.to_string()),
            ("finetune.mixup_alpha", format!("{:?}", self.mixup_alpha)),
            ("finetune.freeze_encoder", self.freeze_encoder.to_string()),
            ("finetune.val_fraction", format!("{:?}", self.val_fraction)),
            ("data.manifest", self.manifest.clone()),
            ("data.bins_per_channel", self.bins_per_channel.to_string()),
            ("data.split.candidates", self.split_candidates.to_string()),
            ("recon.norm_pix", self.norm_pix.to_string()),
            ("distill.norm_floor", self.norm_floor.to_string()),
            ("loss.w1", format!("{:?}", self.loss_w1)),
            ("loss.w2", format!("{:?}", self.loss_w2)),
            ("loss.w3", format!("{:?}", self.loss_w3)),
            ("eval.split_hint", self.eval_split.clone()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.name().to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Validate cross-field invariants before a run.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.fusion_kappa == 0 {
            return Err(Error::invalid("fusion.kappa must be >= 1"));
        }
        if self.optim.warmup_steps > self.optim.total_steps {
            return Err(Error::invalid(
                "optim.warmup_steps must not exceed optim.total_steps",
            ));
        }
        if self.ft_warmup_steps > self.ft_total_steps {
            return Err(Error::invalid(
                "finetune.warmup_steps must not exceed finetune.total_steps",
            ));
        }
        if self.mixup_alpha > 0.0 && self.ft_batch_size < 2 {
            return Err(Error::invalid(
                "finetune.batch_size must be >= 2 when mixup is enabled",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("finetune.num_classes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("finetune.val_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}
