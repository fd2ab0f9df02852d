use std::path::Path;

use crate::error::{MdcError, Result};
use crate::kv;
use crate::metrics::{LossWeights, ScaleWeights};
use crate::networks::{ModelConfig, DOWNSAMPLE};

/// Which multi-scale index drives the structural loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Mr,
    Ms,
}

impl LossVariant {
    pub fn weights(self) -> ScaleWeights {
        match self {
            LossVariant::Mr => ScaleWeights::mr(),
            LossVariant::Ms => ScaleWeights::ms(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            LossVariant::Mr => "mr",
            LossVariant::Ms => "ms",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = MdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mr" => Ok(LossVariant::Mr),
            "ms" => Ok(LossVariant::Ms),
            _ => Err(MdcError::Config(format!("loss_variant must be mr or ms, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// halve the learning rate every this many steps; 0 disables
    pub lr_decay_every: u64,
    /// linear learning-rate ramp over the first steps; 0 disables
    pub warmup_steps: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// linear ramp of the rate weight from 0 to `gamma`; 0 disables
    pub rate_warmup_steps: u64,
    pub steps: u64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub model: ModelConfig,
    /// 0 disables periodic validation
    pub validate_every: u64,
    /// 0 writes a checkpoint only at the end
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 160,
            batch_size: 8,
            lr: 4e-3,
            lr_decay_every: 0,
            warmup_steps: 100,
            alpha: 0.1,
            beta: 2e-4,
            gamma: 0.1,
            rate_warmup_steps: 100,
            steps: 1000,
            seed: 0,
            loss_variant: LossVariant::Mr,
            model: ModelConfig::default(),
            validate_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized defaults: 64 px crops and a 16-channel model.
    pub fn toy() -> Self {
        TrainConfig { crop_size: 64, steps: 500, model: ModelConfig::toy(), ..Default::default() }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta, self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdcError::Config(m));
        if self.crop_size == 0 || self.crop_size % DOWNSAMPLE != 0 {
            return bad(format!("crop_size {} must be a positive multiple of {DOWNSAMPLE}", self.crop_size));
        }
        if self.crop_size < 16 {
            return bad("crop_size must be at least 16 for the multi-scale loss".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        self.loss_weights().map_err(|e| MdcError::Config(e.to_string()))?;
        self.model.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("crop_size".to_string(), self.crop_size.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), format!("{:?}", self.lr)),
            ("lr_decay_every".into(), self.lr_decay_every.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("beta".into(), format!("{:?}", self.beta)),
            ("gamma".into(), format!("{:?}", self.gamma)),
            ("rate_warmup_steps".into(), self.rate_warmup_steps.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("loss_variant".into(), self.loss_variant.name().into()),
            ("validate_every".into(), self.validate_every.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ];
        out.extend(self.model.to_pairs());
        out
    }

    /// Applies `key = value` pairs; unknown keys are an error.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut model_pairs = Vec::new();
        for (k, v) in pairs {
            match k.as_str() {
                "crop_size" => self.crop_size = kv::parse_value(k, v)?,
                "batch_size" => self.batch_size = kv::parse_value(k, v)?,
                "lr" => self.lr = kv::parse_value(k, v)?,
                "lr_decay_every" => self.lr_decay_every = kv::parse_value(k, v)?,
                "warmup_steps" => self.warmup_steps = kv::parse_value(k, v)?,
                "alpha" => self.alpha = kv::parse_value(k, v)?,
                "beta" => self.beta = kv::parse_value(k, v)?,
                "gamma" => self.gamma = kv::parse_value(k, v)?,
                "rate_warmup_steps" => self.rate_warmup_steps = kv::parse_value(k, v)?,
                "steps" => self.steps = kv::parse_value(k, v)?,
                "seed" => self.seed = kv::parse_value(k, v)?,
                "loss_variant" => self.loss_variant = v.parse()?,
                "validate_every" => self.validate_every = kv::parse_value(k, v)?,
                "checkpoint_every" => self.checkpoint_every = kv::parse_value(k, v)?,
                "base_channels" | "feature_channels" | "K" | "levels" | "L" | "sigma" | "dilation_rates"
                | "resconv_per_block" | "entropy_channels" => model_pairs.push((k.clone(), v.clone())),
                other => return Err(MdcError::Config(format!("unknown key {other:?}"))),
            }
        }
        self.model.apply_pairs(&model_pairs)
    }

    /// Toy defaults overlaid with the file at `path`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| MdcError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let mut cfg = TrainConfig::toy();
        cfg.apply_pairs(&kv::parse(&text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
