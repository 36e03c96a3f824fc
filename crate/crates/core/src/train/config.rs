//! Everything a training run needs, read from and written to flat keys.

use std::path::Path;

use toml::Value;

use super::augment::AugmentConfig;
use super::flat::{self, as_bool, as_f64, as_str, as_strings, as_u64, as_usize, as_usizes, float, int};
use super::infer::InferConfig;
use crate::attention::ClaPlacement;
use crate::error::{Error, Result};
use crate::labels::LabelConfig;
use crate::losses::LossConfig;
use crate::network::{DetectorConfig, LowLevelStage};
use crate::postprocess::Unclip;

pub const DEFAULT_LR0: f64 = 0.007;
pub const DEFAULT_POWER: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_IMAGE_SIZE: usize = 640;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Replaces the epoch count: one iteration is one optimizer step.
    pub max_iter: usize,
    pub image_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub labels: LabelConfig,
    pub model: DetectorConfig,
    pub infer: InferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: DEFAULT_LR0,
            power: DEFAULT_POWER,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            momentum: DEFAULT_MOMENTUM,
            batch_size: 16,
            max_iter: 1200,
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            labels: LabelConfig::default(),
            model: DetectorConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small model and images that train in minutes on one core.
    pub fn desk() -> Self {
        let mut c = Self {
            batch_size: 2,
            max_iter: 600,
            image_size: 128,
            ..Self::default()
        };
        c.model.backbone.stem = 16;
        c.model.backbone.widths = [16, 32, 64, 64];
        c.model.fused_channels = 64;
        c.model.low_level_channels = 16;
        c.infer.short_edge = 128;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, v) in [("train.lr0", self.lr0), ("train.power", self.power)] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{k} = {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("train.weight_decay = {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("train.momentum = {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size must be positive".into());
        }
        if self.max_iter == 0 {
            bad.push("train.max_iter must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            bad.push(format!("train.image_size = {} must be a positive multiple of 32", self.image_size));
        }
        if self.log_every == 0 {
            bad.push("train.log_every must be positive".into());
        }
        let sub = [
            self.augment.validate(),
            self.loss.validate(),
            self.labels.validate(),
            self.model.validate(),
            self.infer.validate(),
        ];
        for r in sub {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let m = &self.model;
        let placement: Vec<Value> = m.cla_placement.levels().map(|l| Value::String(l.to_string())).collect();
        let (unclip_mode, unclip_value) = match self.infer.post.unclip {
            Unclip::Ratio(r) => ("ratio", r),
            Unclip::InverseShrink(r) => ("inverse_shrink", r),
        };
        vec![
            ("train.lr0", float(self.lr0)),
            ("train.power", float(self.power)),
            ("train.weight_decay", float(self.weight_decay)),
            ("train.momentum", float(self.momentum)),
            ("train.batch_size", int(self.batch_size)),
            ("train.max_iter", int(self.max_iter)),
            ("train.image_size", int(self.image_size)),
            ("train.seed", Value::Integer(self.seed as i64)),
            ("train.log_every", int(self.log_every)),
            ("train.checkpoint_every", int(self.checkpoint_every)),
            ("augment.enabled", Value::Boolean(self.augment.enabled)),
            ("augment.flip_prob", float(self.augment.flip_prob)),
            ("augment.max_rotation_deg", float(self.augment.max_rotation_deg)),
            ("augment.min_crop_scale", float(self.augment.min_crop_scale)),
            ("loss.alpha", float(self.loss.weights.alpha)),
            ("loss.beta", float(self.loss.weights.beta)),
            ("loss.ohem_ratio", float(self.loss.ohem_ratio)),
            ("loss.fallback_negatives", int(self.loss.fallback_negatives)),
            ("loss.dice_eps", float(self.loss.dice_eps)),
            ("loss.log_eps", float(self.loss.log_eps)),
            ("labels.shrink_ratio", float(self.labels.shrink_ratio)),
            ("labels.thresh_min", float(self.labels.thresh_min)),
            ("labels.thresh_max", float(self.labels.thresh_max)),
            ("model.stem", int(m.backbone.stem)),
            ("model.widths", Value::Array(m.backbone.widths.iter().map(|&w| int(w)).collect())),
            ("model.fused_channels", int(m.fused_channels)),
            ("model.k", float(m.k)),
            ("model.enable_fdr", Value::Boolean(m.enable_fdr)),
            ("model.enable_cla", Value::Boolean(m.enable_cla)),
            ("cla.placement", Value::Array(placement)),
            ("cla.reduction", int(m.cla_reduction)),
            ("fdr.low_level_stage", Value::String(m.low_level_stage.to_string())),
            ("fdr.low_level_channels", int(m.low_level_channels)),
            ("fdr.fuse_kernel", int(m.fuse_kernel)),
            ("infer.short_edge", int(self.infer.short_edge)),
            ("infer.bin_thresh", float(self.infer.post.bin_thresh)),
            ("infer.unclip_mode", Value::String(unclip_mode.into())),
            ("infer.unclip_ratio", float(unclip_value)),
            ("infer.min_score", float(self.infer.post.min_score)),
            ("infer.min_area", float(self.infer.post.min_area)),
            ("infer.min_rect", Value::Boolean(self.infer.post.min_rect)),
        ]
    }

    pub fn to_flat_string(&self) -> String {
        flat::render(&self.entries())
    }

    /// Starts from the defaults and applies `text`; unknown keys are errors.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        Self::default().merged(text)
    }

    /// Applies the keys in `text` on top of `self`.
    pub fn merged(mut self, text: &str) -> Result<Self> {
        let map = flat::parse(text)?;
        let unknown: Vec<String> = map.keys().filter(|k| !self.set(k, &map[*k]).unwrap_or(true)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        for (k, v) in &map {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. `Ok(false)` means the key is unknown.
    fn set(&mut self, key: &str, v: &Value) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "train.lr0" => self.lr0 = as_f64(key, v)?,
            "train.power" => self.power = as_f64(key, v)?,
            "train.weight_decay" => self.weight_decay = as_f64(key, v)?,
            "train.momentum" => self.momentum = as_f64(key, v)?,
            "train.batch_size" => self.batch_size = as_usize(key, v)?,
            "train.max_iter" => self.max_iter = as_usize(key, v)?,
            "train.image_size" => self.image_size = as_usize(key, v)?,
            "train.seed" => self.seed = as_u64(key, v)?,
            "train.log_every" => self.log_every = as_usize(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "augment.enabled" => self.augment.enabled = as_bool(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = as_f64(key, v)?,
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = as_f64(key, v)?,
            "augment.min_crop_scale" => self.augment.min_crop_scale = as_f64(key, v)?,
            "loss.alpha" => self.loss.weights.alpha = as_f64(key, v)?,
            "loss.beta" => self.loss.weights.beta = as_f64(key, v)?,
            "loss.ohem_ratio" => self.loss.ohem_ratio = as_f64(key, v)?,
            "loss.fallback_negatives" => self.loss.fallback_negatives = as_usize(key, v)?,
            "loss.dice_eps" => self.loss.dice_eps = as_f64(key, v)?,
            "loss.log_eps" => self.loss.log_eps = as_f64(key, v)?,
            "labels.shrink_ratio" => self.labels.shrink_ratio = as_f64(key, v)?,
            "labels.thresh_min" => self.labels.thresh_min = as_f64(key, v)?,
            "labels.thresh_max" => self.labels.thresh_max = as_f64(key, v)?,
            "model.stem" => m.backbone.stem = as_usize(key, v)?,
            "model.widths" => {
                let w = as_usizes(key, v)?;
                m.backbone.widths = w
                    .try_into()
                    .map_err(|w: Vec<usize>| Error::Config(format!("{key}: expected 4 widths, got {}", w.len())))?;
            }
            "model.fused_channels" => m.fused_channels = as_usize(key, v)?,
            "model.k" => m.k = as_f64(key, v)?,
            "model.enable_fdr" => m.enable_fdr = as_bool(key, v)?,
            "model.enable_cla" => m.enable_cla = as_bool(key, v)?,
            "cla.placement" => m.cla_placement = ClaPlacement::parse_list(&as_strings(key, v)?)?,
            "cla.reduction" => m.cla_reduction = as_usize(key, v)?,
            "fdr.low_level_stage" => {
                m.low_level_stage = as_str(key, v)?
                    .parse::<LowLevelStage>()
                    .map_err(|e| Error::Config(format!("{key}: {e}")))?
            }
            "fdr.low_level_channels" => m.low_level_channels = as_usize(key, v)?,
            "fdr.fuse_kernel" => m.fuse_kernel = as_usize(key, v)?,
            "infer.short_edge" => self.infer.short_edge = as_usize(key, v)?,
            "infer.bin_thresh" => self.infer.post.bin_thresh = as_f64(key, v)?,
            "infer.unclip_mode" => {
                let r = match self.infer.post.unclip {
                    Unclip::Ratio(r) | Unclip::InverseShrink(r) => r,
                };
                self.infer.post.unclip = match as_str(key, v)? {
                    "ratio" => Unclip::Ratio(r),
                    "inverse_shrink" => Unclip::InverseShrink(r),
                    other => return Err(Error::Config(format!("{key}: unknown mode {other:?}"))),
                }
            }
            "infer.unclip_ratio" => {
                let r = as_f64(key, v)?;
                self.infer.post.unclip = match self.infer.post.unclip {
                    Unclip::Ratio(_) => Unclip::Ratio(r),
                    Unclip::InverseShrink(_) => Unclip::InverseShrink(r),
                }
            }
            "infer.min_score" => self.infer.post.min_score = as_f64(key, v)?,
            "infer.min_area" => self.infer.post.min_area = as_f64(key, v)?,
            "infer.min_rect" => self.infer.post.min_rect = as_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.lr0, c.power, c.weight_decay, c.momentum), (0.007, 0.9, 1e-4, 0.9));
        assert_eq!(c.image_size, 640);
        assert_eq!((c.loss.weights.alpha, c.loss.weights.beta), (5.0, 10.0));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn flat_text_round_trips() {
        let mut c = TrainConfig::desk();
        c.model.cla_placement = ClaPlacement::cla2();
        c.model.low_level_stage = LowLevelStage::Conv3;
        c.infer.post.unclip = Unclip::InverseShrink(0.4);
        c.lr0 = 0.1 + 0.2;
        let text = c.to_flat_string();
        let back = TrainConfig::from_flat_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_flat_string(), text);
    }

    #[test]
    fn every_key_is_settable() {
        let text = TrainConfig::default().to_flat_string();
        assert_eq!(text.lines().count(), TrainConfig::default().entries().len());
        assert_eq!(TrainConfig::from_flat_str(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_and_bad_keys_are_errors() {
        match TrainConfig::from_flat_str("train.lr = 0.1\nmodel.kk = 2\n") {
            Err(Error::UnknownKeys(k)) => assert_eq!(k, vec!["model.kk".to_string(), "train.lr".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::from_flat_str("train.max_iter = -1").is_err());
        assert!(TrainConfig::from_flat_str("train.max_iter = 0").is_err());
        assert!(TrainConfig::from_flat_str("model.widths = [1, 2]").is_err());
        assert!(TrainConfig::from_flat_str("cla.placement = []").is_err());
        let c = TrainConfig::from_flat_str("[train]\nseed = 7\n[cla]\nplacement = \"out3\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.cla_placement.levels().count(), 1);
    }
}
