//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! Unknown keys are rejected; missing keys take the documented defaults;
//! invariants are validated on every construction path.

use crate::error::{HermesError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Full training configuration.
///
/// Defaults are the reference hyperparameters: task trade-offs
/// `lambda_cls = 1.0`, `lambda_seg = 0.5`, contrastive weights `alpha = 0.8`,
/// `beta = 0.2`, consistency weight `gamma = 0.1`, temperature `0.07`,
/// embedding dims 256 (pixel) / 128 (image), batch size 8 (half labeled,
/// half unlabeled), and initial learning rate 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Square input resolution in pixels. Must be divisible by 32 (stem plus
    /// four downsampling stages).
    pub image_size: usize,
    pub num_classes: usize,
    pub lambda_seg: f64,
    pub lambda_cls: f64,
    /// Pixel-contrast weight.
    pub alpha: f64,
    /// Image-contrast weight.
    pub beta: f64,
    /// Inter-task consistency weight.
    pub gamma: f64,
    /// Contrastive temperature.
    pub temp: f64,
    /// Uncertainty-threshold floor.
    pub eta_min: f64,
    /// Uncertainty-threshold ceiling.
    pub eta_max: f64,
    pub lr_init: f64,
    /// Even; each step draws batch_size/2 labeled and batch_size/2 unlabeled.
    pub batch_size: usize,
    pub total_iters: usize,
    pub pixel_embed_dim: usize,
    pub image_embed_dim: usize,
    /// Anchor budget `n` per step (n/2 hard + n/2 simple).
    pub anchors_per_batch: usize,
    pub bank_capacity_pixel: usize,
    pub bank_capacity_image: usize,
    /// Entropy stabilizer.
    pub epsilon: f64,
    pub seed: u64,
    /// Base channel width of the segmentation encoder/decoder.
    pub seg_base_width: usize,
    /// Base channel width of the classification backbone (0.5x of the
    /// reference residual backbone at paper scale).
    pub cls_base_width: usize,
    /// Evaluate every this many iterations during `fit`.
    pub eval_interval: usize,
    /// Dual-threshold contrastive learning (pixel + image contrast terms).
    pub enable_dtcl: bool,
    /// Inter-task attention and saliency fusion.
    pub enable_ias: bool,
    /// Inter-task consistency loss.
    pub enable_itcl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 96,
            num_classes: 2,
            lambda_seg: 0.5,
            lambda_cls: 1.0,
            alpha: 0.8,
            beta: 0.2,
            gamma: 0.1,
            temp: 0.07,
            eta_min: 0.25,
            eta_max: 0.75,
            lr_init: 1e-4,
            batch_size: 8,
            total_iters: 1000,
            pixel_embed_dim: 256,
            image_embed_dim: 128,
            anchors_per_batch: 256,
            bank_capacity_pixel: 4096,
            bank_capacity_image: 512,
            epsilon: 1e-8,
            seed: 0,
            seg_base_width: 32,
            cls_base_width: 32,
            eval_interval: 100,
            enable_dtcl: true,
            enable_ias: true,
            enable_itcl: true,
        }
    }
}

macro_rules! parse_field {
    ($cfg:ident, $key:ident, $value:ident, { $($name:ident : $ty:ty),+ $(,)? }) => {
        match $key {
            $(stringify!($name) => {
                $cfg.$name = $value.parse::<$ty>().map_err(|_| {
                    HermesError::Config(format!(
                        "field `{}`: cannot parse `{}`",
                        stringify!($name), $value
                    ))
                })?;
            })+
            other => {
                return Err(HermesError::Config(format!("unknown key `{other}`")));
            }
        }
    };
}

impl TrainConfig {
    /// Parses config text over the defaults. One `key = value` per line,
    /// `#` starts a comment, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HermesError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(&path).map_err(|e| HermesError::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual form. Used both by the file parser
    /// and by CLI `--set key=value` overrides, so the two are equivalent by
    /// construction.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let cfg = self;
        parse_field!(cfg, key, value, {
            image_size: usize,
            num_classes: usize,
            lambda_seg: f64,
            lambda_cls: f64,
            alpha: f64,
            beta: f64,
            gamma: f64,
            temp: f64,
            eta_min: f64,
            eta_max: f64,
            lr_init: f64,
            batch_size: usize,
            total_iters: usize,
            pixel_embed_dim: usize,
            image_embed_dim: usize,
            anchors_per_batch: usize,
            bank_capacity_pixel: usize,
            bank_capacity_image: usize,
            epsilon: f64,
            seed: u64,
            seg_base_width: usize,
            cls_base_width: usize,
            eval_interval: usize,
            enable_dtcl: bool,
            enable_ias: bool,
            enable_itcl: bool,
        });
        Ok(())
    }

    /// Checks every invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        fn fail(field: &str, why: String) -> Result<()> {
            Err(HermesError::Config(format!("field `{field}`: {why}")))
        }
        if !(self.eta_min >= 0.0 && self.eta_min < self.eta_max && self.eta_max <= 1.0) {
            return fail(
                "eta_min/eta_max",
                format!(
                    "require 0 <= eta_min < eta_max <= 1, got {} and {}",
                    self.eta_min, self.eta_max
                ),
            );
        }
        if !(self.temp > 0.0) {
            return fail("temp", format!("must be positive, got {}", self.temp));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return fail(
                "batch_size",
                format!("must be even and nonzero, got {}", self.batch_size),
            );
        }
        for (name, v) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_cls", self.lambda_cls),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) {
                return fail(name, format!("weight must be >= 0, got {v}"));
            }
        }
        if !(self.lr_init >= 0.0) {
            return fail("lr_init", format!("must be >= 0, got {}", self.lr_init));
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        if self.num_classes != 2 {
            return fail(
                "num_classes",
                format!("only 2-class runs are supported, got {}", self.num_classes),
            );
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(
                "image_size",
                format!("must be a positive multiple of 32, got {}", self.image_size),
            );
        }
        if self.anchors_per_batch == 0 || self.anchors_per_batch % 2 != 0 {
            return fail(
                "anchors_per_batch",
                format!("must be even and nonzero, got {}", self.anchors_per_batch),
            );
        }
        for (name, v) in [
            ("pixel_embed_dim", self.pixel_embed_dim),
            ("image_embed_dim", self.image_embed_dim),
            ("bank_capacity_pixel", self.bank_capacity_pixel),
            ("bank_capacity_image", self.bank_capacity_image),
            ("seg_base_width", self.seg_base_width),
            ("cls_base_width", self.cls_base_width),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return fail(name, "must be nonzero".to_string());
            }
        }
        Ok(())
    }

    /// Canonical textual form: every field, sorted order, full precision.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w("alpha", format!("{:e}", self.alpha));
        w("anchors_per_batch", self.anchors_per_batch.to_string());
        w("bank_capacity_image", self.bank_capacity_image.to_string());
        w("bank_capacity_pixel", self.bank_capacity_pixel.to_string());
        w("batch_size", self.batch_size.to_string());
        w("beta", format!("{:e}", self.beta));
        w("cls_base_width", self.cls_base_width.to_string());
        w("enable_dtcl", self.enable_dtcl.to_string());
        w("enable_ias", self.enable_ias.to_string());
        w("enable_itcl", self.enable_itcl.to_string());
        w("epsilon", format!("{:e}", self.epsilon));
        w("eta_max", format!("{:e}", self.eta_max));
        w("eta_min", format!("{:e}", self.eta_min));
        w("eval_interval", self.eval_interval.to_string());
        w("gamma", format!("{:e}", self.gamma));
        w("image_embed_dim", self.image_embed_dim.to_string());
        w("image_size", self.image_size.to_string());
        w("lambda_cls", format!("{:e}", self.lambda_cls));
        w("lambda_seg", format!("{:e}", self.lambda_seg));
        w("lr_init", format!("{:e}", self.lr_init));
        w("num_classes", self.num_classes.to_string());
        w("pixel_embed_dim", self.pixel_embed_dim.to_string());
        w("seed", self.seed.to_string());
        w("seg_base_width", self.seg_base_width.to_string());
        w("temp", format!("{:e}", self.temp));
        w("total_iters", self.total_iters.to_string());
        s
    }

    /// SHA-256 hex digest of the canonical form; the portable config identity
    /// recorded in checkpoint manifests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda_cls, 1.0);
        assert_eq!(cfg.lambda_seg, 0.5);
        assert_eq!(cfg.alpha, 0.8);
        assert_eq!(cfg.beta, 0.2);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.temp, 0.07);
        assert_eq!(cfg.pixel_embed_dim, 256);
        assert_eq!(cfg.image_embed_dim, 128);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr_init, 1e-4);
        assert_eq!(cfg.eta_min, 0.25);
        assert_eq!(cfg.eta_max, 0.75);
        cfg.validate().unwrap();
    }

    #[test]
    fn sets_field_from_file_text() {
        let cfg = TrainConfig::parse("lambda_seg = 0.5\n# comment\nseed = 7\n").unwrap();
        assert_eq!(cfg.lambda_seg, 0.5);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("not_a_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn threshold_ordering_violation_names_field() {
        let err = TrainConfig::parse("eta_min = 0.9\neta_max = 0.75\n").unwrap_err();
        assert!(err.to_string().contains("eta_min"), "{err}");
    }

    #[test]
    fn odd_batch_rejected() {
        assert!(TrainConfig::parse("batch_size = 7\n").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn set_equals_file_edit() {
        let from_file = TrainConfig::parse("gamma = 0.3\n").unwrap();
        let mut from_set = TrainConfig::default();
        from_set.set("gamma", "0.3").unwrap();
        from_set.validate().unwrap();
        assert_eq!(from_file.digest(), from_set.digest());
    }
}
