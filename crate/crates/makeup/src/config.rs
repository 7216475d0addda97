//! Run configuration: one flat struct covering every stage, with defaults
//! matching the documented settings (N=4 regions, K=5, tau 0.1, IoU 0.6,
//! DDIM-50, T=1000, 64x64 training images). Overridable from a simple
//! `key = value` file; a config plus a seed fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::{BaseTrainConfig, DdimConfig, UnetConfig};
use crate::error::{Error, Result};
use crate::inject::{AttnLossConfig, DiceReduction, ProjectorConfig, Stage2Config};
use crate::pairs::PairOptions;
use crate::styleenc::{AugmentationPolicy, EncoderConfig, Stage1Config};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,

    // data synthesis
    pub style_count: usize,
    pub style_margin: f32,
    pub num_faces: usize,
    /// 0 assigns every style to every face.
    pub styles_per_face: usize,

    // pair building
    pub iou_threshold: f32,
    pub misalign_rate: f32,
    pub feather_radius: usize,

    // style encoder (stage 1)
    pub enc_depth: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub enc_patch: usize,
    pub embed_dim: usize,
    pub s1_steps: usize,
    pub s1_batch: usize,
    pub s1_lr: f32,
    pub tau: f32,
    pub ssl_on: bool,
    pub text_on: bool,
    pub ssl_symmetric: bool,
    pub s1_samples_per_style: usize,
    pub aug_tps_scale: f32,

    // denoiser backbone (stage 0)
    pub base_channels: usize,
    pub unet_heads: usize,
    pub base_steps: usize,
    pub base_batch: usize,
    pub base_lr: f32,
    pub timesteps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    pub ddim_steps: usize,
    pub ddim_eta: f32,

    // injection (stage 2)
    pub s2_steps: usize,
    pub s2_batch: usize,
    pub s2_lr: f32,
    pub lambda_attn: f32,
    pub lora_rank: usize,
    pub projector_depth: usize,
    pub projector_heads: usize,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    pub dice_per_pixel: bool,
    pub lora_on: bool,
    pub attn_on: bool,
    pub pixel_branch: bool,
    pub structure_branch: bool,

    // evaluation
    pub knn_k: usize,
    pub eval_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            style_count: 50,
            style_margin: 0.04,
            num_faces: 20,
            styles_per_face: 0,
            iou_threshold: 0.6,
            misalign_rate: 0.3,
            feather_radius: 2,
            enc_depth: 4,
            enc_width: 128,
            enc_heads: 4,
            enc_patch: 8,
            embed_dim: 64,
            s1_steps: 400,
            s1_batch: 8,
            s1_lr: 1e-3,
            tau: 0.1,
            ssl_on: true,
            text_on: true,
            ssl_symmetric: true,
            s1_samples_per_style: 2,
            aug_tps_scale: 2.0,
            base_channels: 32,
            unet_heads: 4,
            base_steps: 1200,
            base_batch: 2,
            base_lr: 1e-3,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            ddim_eta: 0.0,
            s2_steps: 1200,
            s2_batch: 1,
            s2_lr: 1e-3,
            lambda_attn: 1.0,
            lora_rank: 4,
            projector_depth: 2,
            projector_heads: 4,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_per_pixel: false,
            lora_on: true,
            attn_on: true,
            pixel_branch: true,
            structure_branch: true,
            knn_k: 5,
            eval_limit: 16,
        }
    }
}

impl RunConfig {
    /// Small profile for smoke runs: everything shrunk to finish in seconds
    /// to minutes on one core.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            style_count: 4,
            num_faces: 4,
            s1_steps: 30,
            s1_batch: 4,
            base_channels: 8,
            base_steps: 60,
            timesteps: 200,
            ddim_steps: 8,
            s2_steps: 40,
            eval_limit: 4,
            ..Self::default()
        }
    }

    /// Parse `key = value` lines (# comments allowed) over the defaults.
    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_str(&text)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        let obj = value.as_object_mut().unwrap();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim();
            let val = v.trim();
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            let parsed: Value = if val == "true" || val == "false" {
                Value::Bool(val == "true")
            } else if let Ok(n) = val.parse::<i64>() {
                Value::from(n)
            } else if let Ok(f) = val.parse::<f64>() {
                Value::from(f)
            } else {
                Value::String(val.to_string())
            };
            obj.insert(key.to_string(), parsed);
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    // -- derived per-stage configs -----------------------------------------

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch: self.enc_patch,
            width: self.enc_width,
            depth: self.enc_depth,
            heads: self.enc_heads,
            embed_dim: self.embed_dim,
        }
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            tps_scale: self.aug_tps_scale,
            ..AugmentationPolicy::default()
        }
    }

    pub fn stage1_config(&self, seed: u64) -> Stage1Config {
        Stage1Config {
            encoder: self.encoder_config(),
            steps: self.s1_steps,
            batch_pairs: self.s1_batch,
            lr: self.s1_lr,
            tau: self.tau,
            ssl_on: self.ssl_on,
            text_on: self.text_on,
            ssl_symmetric: self.ssl_symmetric,
            samples_per_style: self.s1_samples_per_style,
            seed,
            policy: self.augmentation_policy(),
        }
    }

    pub fn unet_config(&self) -> UnetConfig {
        UnetConfig {
            base_channels: self.base_channels,
            ctx_dim: self.embed_dim,
            heads: self.unet_heads,
            time_dim: 128,
            groups: 8,
        }
    }

    pub fn base_config(&self, seed: u64) -> BaseTrainConfig {
        BaseTrainConfig {
            unet: self.unet_config(),
            steps: self.base_steps,
            batch: self.base_batch,
            lr: self.base_lr,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed,
        }
    }

    pub fn stage2_config(&self, seed: u64) -> Stage2Config {
        Stage2Config {
            num_regions: crate::synthface::NUM_REGIONS,
            lora_rank: self.lora_rank,
            projector: ProjectorConfig {
                depth: self.projector_depth,
                heads: self.projector_heads,
                dim: self.embed_dim,
                encoder_width: self.enc_width,
            },
            steps: self.s2_steps,
            batch: self.s2_batch,
            lr: self.s2_lr,
            lambda_attn: self.lambda_attn,
            attn_loss: AttnLossConfig {
                focal_alpha: self.focal_alpha,
                focal_gamma: self.focal_gamma,
                dice: if self.dice_per_pixel {
                    DiceReduction::PerPixel
                } else {
                    DiceReduction::RegionLevel
                },
            },
            reference_policy: AugmentationPolicy {
                tps_scale: self.aug_tps_scale,
                crop_min: 1.0,
                crop_max: 1.0,
                flip_p: 0.0,
                ..AugmentationPolicy::default()
            },
            lora_on: self.lora_on,
            attn_on: self.attn_on,
            use_pixels: self.pixel_branch,
            use_structure: self.structure_branch,
            seed,
        }
    }

    pub fn pair_options(&self, seed: u64) -> PairOptions {
        PairOptions {
            iou_threshold: self.iou_threshold,
            misalignment_rate: self.misalign_rate,
            feather_radius: self.feather_radius,
            align: true,
            seed,
            ..PairOptions::default()
        }
    }

    pub fn ddim(&self, seed: u64) -> DdimConfig {
        DdimConfig {
            steps: self.ddim_steps,
            eta: self.ddim_eta,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_overrides_and_unknown_keys() {
        let cfg = RunConfig::from_kv_str("image_size = 32\n# comment\ntau=0.2\nssl_on = false\n").unwrap();
        assert_eq!(cfg.image_size, 32);
        assert!((cfg.tau - 0.2).abs() < 1e-6);
        assert!(!cfg.ssl_on);
        assert!(RunConfig::from_kv_str("no_such_key = 3").is_err());
        assert!(RunConfig::from_kv_str("image_size 32").is_err());
    }

    #[test]
    fn defaults_match_documented_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.knn_k, 5);
        assert!((cfg.tau - 0.1).abs() < 1e-6);
        assert!((cfg.iou_threshold - 0.6).abs() < 1e-6);
        assert_eq!(cfg.ddim_steps, 50);
        assert_eq!(cfg.timesteps, 1000);
        assert_eq!(cfg.style_count, 50);
        assert_eq!(crate::synthface::NUM_REGIONS, 4);
    }
}
