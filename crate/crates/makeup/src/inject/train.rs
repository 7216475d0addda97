//! Stage-2 training: joint optimization of the LoRA adapters, region query
//! bank, projector and identity branch against the frozen base denoiser and
//! frozen style encoder, with the noise-prediction loss plus the attention
//! alignment loss.

use gradtape::nn::{ParamStore, SplitMix64};
use gradtape::optim::Adam;
use gradtape::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    diffusion_draws, DenoisingUNet, NoiseSchedule, UnetConditioning, UnetConfig,
};
use crate::error::{Error, Result};
use crate::styleenc::{augment, AugmentationPolicy, StyleEncoder};
use crate::synthface::RegionMaskSet;

use super::attn_loss::{loss_attention, AttnLossConfig};
use super::identity::IdentityBranch;
use super::lora::LoraStack;
use super::projector::{region_embeddings_var, Projector, ProjectorConfig, RegionQueryBank};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2Config {
    pub num_regions: usize,
    pub lora_rank: usize,
    pub projector: ProjectorConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda_attn: f32,
    pub attn_loss: AttnLossConfig,
    /// Structure augmentation applied to the reference before embedding
    /// extraction (content change, style preserved).
    pub reference_policy: AugmentationPolicy,
    pub lora_on: bool,
    pub attn_on: bool,
    pub use_pixels: bool,
    pub use_structure: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            num_regions: 4,
            lora_rank: 4,
            projector: ProjectorConfig::default(),
            steps: 1200,
            batch: 1,
            lr: 1e-3,
            lambda_attn: 1.0,
            attn_loss: AttnLossConfig::default(),
            reference_policy: AugmentationPolicy {
                crop_min: 1.0,
                crop_max: 1.0,
                flip_p: 0.0,
                ..AugmentationPolicy::default()
            },
            lora_on: true,
            attn_on: true,
            use_pixels: true,
            use_structure: true,
            seed: 0,
        }
    }
}

/// Everything stage 2 trains, in one parameter store.
pub struct Stage2Modules {
    pub store: ParamStore,
    pub lora: LoraStack,
    pub bank: RegionQueryBank,
    pub projector: Projector,
    pub identity: IdentityBranch,
    pub cfg: Stage2Config,
}

impl Stage2Modules {
    pub fn new(cfg: Stage2Config, unet_cfg: &UnetConfig, seed: u64) -> Stage2Modules {
        let mut store = ParamStore::new();
        let lora = LoraStack::new(
            &mut store,
            &unet_cfg.cross_attn_widths(),
            unet_cfg.ctx_dim,
            cfg.lora_rank,
            seed,
        );
        let bank = RegionQueryBank::new(&mut store, cfg.num_regions, cfg.projector.dim, seed);
        let projector = Projector::new(&mut store, cfg.projector.clone(), seed);
        let mut identity = IdentityBranch::new(&mut store, unet_cfg, seed);
        identity.use_pixels = cfg.use_pixels;
        identity.use_structure = cfg.use_structure;
        Stage2Modules {
            store,
            lora,
            bank,
            projector,
            identity,
            cfg,
        }
    }
}

/// One accepted training pair in memory.
pub struct PairSample {
    pub source: Tensor,
    pub reference: Tensor,
    pub masks: RegionMaskSet,
    pub structure: Tensor,
    pub style_id: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2StepLog {
    pub step: usize,
    pub diff: f32,
    pub attn: f32,
    pub total: f32,
}

/// Train stage-2 modules. The base UNet and style encoder are frozen for
/// the duration (their parameters enter every tape as constants).
pub fn train_transfer(
    pairs: &[PairSample],
    encoder: &StyleEncoder,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    text_tokens: &Tensor,
    cfg: &Stage2Config,
) -> Result<(Stage2Modules, Vec<Stage2StepLog>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no accepted training pairs".into()));
    }
    if cfg.projector.dim != base.cfg.ctx_dim {
        return Err(Error::ShapeMismatch(format!(
            "region embedding dim {} vs denoiser context dim {}",
            cfg.projector.dim, base.cfg.ctx_dim
        )));
    }
    encoder.set_all_trainable(false);
    base.set_trainable(false);
    let base_hash = base.store.content_hash();
    let enc_hash = encoder.store.content_hash();

    let modules = Stage2Modules::new(cfg.clone(), &base.cfg, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.steps);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut deck = SplitMix64::new(cfg.seed ^ 0x5742);
    let mut cursor = pairs.len();
    let mut skip_warned = false;

    for step in 0..cfg.steps {
        let b = cfg.batch.min(pairs.len());
        let tape = Tape::new();
        let mut total = None;
        let mut diff_sum = 0.0f32;
        let mut attn_sum = 0.0f32;

        for bi in 0..b {
            if cursor >= order.len() {
                deck.shuffle(&mut order);
                cursor = 0;
            }
            let pair = &pairs[order[cursor]];
            cursor += 1;

            // Structure-augment the reference for embedding extraction.
            let mut aug_rng = SplitMix64::derive(cfg.seed ^ 0xa9, (step * 100 + bi) as u64);
            let reference_view = augment(&pair.reference, None, &cfg.reference_policy, &mut aug_rng)?.image;
            let f = region_embeddings_var(encoder, &tape, &reference_view, &modules.bank, &modules.projector)?;
            let residuals = modules.identity.forward(&tape, &pair.source, &pair.structure)?;

            let draw = &diffusion_draws(
                &[pair.reference.clone()],
                schedule,
                cfg.seed ^ ((step * 31 + bi) as u64).wrapping_mul(0x2545f491),
            )?[0];
            let cond = UnetConditioning {
                region_tokens: Some(f),
                lora: if cfg.lora_on { Some(&modules.lora) } else { None },
                identity_residuals: Some(residuals),
            };
            let (pred, maps) = base.forward(&tape, &draw.x_t, draw.t, text_tokens, &cond)?;
            let l_diff = pred.mse_to(&draw.noise);
            diff_sum += l_diff.scalar_value();

            let mut item = l_diff;
            if cfg.attn_on {
                let out = loss_attention(&maps, &pair.masks, &cfg.attn_loss)?;
                if !out.skipped_regions.is_empty() && !skip_warned {
                    eprintln!(
                        "warning: skipping empty region masks {:?} in the attention loss",
                        out.skipped_regions
                    );
                    skip_warned = true;
                }
                attn_sum += out.loss.scalar_value();
                item = item.add(&out.loss.scale(cfg.lambda_attn));
            }
            total = Some(match total {
                Some(t) => item.add(&t),
                None => item,
            });
        }

        let total = total.unwrap().scale(1.0 / b as f32);
        let v = total.scalar_value();
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(&total);
        opt.step(&modules.store, &grads);
        logs.push(Stage2StepLog {
            step,
            diff: diff_sum / b as f32,
            attn: attn_sum / b as f32,
            total: v,
        });
    }

    debug_assert_eq!(base.store.content_hash(), base_hash);
    debug_assert_eq!(encoder.store.content_hash(), enc_hash);
    Ok((modules, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::styleenc::EncoderConfig;
    use crate::synthface::{apply_makeup, make_style_catalog, render_face, FaceSpec};

    #[test]
    fn short_stage2_run_trains_only_its_own_parameters() {
        let size = 32;
        let enc = StyleEncoder::new(
            EncoderConfig {
                image_size: size,
                depth: 2,
                ..Default::default()
            },
            0,
        );
        let base = DenoisingUNet::new(
            UnetConfig {
                base_channels: 8,
                ..Default::default()
            },
            0,
        );
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let text = Tensor::from_fn(&[4, 64], |i| (i % 5) as f32 / 5.0);

        let r = render_face(&FaceSpec::sample(2, size), size).unwrap();
        let style = make_style_catalog(2, 0, 0.04).unwrap().remove(1);
        let after = apply_makeup(&r.image, &r.masks, &style).unwrap();
        let pairs = vec![PairSample {
            source: r.image.clone(),
            reference: after,
            masks: r.masks,
            structure: r.structure,
            style_id: 1,
        }];

        let base_before = base.store.content_hash();
        let cfg = Stage2Config {
            steps: 3,
            ..Default::default()
        };
        let (modules, logs) = train_transfer(&pairs, &enc, &base, &schedule, &text, &cfg).unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(base.store.content_hash(), base_before, "frozen base changed");
        // stage-2 params did move
        let fresh = Stage2Modules::new(cfg, &base.cfg, 0);
        assert_ne!(modules.store.content_hash(), fresh.store.content_hash());
    }

    #[test]
    fn empty_pair_set_is_rejected() {
        let enc = StyleEncoder::new(
            EncoderConfig {
                image_size: 32,
                depth: 2,
                ..Default::default()
            },
            0,
        );
        let base = DenoisingUNet::new(
            UnetConfig {
                base_channels: 8,
                ..Default::default()
            },
            0,
        );
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let text = Tensor::zeros(&[1, 64]);
        assert!(train_transfer(&[], &enc, &base, &schedule, &text, &Stage2Config::default()).is_err());
    }
}
