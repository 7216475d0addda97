//! Base denoiser pretraining: the text-conditioned UNet learns the face
//! image distribution before any identity or makeup conditioning exists.
//! The result plays the role of the pretrained backbone that stage 2 keeps
//! frozen.

use gradtape::nn::SplitMix64;
use gradtape::optim::Adam;
use gradtape::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sample::loss_diffusion;
use super::schedule::NoiseSchedule;
use super::unet::{DenoisingUNet, UnetConditioning, UnetConfig};

/// Text prompt used for the denoiser during training and sampling.
pub const DENOISER_PROMPT: &str = "a person with makeup";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub unet: UnetConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub timesteps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            unet: UnetConfig::default(),
            steps: 1200,
            batch: 2,
            lr: 1e-3,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
        }
    }
}

/// Pretrain a fresh UNet on clean images with the plain noise-prediction
/// objective (no extra conditioning).
pub fn train_base_denoiser(
    images: &[Tensor],
    text_tokens: &Tensor,
    cfg: &BaseTrainConfig,
) -> Result<(DenoisingUNet, NoiseSchedule, Vec<f32>)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no training images".into()));
    }
    let schedule = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let unet = DenoisingUNet::new(cfg.unet.clone(), cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut deck = SplitMix64::new(cfg.seed ^ 0xbeef);
    let mut cursor = images.len();

    for step in 0..cfg.steps {
        let b = cfg.batch.min(images.len());
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            if cursor >= order.len() {
                deck.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let tape = Tape::new();
        let cond = UnetConditioning::default();
        let loss = loss_diffusion(
            &tape,
            &mut |tape, x_t, t| Ok(unet.forward(tape, x_t, t, text_tokens, &cond)?.0),
            &batch,
            &schedule,
            cfg.seed ^ (step as u64).wrapping_mul(0x9e37),
        )?;
        let v = loss.scalar_value();
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at step {step}")));
        }
        losses.push(v);
        let grads = tape.backward(&loss);
        opt.step(&unet.store, &grads);
    }
    Ok((unet, schedule, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_pretraining_reduces_the_loss() {
        let mut rng = SplitMix64::new(0);
        let images: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[3, 32, 32], |_| rng.uniform()))
            .collect();
        let cfg = BaseTrainConfig {
            unet: UnetConfig {
                base_channels: 8,
                ..Default::default()
            },
            steps: 30,
            batch: 2,
            lr: 2e-3,
            timesteps: 100,
            ..Default::default()
        };
        let text = Tensor::from_fn(&[4, 64], |i| (i % 5) as f32 / 5.0);
        let (_unet, _sched, losses) = train_base_denoiser(&images, &text, &cfg).unwrap();
        let head: f32 = losses[..5].iter().sum::<f32>() / 5.0;
        let tail: f32 = losses[losses.len() - 5..].iter().sum::<f32>() / 5.0;
        assert!(
            tail < head,
            "loss did not decrease: head {head} tail {tail}"
        );
    }
}
