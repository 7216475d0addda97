//! Stage-1 training loop: fine-tune the style encoder with the combined
//! paired-view and image-text contrastive objective.

use gradtape::nn::SplitMix64;
use gradtape::optim::Adam;
use gradtape::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::augment::{augment, AugmentationPolicy};
use super::encoder::{EncoderConfig, StyleEncoder};
use super::losses::{loss_ssl, loss_text};
use super::text::{style_prompt, TextEmbedder};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f32,
    pub tau: f32,
    pub ssl_on: bool,
    pub text_on: bool,
    pub ssl_symmetric: bool,
    /// Samples drawn per style within a batch. 1 keeps batches fully
    /// style-stratified; 2 gives each anchor in-batch same-style positives
    /// for the text objective at the cost of a few same-style negatives in
    /// the paired-view objective.
    pub samples_per_style: usize,
    pub seed: u64,
    pub policy: AugmentationPolicy,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            steps: 400,
            batch_pairs: 8,
            lr: 1e-3,
            tau: 0.1,
            ssl_on: true,
            text_on: true,
            ssl_symmetric: true,
            samples_per_style: 2,
            seed: 0,
            policy: AugmentationPolicy::default(),
        }
    }
}

/// One training sample: a makeup style image plus its style id and text
/// description.
pub struct StyleSample {
    pub image: Tensor,
    pub style_id: u32,
    pub description: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1StepLog {
    pub step: usize,
    pub ssl: f32,
    pub text: f32,
    pub total: f32,
}

/// Train a fresh encoder on the sample set. Only the unfrozen tail updates;
/// both loss terms are logged per step.
pub fn train_style_encoder(
    samples: &[StyleSample],
    embedder: &TextEmbedder,
    cfg: &Stage1Config,
) -> Result<(StyleEncoder, Vec<Stage1StepLog>)> {
    let mut styles: Vec<u32> = samples.iter().map(|s| s.style_id).collect();
    styles.sort_unstable();
    styles.dedup();
    if styles.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive training needs at least 2 styles, found {}",
            styles.len()
        )));
    }
    if !cfg.ssl_on && !cfg.text_on {
        return Err(Error::InvalidInput(
            "at least one of the contrastive objectives must be enabled".into(),
        ));
    }
    if embedder.dim() != cfg.encoder.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "text embedder dim {} vs encoder embed dim {}",
            embedder.dim(),
            cfg.encoder.embed_dim
        )));
    }

    let encoder = StyleEncoder::new(cfg.encoder.clone(), cfg.seed);
    let frozen_before = encoder.frozen_hash();
    let mut opt = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.steps);

    // Text embeddings are frozen; compute once per sample.
    let text_embs: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| embedder.embed(&style_prompt(&s.description)))
        .collect();

    // Style-balanced batches: draw `samples_per_style` samples from each of
    // a rotating set of styles, so most paired-view negatives are
    // cross-style while the text objective still sees in-batch same-style
    // positives.
    let sps = cfg.samples_per_style.max(1);
    let mut by_style: Vec<Vec<usize>> = styles
        .iter()
        .map(|&sid| {
            (0..samples.len())
                .filter(|&i| samples[i].style_id == sid)
                .collect()
        })
        .collect();
    let mut deck_rng = SplitMix64::new(cfg.seed ^ 0x0dec_c0de);
    let mut style_order: Vec<usize> = (0..by_style.len()).collect();
    let mut style_cursor = style_order.len();
    let mut per_style_cursor = vec![usize::MAX; by_style.len()];

    for step in 0..cfg.steps {
        let b = cfg.batch_pairs.min(samples.len());
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if style_cursor >= style_order.len() {
                deck_rng.shuffle(&mut style_order);
                style_cursor = 0;
            }
            let s = style_order[style_cursor];
            style_cursor += 1;
            let deck = &mut by_style[s];
            for _ in 0..sps.min(deck.len()) {
                if batch.len() >= b {
                    break;
                }
                if per_style_cursor[s] >= deck.len() {
                    deck_rng.shuffle(deck);
                    per_style_cursor[s] = 0;
                }
                batch.push(deck[per_style_cursor[s]]);
                per_style_cursor[s] += 1;
            }
        }

        let tape = Tape::new();
        let mut view_embs: Vec<Var> = Vec::with_capacity(2 * b);
        let mut anchor_embs: Vec<Var> = Vec::with_capacity(b);
        let mut anchor_styles = Vec::with_capacity(b);
        let mut slot_texts: Vec<Vec<f32>> = Vec::with_capacity(2 * b);
        let mut slot_styles = Vec::with_capacity(2 * b);

        for (bi, &idx) in batch.iter().enumerate() {
            let s = &samples[idx];
            let mut rng = SplitMix64::derive(cfg.seed ^ 0xa06, (step * 10_000 + bi) as u64);
            let v1 = augment(&s.image, None, &cfg.policy, &mut rng)?.image;
            let v2 = augment(&s.image, None, &cfg.policy, &mut rng)?.image;
            let z1 = encoder.embed(&tape, &v1)?;
            let z2 = encoder.embed(&tape, &v2)?;
            anchor_embs.push(z1.clone());
            anchor_styles.push(s.style_id);
            view_embs.push(z1);
            view_embs.push(z2);
            // one text slot per sample-view
            for _ in 0..2 {
                slot_texts.push(text_embs[idx].clone());
                slot_styles.push(s.style_id);
            }
        }

        let view_refs: Vec<&Var> = view_embs.iter().collect();
        let stacked = Var::stack_rows(&view_refs);

        let mut ssl_val = 0.0f32;
        let mut text_val = 0.0f32;
        let mut total: Option<Var> = None;
        if cfg.ssl_on {
            let l = loss_ssl(&stacked, cfg.tau, cfg.ssl_symmetric)?;
            ssl_val = l.scalar_value();
            total = Some(l);
        }
        if cfg.text_on {
            let anchor_refs: Vec<&Var> = anchor_embs.iter().collect();
            let anchors = Var::stack_rows(&anchor_refs);
            let dim = embedder.dim();
            let flat: Vec<f32> = slot_texts.concat();
            let texts = tape.constant(Tensor::from_vec(&[slot_styles.len(), dim], flat));
            let l = loss_text(&anchors, &texts, &anchor_styles, &slot_styles, cfg.tau)?;
            text_val = l.scalar_value();
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        let total = total.expect("at least one objective enabled");
        let total_val = total.scalar_value();
        if !total_val.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite loss at step {step}"
            )));
        }
        let grads = tape.backward(&total);
        opt.step(&encoder.store, &grads);

        logs.push(Stage1StepLog {
            step,
            ssl: ssl_val,
            text: text_val,
            total: total_val,
        });
    }

    debug_assert_eq!(encoder.frozen_hash(), frozen_before);
    Ok((encoder, logs))
}

/// Embed a set of clean images (no augmentation) for evaluation.
pub fn embed_all(encoder: &StyleEncoder, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
    images.iter().map(|img| encoder.embed_vec(img)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{apply_makeup, make_style_catalog, render_face, FaceSpec};

    fn tiny_samples(styles: usize, faces: usize, size: usize) -> Vec<StyleSample> {
        let catalog = make_style_catalog(styles, 0, 0.04).unwrap();
        let mut out = Vec::new();
        for f in 0..faces {
            let r = render_face(&FaceSpec::sample(100 + f as u64, size), size).unwrap();
            for s in &catalog {
                out.push(StyleSample {
                    image: apply_makeup(&r.image, &r.masks, s).unwrap(),
                    style_id: s.style_id,
                    description: s.description.clone(),
                });
            }
        }
        out
    }

    #[test]
    fn single_style_dataset_is_rejected() {
        let samples = tiny_samples(2, 1, 32)
            .into_iter()
            .filter(|s| s.style_id == 0)
            .collect::<Vec<_>>();
        let cfg = Stage1Config {
            encoder: EncoderConfig {
                image_size: 32,
                depth: 2,
                ..Default::default()
            },
            steps: 1,
            ..Default::default()
        };
        assert!(train_style_encoder(&samples, &TextEmbedder::new(0, 64), &cfg).is_err());
    }

    #[test]
    fn short_training_runs_and_freezes_the_backbone() {
        let samples = tiny_samples(3, 2, 32);
        let cfg = Stage1Config {
            encoder: EncoderConfig {
                image_size: 32,
                depth: 2,
                ..Default::default()
            },
            steps: 3,
            batch_pairs: 3,
            ..Default::default()
        };
        let embedder = TextEmbedder::new(0, 64);
        let (enc, logs) = train_style_encoder(&samples, &embedder, &cfg).unwrap();
        assert_eq!(logs.len(), 3);
        // frozen hash equals a freshly initialized encoder's frozen part
        let fresh = StyleEncoder::new(cfg.encoder.clone(), cfg.seed);
        assert_eq!(enc.frozen_hash(), fresh.frozen_hash());
        assert!(logs.iter().all(|l| l.total.is_finite()));
    }
}
