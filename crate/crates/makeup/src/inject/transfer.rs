//! Inference: full-conditioning DDIM sampling plus the inpainting-style
//! composite that keeps source pixels outside the face region.

use gradtape::{Tape, Tensor};

use crate::denoiser::{ddim_sample, AttnLayerMap, DdimConfig, DenoisingUNet, NoiseSchedule, UnetConditioning};
use crate::error::Result;
use crate::imageio::image_dims;
use crate::styleenc::StyleEncoder;
use crate::synthface::RegionMaskSet;

use super::attn_loss::average_maps;
use super::projector::{extract_region_embeddings, RegionEmbeddingSet};
use super::train::Stage2Modules;

/// Captured cross-attention maps for the image-prompt tokens: per layer and
/// per head from the last sampling step, plus the map averaged over layers
/// and all sampling steps at the common resolution.
pub struct AttentionRecord {
    pub per_layer: Vec<LayerRecord>,
    /// `[N, U, V]` layer- and step-averaged map.
    pub averaged: Tensor,
    pub res: (usize, usize),
}

pub struct LayerRecord {
    pub h: usize,
    pub w: usize,
    /// Head-averaged map `[h*w, N]`.
    pub map: Tensor,
    /// Per-head maps `[h*w, N]`.
    pub per_head: Vec<Tensor>,
}

fn record_from_maps(maps: &[AttnLayerMap], averaged_steps: Tensor, res: (usize, usize)) -> AttentionRecord {
    AttentionRecord {
        per_layer: maps
            .iter()
            .map(|m| LayerRecord {
                h: m.h,
                w: m.w,
                map: m.probs.value(),
                per_head: m.per_head.clone(),
            })
            .collect(),
        averaged: averaged_steps,
        res,
    }
}

/// Run conditioned DDIM sampling and composite the result over the source
/// outside the face region. Returns the composite and the attention record.
#[allow(clippy::too_many_arguments)]
pub fn transfer_with_embeddings(
    source: &Tensor,
    structure: &Tensor,
    source_masks: &RegionMaskSet,
    embeddings: &RegionEmbeddingSet,
    modules: &Stage2Modules,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    text_tokens: &Tensor,
    ddim: &DdimConfig,
) -> Result<(Tensor, AttentionRecord)> {
    let (h, w) = image_dims(source);

    // The identity residuals depend only on (source, structure); compute once.
    let residuals: Vec<Tensor> = {
        let tape = Tape::new();
        modules
            .identity
            .forward(&tape, source, structure)?
            .iter()
            .map(|v| v.value())
            .collect()
    };

    let mut step_avg: Option<Tensor> = None;
    let mut step_count = 0usize;
    let mut last_maps: Option<(Vec<AttnLayerMap>, Tensor, (usize, usize))> = None;
    let mut res = (0usize, 0usize);

    let mut model = |x_t: &Tensor, t: usize| -> Result<Tensor> {
        let tape = Tape::new();
        let cond = UnetConditioning {
            region_tokens: Some(tape.constant(embeddings.vectors.clone())),
            lora: if modules.cfg.lora_on {
                Some(&modules.lora)
            } else {
                None
            },
            identity_residuals: Some(residuals.iter().map(|r| tape.constant(r.clone())).collect()),
        };
        let (eps, maps) = base.forward(&tape, x_t, t, text_tokens, &cond)?;
        let (avg, uh, uw) = average_maps(&maps)?;
        let avg_val = avg.value();
        res = (uh, uw);
        match &mut step_avg {
            Some(acc) => acc.accumulate(&avg_val),
            None => step_avg = Some(avg_val.clone()),
        }
        step_count += 1;
        last_maps = Some((maps, avg_val, (uh, uw)));
        Ok(eps.value())
    };

    let sample = ddim_sample(&mut model, &[3, h, w], schedule, ddim)?;

    // Inpainting-style composite: the face region comes from the sample, the
    // rest is the source verbatim.
    let union = source_masks.face_union();
    let n = h * w;
    let composite = Tensor::from_fn(&[3, h, w], |i| {
        if union.data()[i % n] > 0.5 {
            sample.data()[i]
        } else {
            source.data()[i]
        }
    });

    let mut averaged = step_avg.expect("sampling ran at least one step");
    averaged.scale_inplace(1.0 / step_count as f32);
    let (maps, _, _) = last_maps.expect("maps recorded");
    let averaged = averaged.reshaped(&[modules.cfg.num_regions, res.0, res.1]);
    Ok((composite, record_from_maps(&maps, averaged, res)))
}

/// Extract region embeddings from a single reference and transfer its style.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    source: &Tensor,
    structure: &Tensor,
    source_masks: &RegionMaskSet,
    reference: &Tensor,
    encoder: &StyleEncoder,
    modules: &Stage2Modules,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    text_tokens: &Tensor,
    ddim: &DdimConfig,
) -> Result<(Tensor, AttentionRecord)> {
    let set = extract_region_embeddings(encoder, reference, &modules.bank, &modules.projector, "reference")?;
    transfer_with_embeddings(
        source,
        structure,
        source_masks,
        &set,
        modules,
        base,
        schedule,
        text_tokens,
        ddim,
    )
}
