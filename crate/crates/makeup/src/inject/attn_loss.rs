//! Attention alignment loss: averages the per-layer image-prompt attention
//! maps to a common resolution and scores them against the binary region
//! masks with focal + dice terms.

use gradtape::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::AttnLayerMap;
use crate::error::{Error, Result};
use crate::imageio::{area_downsample, binarize};
use crate::synthface::RegionMaskSet;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum DiceReduction {
    /// Set-level dice per region, averaged over regions (default).
    RegionLevel,
    /// Smoothed per-pixel dice averaged like the focal term.
    PerPixel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnLossConfig {
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    pub dice: DiceReduction,
}

impl Default for AttnLossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice: DiceReduction::RegionLevel,
        }
    }
}

/// Average per-layer maps at a common resolution (the largest layer
/// resolution present), upsampling coarser layers with nearest-neighbour
/// duplication so per-location normalization over the N tokens survives.
/// Returns `[N, U*V]` plus the resolution.
pub fn average_maps(maps: &[AttnLayerMap]) -> Result<(Var, usize, usize)> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("no attention maps recorded".into()));
    }
    let (uh, uw) = maps
        .iter()
        .map(|m| (m.h, m.w))
        .max_by_key(|&(h, w)| h * w)
        .unwrap();
    let n = maps[0].probs.shape()[1];
    let mut acc: Option<Var> = None;
    for m in maps {
        if m.probs.shape()[1] != n {
            return Err(Error::ShapeMismatch("token counts differ across layers".into()));
        }
        // [hw, N] -> [N, h, w]
        let chw = m.probs.transpose2d().reshape(&[n, m.h, m.w]);
        let mut up = chw;
        let mut cur = m.h;
        while cur < uh {
            if uh % cur != 0 || (uh / cur) % 2 != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "cannot upsample {cur} to {uh} by doubling"
                )));
            }
            up = up.upsample_nearest_2x();
            cur *= 2;
        }
        acc = Some(match acc {
            Some(a) => a.add(&up),
            None => up,
        });
    }
    let avg = acc.unwrap().scale(1.0 / maps.len() as f32).reshape(&[n, uh * uw]);
    Ok((avg, uh, uw))
}

/// Downsample the region masks to the attention resolution by area pooling,
/// then re-binarize at 0.5. Returns `[N, U*V]`.
pub fn masks_at_resolution(masks: &RegionMaskSet, uh: usize, uw: usize) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(masks.masks.len() * uh * uw);
    for m in &masks.masks {
        let small = binarize(&area_downsample(m, uh, uw), 0.5);
        flat.extend_from_slice(small.data());
    }
    Ok(Tensor::from_vec(&[masks.masks.len(), uh * uw], flat))
}

pub struct AttentionLossOutput {
    pub loss: Var,
    /// Layer-averaged map, `[N, U*V]`.
    pub averaged: Var,
    pub res: (usize, usize),
    /// Regions dropped because their downsampled mask was empty.
    pub skipped_regions: Vec<usize>,
}

/// Focal + dice alignment between the layer-averaged attention maps and the
/// region masks. Regions whose downsampled mask is empty are skipped (the
/// caller should surface the returned warning list).
pub fn loss_attention(
    maps: &[AttnLayerMap],
    masks: &RegionMaskSet,
    cfg: &AttnLossConfig,
) -> Result<AttentionLossOutput> {
    let (averaged, uh, uw) = average_maps(maps)?;
    let target = masks_at_resolution(masks, uh, uw)?;
    let n = target.rows();
    if averaged.shape()[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "{} attention tokens vs {n} region masks",
            averaged.shape()[0]
        )));
    }
    let mut include = vec![true; n];
    let mut skipped = Vec::new();
    for r in 0..n {
        let any = (0..uh * uw).any(|i| target.at2(r, i) > 0.5);
        if !any {
            include[r] = false;
            skipped.push(r);
        }
    }
    if include.iter().all(|&b| !b) {
        return Err(Error::InvalidInput(
            "every region mask is empty at attention resolution".into(),
        ));
    }
    let loss = averaged.focal_dice(
        &target,
        cfg.focal_alpha,
        cfg.focal_gamma,
        cfg.dice == DiceReduction::PerPixel,
        &include,
    );
    Ok(AttentionLossOutput {
        loss,
        averaged,
        res: (uh, uw),
        skipped_regions: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradtape::Tape;

    fn mask_set(h: usize, w: usize) -> RegionMaskSet {
        // four horizontal bands
        let band = |lo: usize, hi: usize| {
            Tensor::from_fn(&[h, w], |i| {
                let y = i / w;
                if y >= lo && y < hi {
                    1.0
                } else {
                    0.0
                }
            })
        };
        RegionMaskSet::from_masks([
            band(0, h / 4),
            band(h / 4, h / 2),
            band(h / 2, 3 * h / 4),
            band(3 * h / 4, h),
        ])
    }

    fn map_from_tensor(tape: &Tape, t: Tensor, h: usize, w: usize) -> AttnLayerMap {
        AttnLayerMap {
            h,
            w,
            probs: tape.input(t),
            per_head: vec![],
        }
    }

    #[test]
    fn perfect_binary_alignment_scores_zero_dice_and_focal() {
        let tape = Tape::new();
        let masks = mask_set(8, 8);
        let target = masks_at_resolution(&masks, 8, 8).unwrap();
        // probs exactly equal to the (one-hot per location) masks
        let probs = Tensor::from_fn(&[64, 4], |i| target.at2(i % 4, i / 4));
        let m = map_from_tensor(&tape, probs, 8, 8);
        let out = loss_attention(&[m], &masks, &AttnLossConfig::default()).unwrap();
        // focal at p=1-eps and dice at exact overlap are both ~0
        assert!(out.loss.scalar_value() < 1e-4, "{}", out.loss.scalar_value());
        assert!(out.skipped_regions.is_empty());
    }

    #[test]
    fn uniform_maps_match_the_reference_formula() {
        let tape = Tape::new();
        let masks = mask_set(8, 8);
        let probs = Tensor::full(&[64, 4], 0.25);
        let m = map_from_tensor(&tape, probs, 8, 8);
        let cfg = AttnLossConfig::default();
        let out = loss_attention(&[m], &masks, &cfg).unwrap();

        let target = masks_at_resolution(&masks, 8, 8).unwrap();
        let maps: Vec<Vec<f64>> = (0..4).map(|_| vec![0.25f64; 64]).collect();
        let tgt: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..64).map(|i| target.at2(r, i) as f64).collect())
            .collect();
        let want = crate::oracle::attention_loss(&maps, &tgt, 0.25, 2.0, false, &[true; 4]);
        let got = out.loss.scalar_value() as f64;
        assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn multi_resolution_averaging_stays_normalized() {
        let tape = Tape::new();
        let masks = mask_set(8, 8);
        let p8 = Tensor::from_fn(&[64, 4], |i| if i % 4 == 0 { 0.7 } else { 0.1 });
        let p4 = Tensor::from_fn(&[16, 4], |i| if i % 4 == 1 { 0.7 } else { 0.1 });
        let maps = vec![
            map_from_tensor(&tape, p8, 8, 8),
            map_from_tensor(&tape, p4, 4, 4),
        ];
        let out = loss_attention(&maps, &masks, &AttnLossConfig::default()).unwrap();
        let avg = out.averaged.value();
        assert_eq!(out.res, (8, 8));
        for loc in 0..64 {
            let s: f32 = (0..4).map(|r| avg.at2(r, loc)).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_region_is_skipped_with_a_note() {
        let tape = Tape::new();
        // region 2 empty everywhere
        let h = 8;
        let band = |lo: usize, hi: usize| {
            Tensor::from_fn(&[h, h], |i| {
                let y = i / h;
                (y >= lo && y < hi) as u8 as f32
            })
        };
        let masks = RegionMaskSet::from_masks([
            band(0, 2),
            band(2, 4),
            Tensor::zeros(&[h, h]),
            band(6, 8),
        ]);
        let probs = Tensor::full(&[64, 4], 0.25);
        let m = map_from_tensor(&tape, probs, 8, 8);
        let out = loss_attention(&[m], &masks, &AttnLossConfig::default()).unwrap();
        assert_eq!(out.skipped_regions, vec![2]);
        assert!(out.loss.scalar_value().is_finite());
    }
}
