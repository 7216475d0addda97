//! Content augmentations that alter face structure while preserving makeup
//! appearance: TPS, affine, crop-resize, flip.

use gradtape::nn::SplitMix64;
use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imageio::{image_dims, warp_with};
use crate::pairs::AffineTransform;
use crate::synthface::RegionMaskSet;

use super::tps::TpsMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub tps_grid: usize,
    /// Standard deviation of the control-point displacement in pixels.
    pub tps_scale: f32,
    pub crop_min: f32,
    pub crop_max: f32,
    pub flip_p: f32,
    pub rot_max_deg: f32,
    /// Max translation as a fraction of the image side.
    pub trans_max: f32,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            tps_grid: 3,
            tps_scale: 2.0,
            crop_min: 0.82,
            crop_max: 1.0,
            flip_p: 0.5,
            rot_max_deg: 8.0,
            trans_max: 0.04,
            scale_min: 0.92,
            scale_max: 1.08,
        }
    }
}

impl AugmentationPolicy {
    /// Identity policy: augment() returns the input bit-exactly.
    pub fn zero() -> Self {
        Self {
            tps_grid: 3,
            tps_scale: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            flip_p: 0.0,
            rot_max_deg: 0.0,
            trans_max: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

/// Geometry applied to everything (image and masks) identically so region
/// statistics remain comparable after warping.
pub struct AppliedAugment {
    pub image: Tensor,
    pub warped_masks: Option<RegionMaskSet>,
}

fn warp_mask_like(mask: &Tensor, h: usize, w: usize, lookup: impl Fn(f32, f32) -> (f32, f32)) -> Tensor {
    warp_with(mask, h, w, lookup).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Draw and apply one augmentation. The draw order is fixed (TPS grid,
/// affine, crop, flip) so a seed fully determines the result.
pub fn augment(
    image: &Tensor,
    masks: Option<&RegionMaskSet>,
    policy: &AugmentationPolicy,
    rng: &mut SplitMix64,
) -> Result<AppliedAugment> {
    let (h, w) = image_dims(image);
    let mut img = image.clone();
    let mut warped_masks = masks.cloned();

    // TPS: jitter an interior control grid.
    if policy.tps_scale > 0.0 {
        let g = policy.tps_grid.max(2);
        let mut src = Vec::with_capacity(g * g);
        let mut dst = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                let x = w as f32 * (0.15 + 0.7 * gx as f32 / (g - 1) as f32);
                let y = h as f32 * (0.15 + 0.7 * gy as f32 / (g - 1) as f32);
                src.push((x, y));
                dst.push((
                    x + (rng.normal() * policy.tps_scale).clamp(-2.5 * policy.tps_scale, 2.5 * policy.tps_scale),
                    y + (rng.normal() * policy.tps_scale).clamp(-2.5 * policy.tps_scale, 2.5 * policy.tps_scale),
                ));
            }
        }
        let map = TpsMap::fit(&dst, &src)?;
        img = warp_with(&img, h, w, |x, y| map.eval(x, y));
        if let Some(ms) = &mut warped_masks {
            *ms = RegionMaskSet::from_masks([
                warp_mask_like(&ms.masks[0], h, w, |x, y| map.eval(x, y)),
                warp_mask_like(&ms.masks[1], h, w, |x, y| map.eval(x, y)),
                warp_mask_like(&ms.masks[2], h, w, |x, y| map.eval(x, y)),
                warp_mask_like(&ms.masks[3], h, w, |x, y| map.eval(x, y)),
            ]);
        }
    }

    // Affine (rotation/scale/translation) composed with crop-resize, applied
    // as a single resampling pass.
    let theta = if policy.rot_max_deg > 0.0 {
        rng.range(-policy.rot_max_deg, policy.rot_max_deg).to_radians() as f64
    } else {
        0.0
    };
    let scale = if policy.scale_min < policy.scale_max {
        rng.range(policy.scale_min, policy.scale_max) as f64
    } else {
        policy.scale_min as f64
    };
    let (tx, ty) = if policy.trans_max > 0.0 {
        (
            (rng.range(-policy.trans_max, policy.trans_max) * w as f32) as f64,
            (rng.range(-policy.trans_max, policy.trans_max) * h as f32) as f64,
        )
    } else {
        (0.0, 0.0)
    };
    let crop = if policy.crop_min < policy.crop_max {
        rng.range(policy.crop_min, policy.crop_max) as f64
    } else {
        policy.crop_min as f64
    };
    let (ox, oy) = if crop < 1.0 {
        (
            (rng.uniform() as f64) * (1.0 - crop) * w as f64,
            (rng.uniform() as f64) * (1.0 - crop) * h as f64,
        )
    } else {
        (0.0, 0.0)
    };

    let needs_affine = theta != 0.0 || scale != 1.0 || tx != 0.0 || ty != 0.0 || crop < 1.0;
    if needs_affine {
        let rigid = AffineTransform::rigid_about(w as f64 / 2.0, h as f64 / 2.0, theta, scale, tx, ty);
        // Crop box [ox, ox + crop*w] mapped back to the full frame.
        let crop_map = AffineTransform {
            m: [[1.0 / crop, 0.0, ox], [0.0, 1.0 / crop, oy]],
        };
        // Output pixel -> rigid^-1(crop_map^-1 ... ); build the forward map
        // out = crop^-1 ∘ rigid and invert once.
        let crop_inv = crop_map.inverse()?;
        let forward = crop_inv.compose(&rigid);
        let inv = forward.inverse()?;
        img = warp_with(&img, h, w, |x, y| {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            (sx as f32, sy as f32)
        });
        if let Some(ms) = &mut warped_masks {
            *ms = RegionMaskSet::from_masks([
                warp_mask_like(&ms.masks[0], h, w, |x, y| {
                    let (sx, sy) = inv.apply(x as f64, y as f64);
                    (sx as f32, sy as f32)
                }),
                warp_mask_like(&ms.masks[1], h, w, |x, y| {
                    let (sx, sy) = inv.apply(x as f64, y as f64);
                    (sx as f32, sy as f32)
                }),
                warp_mask_like(&ms.masks[2], h, w, |x, y| {
                    let (sx, sy) = inv.apply(x as f64, y as f64);
                    (sx as f32, sy as f32)
                }),
                warp_mask_like(&ms.masks[3], h, w, |x, y| {
                    let (sx, sy) = inv.apply(x as f64, y as f64);
                    (sx as f32, sy as f32)
                }),
            ]);
        }
    }

    // Horizontal flip: exact column mirror.
    if policy.flip_p > 0.0 && rng.coin(policy.flip_p) {
        img = flip_h(&img);
        if let Some(ms) = &mut warped_masks {
            *ms = RegionMaskSet::from_masks([
                flip_h(&ms.masks[0]),
                flip_h(&ms.masks[1]),
                flip_h(&ms.masks[2]),
                flip_h(&ms.masks[3]),
            ]);
        }
    }

    Ok(AppliedAugment {
        image: img,
        warped_masks,
    })
}

fn flip_h(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (c, h, w) = if s.len() == 3 { (s[0], s[1], s[2]) } else { (1, s[0], s[1]) };
    Tensor::from_fn(&s, |i| {
        let plane = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        t.data()[(plane.min(c - 1) * h + y) * w + (w - 1 - x)]
    })
}

/// Two independently augmented views of the same image; deterministic in the
/// seed.
pub fn two_views(image: &Tensor, policy: &AugmentationPolicy, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = SplitMix64::new(seed ^ 0x7f1e_55aa);
    let v1 = augment(image, None, policy, &mut rng)?;
    let v2 = augment(image, None, policy, &mut rng)?;
    Ok((v1.image, v2.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::mean_color;
    use crate::synthface::{apply_makeup, make_style_catalog, render_face, FaceSpec, Region};

    #[test]
    fn zero_policy_returns_the_input_bit_exactly() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 11) as f32 / 11.0);
        let (a, b) = two_views(&img, &AugmentationPolicy::zero(), 9).unwrap();
        assert_eq!(a.data(), img.data());
        assert_eq!(b.data(), img.data());
    }

    #[test]
    fn same_seed_reproduces_identical_views() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 13) as f32 / 13.0);
        let p = AugmentationPolicy::default();
        let (a1, b1) = two_views(&img, &p, 4).unwrap();
        let (a2, b2) = two_views(&img, &p, 4).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn views_differ_but_region_color_statistics_survive() {
        let r = render_face(&FaceSpec::sample(3, 64), 64).unwrap();
        let style = make_style_catalog(4, 0, 0.03).unwrap().remove(1);
        let made = apply_makeup(&r.image, &r.masks, &style).unwrap();

        let p = AugmentationPolicy::default();
        let mut rng = SplitMix64::new(77);
        let applied = augment(&made, Some(&r.masks), &p, &mut rng).unwrap();
        assert!(crate::imageio::mse(&applied.image, &made) > 1e-5, "view did not change");

        let warped = applied.warped_masks.unwrap();
        for region in [Region::Skin, Region::Mouth] {
            let before = mean_color(&made, r.masks.mask(region)).unwrap();
            let after = mean_color(&applied.image, warped.mask(region)).unwrap();
            for c in 0..3 {
                assert!(
                    (before[c] - after[c]).abs() < 0.06,
                    "{:?} channel {c}: {} vs {}",
                    region,
                    before[c],
                    after[c]
                );
            }
        }
    }

    #[test]
    fn augmented_views_stay_in_range() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let p = AugmentationPolicy::default();
        for seed in 0..8 {
            let (a, b) = two_views(&img, &p, seed).unwrap();
            for &v in a.data().iter().chain(b.data()) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
