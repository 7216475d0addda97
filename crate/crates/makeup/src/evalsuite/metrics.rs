//! Evaluation metrics: SSIM, non-face MSE, attention/region IoU, per-region
//! style error, and the geometry-only identity proxy.

use gradtape::Tensor;

use crate::error::{Error, Result};
use crate::imageio::{
    area_downsample, binarize, image_dims, mask_dims, mean_color, sobel_edges, to_gray,
};
use crate::pairs::iou;
use crate::synthface::{apply_makeup, MakeupStyle, Region, RegionMaskSet, NUM_REGIONS};

/// Mean structural similarity over sliding 8x8 uniform windows on the
/// channel-mean grayscale images, with the canonical constants at L = 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ga = if a.shape().len() == 3 { to_gray(a) } else { a.clone() };
    let gb = if b.shape().len() == 3 { to_gray(b) } else { b.clone() };
    ssim_gray(&ga, &gb)
}

pub fn ssim_gray(ga: &Tensor, gb: &Tensor) -> Result<f32> {
    let (h, w) = mask_dims(ga);
    const WIN: usize = 8;
    if h < WIN || w < WIN {
        return Err(Error::InvalidInput(format!(
            "images must be at least {WIN}x{WIN} for SSIM, got {h}x{w}"
        )));
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let n = (WIN * WIN) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let mut sa = 0.0f64;
            let mut sb = 0.0f64;
            let mut saa = 0.0f64;
            let mut sbb = 0.0f64;
            let mut sab = 0.0f64;
            for dy in 0..WIN {
                for dx in 0..WIN {
                    let va = ga.data()[(y0 + dy) * w + x0 + dx] as f64;
                    let vb = gb.data()[(y0 + dy) * w + x0 + dx] as f64;
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let ma = sa / n;
            let mb = sb / n;
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}

/// MSE restricted to `mask == 1` pixels (all channels). Errors on an empty
/// mask.
pub fn l2_nonface(generated: &Tensor, source: &Tensor, non_face_mask: &Tensor) -> Result<f64> {
    let (h, w) = image_dims(generated);
    if source.shape() != generated.shape() {
        return Err(Error::ShapeMismatch("generated vs source".into()));
    }
    let (mh, mw) = mask_dims(non_face_mask);
    if (mh, mw) != (h, w) {
        return Err(Error::ShapeMismatch("image vs mask".into()));
    }
    let n = h * w;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        if non_face_mask.data()[i] > 0.5 {
            count += 1;
            for c in 0..3 {
                let d = generated.data()[c * n + i] as f64 - source.data()[c * n + i] as f64;
                total += d * d;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("empty non-face mask".into()));
    }
    Ok(total / (3 * count) as f64)
}

/// IoU between the argmax-region map of the averaged attention `[N, U, V]`
/// and each region mask (area-pooled to the same resolution).
pub fn attention_region_iou(averaged: &Tensor, masks: &RegionMaskSet) -> Result<Vec<f32>> {
    let s = averaged.shape().to_vec();
    if s.len() != 3 || s[0] != NUM_REGIONS {
        return Err(Error::ShapeMismatch(format!(
            "expected [{NUM_REGIONS}, U, V] averaged maps, got {s:?}"
        )));
    }
    let (uh, uw) = (s[1], s[2]);
    let pix = uh * uw;
    // argmax over regions per location
    let mut argmax = vec![0usize; pix];
    for p in 0..pix {
        let mut best = 0usize;
        let mut bv = f32::MIN;
        for r in 0..NUM_REGIONS {
            let v = averaged.data()[r * pix + p];
            if v > bv {
                bv = v;
                best = r;
            }
        }
        argmax[p] = best;
    }
    let mut out = Vec::with_capacity(NUM_REGIONS);
    for r in 0..NUM_REGIONS {
        let pred = Tensor::from_fn(&[uh, uw], |p| (argmax[p] == r) as u8 as f32);
        let target = binarize(&area_downsample(&masks.masks[r], uh, uw), 0.5);
        out.push(iou(&pred, &target));
    }
    Ok(out)
}

/// Per-region absolute error between the generated mean color and the mean
/// color the analytic applicator implies for (source, style). Returns one
/// `[r,g,b]` error triple per region.
pub fn region_style_error(
    generated: &Tensor,
    masks: &RegionMaskSet,
    style: &MakeupStyle,
    source: &Tensor,
) -> Result<Vec<[f32; 3]>> {
    let oracle_after = apply_makeup(source, masks, style)?;
    let mut out = Vec::with_capacity(NUM_REGIONS);
    for r in Region::all() {
        let got = mean_color(generated, masks.mask(r))?;
        let want = mean_color(&oracle_after, masks.mask(r))?;
        out.push([
            (got[0] - want[0]).abs(),
            (got[1] - want[1]).abs(),
            (got[2] - want[2]).abs(),
        ]);
    }
    Ok(out)
}

/// Geometry-only identity proxy: SSIM between Sobel edge maps of the
/// generated image and the source.
pub fn structure_ssim(generated: &Tensor, source: &Tensor) -> Result<f32> {
    ssim_gray(&sobel_edges(&to_gray(generated)), &sobel_edges(&to_gray(source)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{make_style_catalog, render_face, FaceSpec};

    #[test]
    fn ssim_self_is_one_and_inverse_is_negative() {
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 31) % 97) as f32 / 97.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-6);
        let binary = Tensor::from_fn(&[3, 16, 16], |i| ((i / 16) % 2) as f32);
        let inverted = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverted).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_the_direct_formula_on_a_single_window() {
        let mut rng = gradtape::nn::SplitMix64::new(8);
        let a = Tensor::from_fn(&[8, 8], |_| rng.uniform());
        let b = Tensor::from_fn(&[8, 8], |_| rng.uniform());
        let got = ssim_gray(&a, &b).unwrap() as f64;
        let av: Vec<f64> = a.data().iter().map(|&x| x as f64).collect();
        let bv: Vec<f64> = b.data().iter().map(|&x| x as f64).collect();
        let want = crate::oracle::ssim_window(&av, &bv);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn l2_nonface_conventions() {
        let src = Tensor::full(&[3, 8, 8], 0.3);
        let mask = Tensor::from_fn(&[8, 8], |i| (i < 32) as u8 as f32);
        assert_eq!(l2_nonface(&src, &src, &mask).unwrap(), 0.0);
        let shifted = src.map(|v| v + 0.1);
        let got = l2_nonface(&shifted, &src, &mask).unwrap();
        assert!((got - 0.01).abs() < 1e-6);
        assert!(l2_nonface(&src, &src, &Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn attention_iou_is_one_for_one_hot_mask_maps() {
        // Four horizontal bands at 64x64, aligned with the 4x downsampling
        // blocks so the 16x16 masks stay disjoint and exactly one-hot.
        let band = |lo: usize, hi: usize| {
            Tensor::from_fn(&[64, 64], |i| {
                let y = i / 64;
                (y >= lo && y < hi) as u8 as f32
            })
        };
        let masks = crate::synthface::RegionMaskSet::from_masks([
            band(0, 16),
            band(16, 32),
            band(32, 48),
            band(48, 64),
        ]);
        let (uh, uw) = (16usize, 16usize);
        let pix = uh * uw;
        let mut data = vec![0.0f32; NUM_REGIONS * pix];
        for reg in 0..NUM_REGIONS {
            let m = binarize(&area_downsample(&masks.masks[reg], uh, uw), 0.5);
            for p in 0..pix {
                data[reg * pix + p] = m.data()[p];
            }
        }
        let avg = Tensor::from_vec(&[NUM_REGIONS, uh, uw], data);
        let ious = attention_region_iou(&avg, &masks).unwrap();
        for (reg, v) in ious.iter().enumerate() {
            assert_eq!(*v, 1.0, "region {reg} iou {v} despite one-hot maps");
        }
    }

    #[test]
    fn uniform_attention_matches_the_counting_baseline() {
        let r = render_face(&FaceSpec::sample(3, 64), 64).unwrap();
        let (uh, uw) = (16usize, 16usize);
        // uniform maps: argmax picks region 0 everywhere (ties break low)
        let avg = Tensor::full(&[NUM_REGIONS, uh, uw], 0.25);
        let ious = attention_region_iou(&avg, &r.masks).unwrap();
        // baseline computed directly from the downsampled masks
        let skin = binarize(&area_downsample(&r.masks.masks[0], uh, uw), 0.5);
        let skin_count = skin.data().iter().filter(|&&v| v > 0.5).count();
        let want0 = skin_count as f32 / (uh * uw) as f32;
        assert!((ious[0] - want0).abs() < 1e-6);
        for v in &ious[1..] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn style_error_is_zero_on_the_oracle_and_localized_otherwise() {
        let rf = render_face(&FaceSpec::sample(9, 64), 64).unwrap();
        let style = make_style_catalog(3, 2, 0.03).unwrap().remove(0);
        let after = apply_makeup(&rf.image, &rf.masks, &style).unwrap();
        let zero = region_style_error(&after, &rf.masks, &style, &rf.image).unwrap();
        for e in &zero {
            for c in 0..3 {
                assert!(e[c] < 1e-6);
            }
        }

        // mouth-only style: errors vanish everywhere except the mouth
        let mut mouth_only = MakeupStyle::identity(7);
        mouth_only.mouth_edit.color = [0.9, 0.1, 0.2];
        mouth_only.mouth_edit.alpha = 0.8;
        let err = region_style_error(&rf.image, &rf.masks, &mouth_only, &rf.image).unwrap();
        for (reg, e) in err.iter().enumerate() {
            let max = e.iter().cloned().fold(0.0f32, f32::max);
            if reg == Region::Mouth.index() {
                assert!(max > 0.05, "mouth error missing");
            } else {
                assert!(max < 1e-6, "region {reg} unexpectedly nonzero");
            }
        }

        // no makeup applied: error equals alpha * |edit - base| per channel
        // on the flat-shaded regions (skin here).
        let mut skin_only = MakeupStyle::identity(8);
        skin_only.skin_edit.tint = [1.0, 0.0, 0.0];
        skin_only.skin_edit.alpha = 0.5;
        let err = region_style_error(&rf.image, &rf.masks, &skin_only, &rf.image).unwrap();
        let base = mean_color(&rf.image, rf.masks.mask(Region::Skin)).unwrap();
        for c in 0..3 {
            let want = 0.5 * (skin_only.skin_edit.tint[c] - base[c]).abs();
            assert!(
                (err[Region::Skin.index()][c] - want).abs() < 1e-5,
                "channel {c}: {} vs {}",
                err[Region::Skin.index()][c],
                want
            );
        }
    }
}
