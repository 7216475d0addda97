//! Before/after training pairs: landmark-based affine alignment, mask-guided
//! blending, and IoU filtering. Synthetic drift is injected to exercise the
//! filters the way editing-model misalignment would.

use std::fs;
use std::path::Path;

use gradtape::nn::SplitMix64;
use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{box_feather, dilate, image_dims, mask_dims, save_rgb, warp_with};
use crate::synthface::{DatasetManifest, FaceAssets, LandmarkSet, Region};

/// 2x3 affine map in continuous pixel coordinates (f64 for fit precision).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Rotation by `theta` and isotropic `scale` about `(cx, cy)`, then
    /// translation by `(tx, ty)`.
    pub fn rigid_about(cx: f64, cy: f64, theta: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (a, b) = (scale * c, scale * s);
        // p' = R(p - c) + c + t
        Self {
            m: [
                [a, -b, cx - a * cx + b * cy + tx],
                [b, a, cy - b * cx - a * cy + ty],
            ],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn apply_points(&self, pts: &LandmarkSet) -> LandmarkSet {
        LandmarkSet {
            points: pts
                .points
                .iter()
                .map(|&(x, y)| {
                    let (nx, ny) = self.apply(x as f64, y as f64);
                    (nx as f32, ny as f32)
                })
                .collect(),
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return Err(Error::Degenerate("affine transform is singular".into()));
        }
        let inv = 1.0 / d;
        let a = self.m[1][1] * inv;
        let b = -self.m[0][1] * inv;
        let c = -self.m[1][0] * inv;
        let e = self.m[0][0] * inv;
        let tx = -(a * self.m[0][2] + b * self.m[1][2]);
        let ty = -(c * self.m[0][2] + e * self.m[1][2]);
        Ok(AffineTransform {
            m: [[a, b, tx], [c, e, ty]],
        })
    }

    /// `self` after `other` (self ∘ other).
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let mut m = [[0.0f64; 3]; 2];
        for r in 0..2 {
            for c in 0..2 {
                m[r][c] = self.m[r][0] * other.m[0][c] + self.m[r][1] * other.m[1][c];
            }
            m[r][2] = self.m[r][0] * other.m[0][2] + self.m[r][1] * other.m[1][2] + self.m[r][2];
        }
        AffineTransform { m }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        let id = AffineTransform::identity();
        self.m
            .iter()
            .flatten()
            .zip(id.m.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Least-squares affine fit mapping `src` points onto `dst` points.
pub fn fit_affine(src: &LandmarkSet, dst: &LandmarkSet) -> Result<AffineTransform> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "point counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            src.len()
        )));
    }
    // Normal equations with design rows [x, y, 1]; shared 3x3 Gram matrix,
    // one rhs per output coordinate.
    let mut g = [[0.0f64; 3]; 3];
    let mut rx = [0.0f64; 3];
    let mut ry = [0.0f64; 3];
    for (&(sx, sy), &(dx, dy)) in src.points.iter().zip(&dst.points) {
        let row = [sx as f64, sy as f64, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += row[i] * row[j];
            }
            rx[i] += row[i] * dx as f64;
            ry[i] += row[i] * dy as f64;
        }
    }
    let row_x = solve3(g, rx).ok_or_else(|| {
        Error::Degenerate("collinear or degenerate landmark configuration".into())
    })?;
    let row_y = solve3(g, ry).ok_or_else(|| {
        Error::Degenerate("collinear or degenerate landmark configuration".into())
    })?;
    let t = AffineTransform { m: [row_x, row_y] };
    if t.det().abs() < 1e-12 {
        return Err(Error::Degenerate("fitted affine transform is singular".into()));
    }
    Ok(t)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let mut piv = col;
        for r in (col + 1)..3 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for r in (0..3).rev() {
        let mut s = b[r];
        for c in (r + 1)..3 {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Forward-warp an image (or mask/gray map) by `transform`: output pixel at
/// `T(p)` shows the input at `p`, implemented by inverse-mapped bilinear
/// sampling. Out-of-bounds samples clamp to the border.
pub fn warp_image(image: &Tensor, transform: &AffineTransform, out_size: (usize, usize)) -> Result<Tensor> {
    let inv = transform.inverse()?;
    Ok(warp_with(image, out_size.0, out_size.1, |x, y| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        (sx as f32, sy as f32)
    }))
}

/// Warp a binary mask and re-binarize.
pub fn warp_mask(mask: &Tensor, transform: &AffineTransform) -> Result<Tensor> {
    let (h, w) = mask_dims(mask);
    Ok(warp_image(mask, transform, (h, w))?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Convex blend of `warped` over `source` through a feathered mask.
pub fn blend_face(
    source: &Tensor,
    warped: &Tensor,
    face_mask: &Tensor,
    feather_radius: usize,
) -> Result<Tensor> {
    let (h, w) = image_dims(source);
    if warped.shape() != source.shape() {
        return Err(Error::ShapeMismatch("source vs warped".into()));
    }
    let (mh, mw) = mask_dims(face_mask);
    if (mh, mw) != (h, w) {
        return Err(Error::ShapeMismatch("image vs face mask".into()));
    }
    let m = box_feather(face_mask, feather_radius);
    let n = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let a = m.data()[i % n];
        source.data()[i] * (1.0 - a) + warped.data()[i] * a
    }))
}

/// Intersection over union of two binary masks; `1.0` when both are empty.
pub fn iou(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "iou mask shapes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f32 / union as f32
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairOptions {
    pub iou_threshold: f32,
    pub misalignment_rate: f32,
    pub feather_radius: usize,
    /// Landmark-based re-alignment on/off (off reproduces the naive
    /// blend-only pipeline for comparison).
    pub align: bool,
    pub max_drift_rotation_deg: f32,
    pub max_drift_translation: f32,
    pub max_drift_scale_dev: f32,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.6,
            misalignment_rate: 0.3,
            feather_radius: 2,
            align: true,
            max_drift_rotation_deg: 7.0,
            max_drift_translation: 3.0,
            max_drift_scale_dev: 0.06,
            seed: 0,
        }
    }
}

/// One aligned (or rejected) training pair, fully in memory.
pub struct BuiltPair {
    pub reference: Tensor,
    pub accepted: bool,
    pub rejection_reason: Option<String>,
    pub iou_eyes: f32,
    pub iou_mouth: f32,
    pub drifted: bool,
}

/// Pair metadata as persisted in `pairs_manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingPairRecord {
    pub pair_id: u32,
    pub face_id: u32,
    pub style_id: u32,
    pub source: String,
    pub reference: String,
    pub face_dir: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<String>,
    pub iou_eyes: f32,
    pub iou_mouth: f32,
    pub drifted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairsManifest {
    pub options: PairOptions,
    pub dataset_root: String,
    pub pairs: Vec<TrainingPairRecord>,
}

impl PairsManifest {
    pub fn load(dir: &Path) -> Result<PairsManifest> {
        let raw = fs::read_to_string(dir.join("pairs_manifest.json"))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn accepted(&self) -> impl Iterator<Item = &TrainingPairRecord> {
        self.pairs.iter().filter(|p| p.accepted)
    }
}

fn sample_drift(rng: &mut SplitMix64, opts: &PairOptions, size: f32) -> AffineTransform {
    let theta = rng.range(
        -opts.max_drift_rotation_deg.to_radians(),
        opts.max_drift_rotation_deg.to_radians(),
    ) as f64;
    let scale = 1.0 + rng.range(-opts.max_drift_scale_dev, opts.max_drift_scale_dev) as f64;
    let tx = rng.range(-opts.max_drift_translation, opts.max_drift_translation) as f64;
    let ty = rng.range(-opts.max_drift_translation, opts.max_drift_translation) as f64;
    AffineTransform::rigid_about(size as f64 / 2.0, size as f64 / 2.0, theta, scale, tx, ty)
}

/// Build one pair from in-memory assets. `after` is the oracle after-makeup
/// image, aligned with `assets` by construction; drift (if any) simulates an
/// editing model returning a spatially shifted result.
pub fn build_pair(
    assets: &FaceAssets,
    after: &Tensor,
    drift: Option<&AffineTransform>,
    opts: &PairOptions,
) -> Result<BuiltPair> {
    let (h, w) = image_dims(after);
    let src_masks = &assets.masks;
    let union = src_masks.face_union();

    let (aligned_after, mask_transform, drifted) = match drift {
        None => (after.clone(), AffineTransform::identity(), false),
        Some(d) => {
            let drifted_img = warp_image(after, d, (h, w))?;
            let drifted_lm = d.apply_points(&assets.landmarks);
            if opts.align {
                let back = fit_affine(&drifted_lm, &assets.landmarks)?;
                (
                    warp_image(&drifted_img, &back, (h, w))?,
                    back.compose(d),
                    true,
                )
            } else {
                (drifted_img, *d, true)
            }
        }
    };

    // Blend over the dilated union so the true face region is taken verbatim
    // from the aligned after-image, then restore non-face pixels from the
    // source (the same compositing contract as inference).
    let reference = if drifted {
        let blend_mask = dilate(&union, opts.feather_radius);
        let blended = blend_face(&assets.before, &aligned_after, &blend_mask, opts.feather_radius)?;
        let n = h * w;
        Tensor::from_fn(&[3, h, w], |i| {
            if union.data()[i % n] > 0.5 {
                blended.data()[i]
            } else {
                assets.before.data()[i]
            }
        })
    } else {
        aligned_after
    };

    // Acceptance check on the classes the drift actually distorts.
    let (iou_eyes, iou_mouth) = if drifted {
        let eyes = warp_mask(src_masks.mask(Region::Eyes), &mask_transform)?;
        let mouth = warp_mask(src_masks.mask(Region::Mouth), &mask_transform)?;
        (
            iou(&eyes, src_masks.mask(Region::Eyes)),
            iou(&mouth, src_masks.mask(Region::Mouth)),
        )
    } else {
        (1.0, 1.0)
    };

    let mut reason = None;
    if iou_eyes < opts.iou_threshold {
        reason = Some(format!(
            "eye mask iou {iou_eyes:.3} below threshold {:.3}",
            opts.iou_threshold
        ));
    } else if iou_mouth < opts.iou_threshold {
        reason = Some(format!(
            "mouth mask iou {iou_mouth:.3} below threshold {:.3}",
            opts.iou_threshold
        ));
    }

    Ok(BuiltPair {
        reference,
        accepted: reason.is_none(),
        rejection_reason: reason,
        iou_eyes,
        iou_mouth,
        drifted,
    })
}

/// Build pairs for every record in a dataset manifest, writing reference
/// images and `pairs_manifest.json` under `out_dir`. Output order follows
/// the manifest.
pub fn build_pairs(
    manifest: &DatasetManifest,
    dataset_root: &Path,
    opts: &PairOptions,
    out_dir: &Path,
) -> Result<PairsManifest> {
    if manifest.records.is_empty() {
        return Err(Error::InvalidInput("dataset manifest has no records".into()));
    }
    fs::create_dir_all(out_dir)?;
    let size = manifest.image_size as f32;

    let mut pairs = Vec::with_capacity(manifest.records.len());
    for (idx, record) in manifest.records.iter().enumerate() {
        let entry = manifest
            .faces
            .iter()
            .find(|f| f.face_id == record.face_id)
            .ok_or_else(|| Error::MissingData(format!("face {}", record.face_id)))?;
        let assets = crate::synthface::load_face_assets(dataset_root, entry)?;
        let after = crate::imageio::load_rgb(&dataset_root.join(&record.after))?;

        let mut rng = SplitMix64::derive(opts.seed, idx as u64);
        let drift = if rng.coin(opts.misalignment_rate) {
            Some(sample_drift(&mut rng, opts, size))
        } else {
            None
        };
        let built = build_pair(&assets, &after, drift.as_ref(), opts)?;

        let rel = format!("pair_{idx:04}.png");
        save_rgb(&built.reference, &out_dir.join(&rel))?;
        pairs.push(TrainingPairRecord {
            pair_id: idx as u32,
            face_id: record.face_id,
            style_id: record.style_id,
            source: format!("{}/before.png", entry.dir),
            reference: rel,
            face_dir: entry.dir.clone(),
            accepted: built.accepted,
            rejection_reason: built.rejection_reason,
            iou_eyes: built.iou_eyes,
            iou_mouth: built.iou_mouth,
            drifted: built.drifted,
        });
    }

    let pm = PairsManifest {
        options: opts.clone(),
        dataset_root: dataset_root.to_string_lossy().into_owned(),
        pairs,
    };
    fs::write(
        out_dir.join("pairs_manifest.json"),
        serde_json::to_string_pretty(&pm)?,
    )?;
    Ok(pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{render_face, FaceSpec};

    fn square_landmarks(pts: &[(f32, f32)]) -> LandmarkSet {
        LandmarkSet {
            points: pts.to_vec(),
        }
    }

    #[test]
    fn fit_identity_and_translation() {
        let src = square_landmarks(&[(1.0, 1.0), (10.0, 2.0), (4.0, 9.0), (8.0, 8.0)]);
        let t = fit_affine(&src, &src).unwrap();
        assert!(t.is_identity(1e-9));

        let dst = LandmarkSet {
            points: src.points.iter().map(|&(x, y)| (x + 5.0, y + 3.0)).collect(),
        };
        let t = fit_affine(&src, &dst).unwrap();
        assert!((t.m[0][0] - 1.0).abs() < 1e-9);
        assert!((t.m[0][2] - 5.0).abs() < 1e-9);
        assert!((t.m[1][2] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn fit_recovers_known_matrix() {
        let known = AffineTransform {
            m: [[1.1, 0.2, 3.0], [-0.1, 0.9, -2.0]],
        };
        let src = square_landmarks(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (7.0, 5.0)]);
        let dst = known.apply_points(&src);
        let fitted = fit_affine(&src, &dst).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!(
                    (fitted.m[r][c] - known.m[r][c]).abs() < 1e-6,
                    "entry ({r},{c}): {} vs {}",
                    fitted.m[r][c],
                    known.m[r][c]
                );
            }
        }
    }

    #[test]
    fn fit_rejects_collinear_points() {
        let src = square_landmarks(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        assert!(fit_affine(&src, &src).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = AffineTransform::rigid_about(16.0, 16.0, 0.3, 1.05, 2.0, -1.0);
        let round = t.compose(&t.inverse().unwrap());
        assert!(round.is_identity(1e-6));
    }

    #[test]
    fn warp_identity_and_translation() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 13) as f32 / 13.0);
        let out = warp_image(&img, &AffineTransform::identity(), (8, 8)).unwrap();
        assert_eq!(out.data(), img.data());

        let constant = Tensor::full(&[3, 8, 8], 0.42);
        let out = warp_image(&constant, &AffineTransform::translation(1.0, 0.0), (8, 8)).unwrap();
        assert_eq!(out.data(), constant.data());
    }

    #[test]
    fn warp_moves_a_delta_pixel_exactly() {
        let mut img = Tensor::zeros(&[1, 32, 32]);
        img.data_mut()[10 * 32 + 10] = 1.0;
        let out = warp_image(&img, &AffineTransform::translation(5.0, 3.0), (32, 32)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let want = if (y, x) == (13, 15) { 1.0 } else { 0.0 };
                assert_eq!(out.data()[y * 32 + x], want, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn blend_extremes_and_half_plane() {
        let src = Tensor::full(&[3, 8, 8], 0.2);
        let wrp = Tensor::full(&[3, 8, 8], 0.9);
        let zeros = Tensor::zeros(&[8, 8]);
        let ones = Tensor::ones(&[8, 8]);
        assert_eq!(blend_face(&src, &wrp, &zeros, 0).unwrap().data(), src.data());
        assert_eq!(blend_face(&src, &wrp, &ones, 0).unwrap().data(), wrp.data());

        let half = Tensor::from_fn(&[8, 8], |i| if i % 8 >= 4 { 1.0 } else { 0.0 });
        let out = blend_face(&src, &wrp, &half, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if x >= 4 { 0.9 } else { 0.2 };
                assert_eq!(out.data()[y * 8 + x], want);
            }
        }
    }

    #[test]
    fn iou_conventions() {
        let a = Tensor::from_fn(&[20, 1], |i| if i < 10 { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &a), 1.0);
        let b = Tensor::from_fn(&[20, 1], |i| if i >= 10 { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &b), 0.0);
        let c = Tensor::from_fn(&[20, 1], |i| if (5..15).contains(&i) { 1.0 } else { 0.0 });
        assert!((iou(&a, &c) - 5.0 / 15.0).abs() < 1e-6);
        let empty = Tensor::zeros(&[20, 1]);
        assert_eq!(iou(&empty, &empty), 1.0);
    }

    #[test]
    fn undrifted_pair_reproduces_the_oracle_after_image() {
        let r = render_face(&FaceSpec::sample(5, 64), 64).unwrap();
        let style = crate::synthface::make_style_catalog(3, 1, 0.03).unwrap().remove(2);
        let after = crate::synthface::apply_makeup(&r.image, &r.masks, &style).unwrap();
        let assets = FaceAssets {
            before: r.image.clone(),
            masks: r.masks,
            landmarks: r.landmarks,
            structure: r.structure,
        };
        let built = build_pair(&assets, &after, None, &PairOptions::default()).unwrap();
        assert!(built.accepted);
        assert_eq!(built.reference.data(), after.data());
    }

    #[test]
    fn drifted_pair_recovers_with_alignment_and_fails_without() {
        let r = render_face(&FaceSpec::sample(5, 64), 64).unwrap();
        let style = crate::synthface::make_style_catalog(3, 1, 0.03).unwrap().remove(1);
        let after = crate::synthface::apply_makeup(&r.image, &r.masks, &style).unwrap();
        let assets = FaceAssets {
            before: r.image.clone(),
            masks: r.masks,
            landmarks: r.landmarks,
            structure: r.structure,
        };
        let drift = AffineTransform::rigid_about(32.0, 32.0, 0.12, 1.05, 3.0, -2.0);

        let aligned = build_pair(&assets, &after, Some(&drift), &PairOptions::default()).unwrap();
        let naive = build_pair(
            &assets,
            &after,
            Some(&drift),
            &PairOptions {
                align: false,
                ..PairOptions::default()
            },
        )
        .unwrap();
        assert!(aligned.iou_eyes > naive.iou_eyes);
        assert!(aligned.iou_mouth > naive.iou_mouth);
        assert!(aligned.accepted);

        // Non-face pixels of the reference equal the source exactly.
        let n = 64 * 64;
        for i in 0..n {
            if assets.masks.non_face_mask.data()[i] > 0.5 {
                for c in 0..3 {
                    assert_eq!(aligned.reference.data()[c * n + i], assets.before.data()[c * n + i]);
                }
            }
        }
    }
}
