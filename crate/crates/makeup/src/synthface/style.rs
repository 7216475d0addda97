//! Parameterized makeup styles, the procedural makeup applicator, and the
//! seeded style catalog with templated text descriptions.

use gradtape::nn::SplitMix64;
use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{image_dims, mask_dims};

use super::face::{RegionMaskSet, EYE_ZONE};
use super::Region;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkinEdit {
    pub tint: [f32; 3],
    pub alpha: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EyeEdit {
    pub shadow: [f32; 3],
    /// Painted shadow radius as a multiple of the eyeball radius, in
    /// `[1.0, EYE_ZONE]`; at `EYE_ZONE` the whole eye region is covered.
    pub radius_mult: f32,
    pub alpha: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoseEdit {
    /// Alpha of a blend toward black (contour darkening).
    pub darken: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MouthEdit {
    pub color: [f32; 3],
    pub alpha: f32,
    pub gloss: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MakeupStyle {
    pub style_id: u32,
    pub name: String,
    pub description: String,
    pub skin_edit: SkinEdit,
    pub eye_edit: EyeEdit,
    pub nose_edit: NoseEdit,
    pub mouth_edit: MouthEdit,
}

impl MakeupStyle {
    /// The all-zero style: applying it is the identity.
    pub fn identity(style_id: u32) -> MakeupStyle {
        MakeupStyle {
            style_id,
            name: "Bare".into(),
            description: "Bare. No visible makeup at all.".into(),
            skin_edit: SkinEdit {
                tint: [0.0; 3],
                alpha: 0.0,
            },
            eye_edit: EyeEdit {
                shadow: [0.0; 3],
                radius_mult: EYE_ZONE,
                alpha: 0.0,
            },
            nose_edit: NoseEdit { darken: 0.0 },
            mouth_edit: MouthEdit {
                color: [0.0; 3],
                alpha: 0.0,
                gloss: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("skin", self.skin_edit.alpha),
            ("eyes", self.eye_edit.alpha),
            ("nose", self.nose_edit.darken),
            ("mouth", self.mouth_edit.alpha),
        ] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidInput(format!(
                    "style {}: {name} alpha {a} outside [0,1]",
                    self.style_id
                )));
            }
        }
        if !(1.0..=EYE_ZONE).contains(&self.eye_edit.radius_mult) {
            return Err(Error::InvalidInput(format!(
                "style {}: eye radius multiplier {} outside [1,{EYE_ZONE}]",
                self.style_id, self.eye_edit.radius_mult
            )));
        }
        Ok(())
    }
}

/// Per-eye circle recovered from the eye mask: the mask holds two disjoint
/// discs, split at the overall centroid column.
struct EyeCircles {
    centers: [(f32, f32); 2],
    outer_radius: f32,
}

fn recover_eye_circles(mask: &Tensor) -> Option<EyeCircles> {
    let (h, w) = mask_dims(mask);
    let mut sum_x = 0.0f64;
    let mut count = 0usize;
    for i in 0..h * w {
        if mask.data()[i] > 0.5 {
            sum_x += (i % w) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let split = (sum_x / count as f64) as f32;
    let mut centers = [(0.0f32, 0.0f32); 2];
    let mut radius = 0.0f32;
    for side in 0..2 {
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        let mut n = 0usize;
        for i in 0..h * w {
            if mask.data()[i] > 0.5 {
                let x = (i % w) as f32 + 0.5;
                if (side == 0) == (x < split) {
                    sx += x as f64;
                    sy += ((i / w) as f32 + 0.5) as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return None;
        }
        let c = ((sx / n as f64) as f32, (sy / n as f64) as f32);
        centers[side] = c;
        for i in 0..h * w {
            if mask.data()[i] > 0.5 {
                let x = (i % w) as f32 + 0.5;
                if (side == 0) == (x < split) {
                    let y = (i / w) as f32 + 0.5;
                    let d = ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt();
                    radius = radius.max(d);
                }
            }
        }
    }
    Some(EyeCircles {
        centers,
        outer_radius: radius,
    })
}

/// Apply a makeup style inside the region masks. Pixels where every mask is
/// zero are returned bit-identical; inside each region the edit is the alpha
/// blend given by that region's parameters.
pub fn apply_makeup(image: &Tensor, masks: &RegionMaskSet, style: &MakeupStyle) -> Result<Tensor> {
    style.validate()?;
    let (h, w) = image_dims(image);
    let (mh, mw) = mask_dims(&masks.masks[0]);
    if (h, w) != (mh, mw) {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} vs masks {mh}x{mw}"
        )));
    }
    let n = h * w;
    let mut out = image.data().to_vec();

    let blend_at = |out: &mut [f32], i: usize, color: &[f32; 3], alpha: f32| {
        for c in 0..3 {
            let v = &mut out[c * n + i];
            *v = (1.0 - alpha) * *v + alpha * color[c];
        }
    };

    // Skin: uniform blend over the whole region.
    if style.skin_edit.alpha > 0.0 {
        let m = masks.mask(Region::Skin);
        for i in 0..n {
            if m.data()[i] > 0.5 {
                blend_at(&mut out, i, &style.skin_edit.tint, style.skin_edit.alpha);
            }
        }
    }

    // Eyes: shadow disc of radius `radius_mult * eyeball` around each eye
    // center, clipped to the eye region mask. The mask zone spans EYE_ZONE
    // eyeball radii, so radius_mult == EYE_ZONE covers the region uniformly.
    if style.eye_edit.alpha > 0.0 {
        let m = masks.mask(Region::Eyes);
        if let Some(circ) = recover_eye_circles(m) {
            let paint_r = circ.outer_radius * (style.eye_edit.radius_mult / EYE_ZONE);
            let paint_r2 = paint_r * paint_r;
            for i in 0..n {
                if m.data()[i] > 0.5 {
                    let x = (i % w) as f32 + 0.5;
                    let y = (i / w) as f32 + 0.5;
                    let hit = circ.centers.iter().any(|c| {
                        (x - c.0).powi(2) + (y - c.1).powi(2) <= paint_r2
                    });
                    if hit {
                        blend_at(&mut out, i, &style.eye_edit.shadow, style.eye_edit.alpha);
                    }
                }
            }
        }
    }

    // Nose: blend toward black (contour darkening).
    if style.nose_edit.darken > 0.0 {
        let m = masks.mask(Region::Nose);
        for i in 0..n {
            if m.data()[i] > 0.5 {
                blend_at(&mut out, i, &[0.0, 0.0, 0.0], style.nose_edit.darken);
            }
        }
    }

    // Mouth: lip color blend; optional gloss highlight stripe inside the mask.
    if style.mouth_edit.alpha > 0.0 {
        let m = masks.mask(Region::Mouth);
        for i in 0..n {
            if m.data()[i] > 0.5 {
                blend_at(&mut out, i, &style.mouth_edit.color, style.mouth_edit.alpha);
            }
        }
        if style.mouth_edit.gloss {
            // Stripe centered on the mask's vertical centroid.
            let mut sy = 0.0f64;
            let mut ny = 0usize;
            let mut min_y = h;
            let mut max_y = 0usize;
            for i in 0..n {
                if m.data()[i] > 0.5 {
                    let y = i / w;
                    sy += y as f64;
                    ny += 1;
                    min_y = min_y.min(y);
                    max_y = max_y.max(y);
                }
            }
            if ny > 0 {
                let cy = (sy / ny as f64) as f32;
                let stripe = ((max_y - min_y + 1) as f32 * 0.18).max(0.5);
                let ga = style.mouth_edit.alpha * 0.35;
                for i in 0..n {
                    if m.data()[i] > 0.5 && ((i / w) as f32 + 0.5 - cy).abs() <= stripe {
                        blend_at(&mut out, i, &[0.97, 0.96, 0.94], ga);
                    }
                }
            }
        }
    }

    Ok(Tensor::from_vec(&[3, h, w], out))
}

// -- catalog -------------------------------------------------------------------

const NAME_ADJS: [&str; 16] = [
    "Dewy", "Velvet", "Matte", "Smoky", "Glossy", "Radiant", "Muted", "Electric", "Pastel",
    "Gilded", "Frosted", "Crimson", "Amber", "Moonlit", "Sunset", "Porcelain",
];
const NAME_NOUNS: [&str; 16] = [
    "minimalist", "glam", "noir", "bloom", "haze", "ember", "mirage", "whisper", "statement",
    "reverie", "aura", "muse", "tide", "dusk", "dawn", "veil",
];

const COLOR_WORDS: [(&str, [f32; 3]); 14] = [
    ("crimson", [0.86, 0.08, 0.24]),
    ("rose", [0.94, 0.50, 0.60]),
    ("plum", [0.56, 0.27, 0.52]),
    ("copper", [0.72, 0.45, 0.20]),
    ("bronze", [0.55, 0.40, 0.22]),
    ("terracotta", [0.80, 0.40, 0.30]),
    ("mauve", [0.70, 0.55, 0.70]),
    ("coral", [1.00, 0.50, 0.31]),
    ("teal", [0.00, 0.50, 0.50]),
    ("slate", [0.44, 0.50, 0.56]),
    ("ivory", [1.00, 0.95, 0.88]),
    ("honey", [0.92, 0.72, 0.33]),
    ("cocoa", [0.42, 0.26, 0.15]),
    ("berry", [0.60, 0.13, 0.33]),
];

fn nearest_color_word(c: &[f32; 3]) -> &'static str {
    COLOR_WORDS
        .iter()
        .min_by(|a, b| {
            let da: f32 = (0..3).map(|i| (a.1[i] - c[i]).powi(2)).sum();
            let db: f32 = (0..3).map(|i| (b.1[i] - c[i]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
        .0
}

fn intensity_word(a: f32) -> &'static str {
    if a < 0.3 {
        "sheer"
    } else if a < 0.55 {
        "soft"
    } else if a < 0.8 {
        "bold"
    } else {
        "saturated"
    }
}

fn describe(name: &str, s: &MakeupStyle) -> String {
    let lip = nearest_color_word(&s.mouth_edit.color);
    let eye = nearest_color_word(&s.eye_edit.shadow);
    let skin = nearest_color_word(&s.skin_edit.tint);
    let gloss = if s.mouth_edit.gloss {
        "glossy"
    } else {
        "matte"
    };
    format!(
        "{name}. A {lip_int} {gloss} {lip} lip at {lip_pct}% depth, {eye_int} {eye} eye shadow \
         reaching {reach}% of the lid at {eye_pct}% strength, a {skin_int} {skin} skin tint at \
         {skin_pct}%, and nose contouring at {nose_pct}%.",
        lip_int = intensity_word(s.mouth_edit.alpha),
        lip_pct = (s.mouth_edit.alpha * 100.0).round() as u32,
        eye_int = intensity_word(s.eye_edit.alpha),
        reach = (s.eye_edit.radius_mult / EYE_ZONE * 100.0).round() as u32,
        eye_pct = (s.eye_edit.alpha * 100.0).round() as u32,
        skin_int = intensity_word(s.skin_edit.alpha),
        skin_pct = (s.skin_edit.alpha * 100.0).round() as u32,
        nose_pct = (s.nose_edit.darken * 100.0).round() as u32,
    )
}

/// Expected post-makeup mean colors on a fixed neutral base, used to enforce
/// a minimum separation margin between catalog entries.
fn signature(s: &MakeupStyle) -> [f32; 10] {
    let base_skin = [0.75, 0.60, 0.48];
    let base_eye = [0.80, 0.78, 0.74];
    let base_lip = [0.62, 0.30, 0.32];
    let mut sig = [0.0f32; 10];
    for c in 0..3 {
        sig[c] = (1.0 - s.skin_edit.alpha) * base_skin[c] + s.skin_edit.alpha * s.skin_edit.tint[c];
    }
    let frac = (s.eye_edit.radius_mult / EYE_ZONE).powi(2);
    let ea = s.eye_edit.alpha * frac;
    for c in 0..3 {
        sig[3 + c] = (1.0 - ea) * base_eye[c] + ea * s.eye_edit.shadow[c];
    }
    for c in 0..3 {
        sig[6 + c] =
            (1.0 - s.mouth_edit.alpha) * base_lip[c] + s.mouth_edit.alpha * s.mouth_edit.color[c];
    }
    sig[9] = s.nose_edit.darken;
    sig
}

fn sig_distance(a: &[f32; 10], b: &[f32; 10]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Generate `count` mutually-distinct styles with unique names and
/// descriptions. `margin` is the minimum L-inf separation between the
/// expected post-makeup color signatures of any two styles.
pub fn make_style_catalog(count: usize, seed: u64, margin: f32) -> Result<Vec<MakeupStyle>> {
    if count < 2 {
        return Err(Error::InvalidInput(format!(
            "catalog needs at least 2 styles for contrastive learning, got {count}"
        )));
    }
    let mut rng = SplitMix64::new(seed ^ 0x571e_c47a);
    let mut name_order: Vec<usize> = (0..NAME_ADJS.len() * NAME_NOUNS.len()).collect();
    rng.shuffle(&mut name_order);

    let mut styles: Vec<MakeupStyle> = Vec::with_capacity(count);
    let mut sigs: Vec<[f32; 10]> = Vec::with_capacity(count);
    let mut tries = 0usize;
    while styles.len() < count {
        tries += 1;
        if tries > 20_000 {
            return Err(Error::InvalidInput(format!(
                "could not sample {count} styles with margin {margin}; lower the margin"
            )));
        }
        let mut s = MakeupStyle {
            style_id: styles.len() as u32,
            name: String::new(),
            description: String::new(),
            skin_edit: SkinEdit {
                tint: [rng.range(0.3, 1.0), rng.range(0.1, 0.8), rng.range(0.1, 0.8)],
                alpha: rng.range(0.12, 0.40),
            },
            eye_edit: EyeEdit {
                shadow: [rng.range(0.0, 1.0), rng.range(0.0, 0.8), rng.range(0.0, 1.0)],
                radius_mult: rng.range(1.1, EYE_ZONE),
                alpha: rng.range(0.25, 0.70),
            },
            nose_edit: NoseEdit {
                darken: rng.range(0.05, 0.35),
            },
            mouth_edit: MouthEdit {
                color: [rng.range(0.45, 1.0), rng.range(0.0, 0.4), rng.range(0.0, 0.6)],
                alpha: rng.range(0.45, 0.95),
                gloss: rng.coin(0.5),
            },
        };
        let sig = signature(&s);
        if sigs.iter().any(|p| sig_distance(p, &sig) < margin) {
            continue;
        }
        let ni = name_order[styles.len() % name_order.len()];
        s.name = format!(
            "{} {}",
            NAME_ADJS[ni / NAME_NOUNS.len()],
            NAME_NOUNS[ni % NAME_NOUNS.len()]
        );
        s.description = describe(&s.name, &s);
        if styles.iter().any(|o| o.description == s.description) {
            continue;
        }
        sigs.push(sig);
        styles.push(s);
    }
    Ok(styles)
}

#[cfg(test)]
mod tests {
    use super::super::face::{render_face, FaceSpec};
    use super::*;

    fn rendered() -> super::super::face::RenderedFace {
        render_face(&FaceSpec::sample(7, 64), 64).unwrap()
    }

    #[test]
    fn identity_style_is_a_noop() {
        let r = rendered();
        let out = apply_makeup(&r.image, &r.masks, &MakeupStyle::identity(0)).unwrap();
        assert_eq!(out.data(), r.image.data());
    }

    #[test]
    fn full_alpha_mouth_saturates_to_edit_color() {
        let r = rendered();
        let mut style = MakeupStyle::identity(0);
        style.mouth_edit = MouthEdit {
            color: [1.0, 0.0, 0.0],
            alpha: 1.0,
            gloss: false,
        };
        let out = apply_makeup(&r.image, &r.masks, &style).unwrap();
        let mean = crate::imageio::mean_color(&out, r.masks.mask(Region::Mouth)).unwrap();
        assert_eq!(mean, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn skin_blend_means_follow_the_formula() {
        // Mean over the skin mask must equal (1-a)*base + a*tint exactly
        // (flat-shaded skin).
        let mut spec = FaceSpec::sample(7, 64);
        spec.skin_color = [0.8, 0.6, 0.5];
        let r = render_face(&spec, 64).unwrap();
        let mut style = MakeupStyle::identity(0);
        style.skin_edit = SkinEdit {
            tint: [1.0, 0.0, 0.0],
            alpha: 0.5,
        };
        let out = apply_makeup(&r.image, &r.masks, &style).unwrap();
        let mean = crate::imageio::mean_color(&out, r.masks.mask(Region::Skin)).unwrap();
        for (got, want) in mean.iter().zip([0.9, 0.3, 0.25]) {
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn makeup_never_touches_pixels_outside_the_region_union() {
        let r = rendered();
        let style = make_style_catalog(5, 3, 0.03).unwrap().remove(4);
        let out = apply_makeup(&r.image, &r.masks, &style).unwrap();
        let n = 64 * 64;
        for i in 0..n {
            if r.masks.non_face_mask.data()[i] > 0.5 {
                for c in 0..3 {
                    assert_eq!(out.data()[c * n + i], r.image.data()[c * n + i]);
                }
            }
        }
    }

    #[test]
    fn catalog_is_deterministic_unique_and_separated() {
        let a = make_style_catalog(50, 0, 0.04).unwrap();
        let b = make_style_catalog(50, 0, 0.04).unwrap();
        assert_eq!(a.len(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.description, y.description);
            assert_eq!(x.skin_edit, y.skin_edit);
        }
        let mut descs: Vec<&str> = a.iter().map(|s| s.description.as_str()).collect();
        descs.sort_unstable();
        descs.dedup();
        assert_eq!(descs.len(), 50, "descriptions not unique");
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                assert!(
                    sig_distance(&signature(&a[i]), &signature(&a[j])) >= 0.04,
                    "styles {i} and {j} closer than the margin"
                );
            }
        }
    }

    #[test]
    fn minimum_catalog_differs_in_at_least_one_parameter() {
        let s = make_style_catalog(2, 9, 0.04).unwrap();
        assert!(s[0].skin_edit != s[1].skin_edit || s[0].eye_edit != s[1].eye_edit
            || s[0].nose_edit != s[1].nose_edit || s[0].mouth_edit != s[1].mouth_edit);
    }

    #[test]
    fn catalog_rejects_count_below_two() {
        assert!(make_style_catalog(1, 0, 0.04).is_err());
    }
}
