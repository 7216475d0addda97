//! Face specs, rasterization, masks, landmarks, structure render.

use gradtape::nn::SplitMix64;
use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::mask_dims;

use super::{Region, NUM_REGIONS};

/// Outer radius of the eye region (shadow zone) relative to the eyeball.
pub const EYE_ZONE: f32 = 1.6;

/// Face-ellipse boundary samples in the landmark set.
pub const BOUNDARY_LANDMARKS: usize = 16;
/// Total landmark count: boundary + 2 eye centers + nose tip + 2 mouth corners.
pub const LANDMARK_COUNT: usize = BOUNDARY_LANDMARKS + 5;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn shifted(&self, dx: f32, dy: f32) -> Ellipse {
        Ellipse {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Conservative check that `self` lies inside `outer`.
    fn inside(&self, outer: &Ellipse) -> bool {
        let dx = ((self.cx - outer.cx).abs() + self.rx) / outer.rx;
        let dy = ((self.cy - outer.cy).abs() + self.ry) / outer.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn bbox(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }
}

fn bbox_gap(a: &Ellipse, b: &Ellipse) -> f32 {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    let gx = (bx0 - ax1).max(ax0 - bx1);
    let gy = (by0 - ay1).max(ay0 - by1);
    gx.max(gy)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EyeParams {
    pub left_center: (f32, f32),
    pub right_center: (f32, f32),
    pub radius: f32,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoseParams {
    pub center: (f32, f32),
    pub half_width: f32,
    pub half_height: f32,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MouthParams {
    pub center: (f32, f32),
    pub rx: f32,
    pub ry: f32,
}

/// Full parameterization of a synthetic face. Rendering is a pure function
/// of this struct.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity_seed: u64,
    pub face_center: (f32, f32),
    pub face_axes: (f32, f32),
    pub eye_params: EyeParams,
    pub nose_params: NoseParams,
    pub mouth_params: MouthParams,
    pub skin_color: [f32; 3],
    pub lip_color: [f32; 3],
    pub iris_color: [f32; 3],
    pub pose_shift: (f32, f32),
}

struct Layout {
    face: Ellipse,
    eye_l: Ellipse,
    eye_r: Ellipse,
    eyeball: f32,
    nose: Ellipse,
    mouth: Ellipse,
}

impl FaceSpec {
    /// Sample a diverse, always-valid face for a given identity seed.
    pub fn sample(identity_seed: u64, size: usize) -> FaceSpec {
        let mut rng = SplitMix64::new(identity_seed);
        let s = size as f32;
        let cx = s * 0.5 + s * rng.range(-0.015, 0.015);
        let cy = s * 0.5 + s * rng.range(-0.015, 0.015);
        let rx = s * rng.range(0.26, 0.34);
        let ry = s * rng.range(0.32, 0.40);

        let eye_off_x = rx * rng.range(0.38, 0.46);
        let eye_off_y = ry * rng.range(0.38, 0.46);
        let eye_radius = rx.min(ry) * rng.range(0.10, 0.14);

        let nose_cy = cy + ry * rng.range(0.10, 0.16);
        let nose_hw = rx * rng.range(0.10, 0.14);
        let nose_hh = ry * rng.range(0.09, 0.13);

        let mouth_cy = cy + ry * rng.range(0.53, 0.58);
        let mouth_rx = rx * rng.range(0.32, 0.42);
        let mouth_ry = ry * rng.range(0.09, 0.13);

        let skin_r = rng.range(0.30, 0.97);
        let skin_g = skin_r * rng.range(0.65, 0.95);
        let skin = [skin_r, skin_g, skin_g * rng.range(0.45, 0.95)];
        let lip = [rng.range(0.40, 0.90), rng.range(0.10, 0.45), rng.range(0.15, 0.50)];
        let iris = [rng.range(0.05, 0.7), rng.range(0.1, 0.7), rng.range(0.05, 0.9)];

        let shift = (s * rng.range(-0.04, 0.04), s * rng.range(-0.04, 0.04));

        FaceSpec {
            identity_seed,
            face_center: (cx, cy),
            face_axes: (rx, ry),
            eye_params: EyeParams {
                left_center: (cx - eye_off_x, cy - eye_off_y),
                right_center: (cx + eye_off_x, cy - eye_off_y),
                radius: eye_radius,
            },
            nose_params: NoseParams {
                center: (cx, nose_cy),
                half_width: nose_hw,
                half_height: nose_hh,
            },
            mouth_params: MouthParams {
                center: (cx, mouth_cy),
                rx: mouth_rx,
                ry: mouth_ry,
            },
            skin_color: skin,
            lip_color: lip,
            iris_color: iris,
            pose_shift: shift,
        }
    }

    fn layout(&self) -> Layout {
        let (dx, dy) = self.pose_shift;
        let face = Ellipse {
            cx: self.face_center.0,
            cy: self.face_center.1,
            rx: self.face_axes.0,
            ry: self.face_axes.1,
        }
        .shifted(dx, dy);
        let zone = self.eye_params.radius * EYE_ZONE;
        let eye_l = Ellipse {
            cx: self.eye_params.left_center.0,
            cy: self.eye_params.left_center.1,
            rx: zone,
            ry: zone,
        }
        .shifted(dx, dy);
        let eye_r = Ellipse {
            cx: self.eye_params.right_center.0,
            cy: self.eye_params.right_center.1,
            rx: zone,
            ry: zone,
        }
        .shifted(dx, dy);
        let nose = Ellipse {
            cx: self.nose_params.center.0,
            cy: self.nose_params.center.1,
            rx: self.nose_params.half_width,
            ry: self.nose_params.half_height,
        }
        .shifted(dx, dy);
        let mouth = Ellipse {
            cx: self.mouth_params.center.0,
            cy: self.mouth_params.center.1,
            rx: self.mouth_params.rx,
            ry: self.mouth_params.ry,
        }
        .shifted(dx, dy);
        Layout {
            face,
            eye_l,
            eye_r,
            eyeball: self.eye_params.radius,
            nose,
            mouth,
        }
    }

    /// Check the spec invariants: shapes in bounds, features inside the skin
    /// ellipse, features pairwise separated.
    pub fn validate(&self, size: usize) -> Result<()> {
        let l = self.layout();
        let s = size as f32;
        let (x0, y0, x1, y1) = l.face.bbox();
        if x0 < 1.0 || y0 < 1.0 || x1 > s - 1.0 || y1 > s - 1.0 {
            return Err(Error::InvalidInput(format!(
                "face ellipse out of bounds for size {size}: bbox ({x0:.1},{y0:.1})-({x1:.1},{y1:.1})"
            )));
        }
        for (name, e) in [
            ("eyes.left", &l.eye_l),
            ("eyes.right", &l.eye_r),
            ("nose", &l.nose),
            ("mouth", &l.mouth),
        ] {
            if !e.inside(&l.face) {
                return Err(Error::InvalidInput(format!(
                    "{name} region not contained in the skin ellipse"
                )));
            }
        }
        let feats: [(&str, &Ellipse); 4] = [
            ("eyes.left", &l.eye_l),
            ("eyes.right", &l.eye_r),
            ("nose", &l.nose),
            ("mouth", &l.mouth),
        ];
        for i in 0..feats.len() {
            for j in (i + 1)..feats.len() {
                if bbox_gap(feats[i].1, feats[j].1) < 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "regions {} and {} overlap or touch",
                        feats[i].0, feats[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Background shade, derived from the identity seed.
    fn background(&self) -> [f32; 3] {
        let mut rng = SplitMix64::new(self.identity_seed ^ 0xbac4_6a0d);
        let v = rng.range(0.05, 0.55);
        [v, v * rng.range(0.9, 1.15), (v * rng.range(0.9, 1.3)).min(1.0)]
    }
}

/// Binary masks per region plus the complement of their union.
#[derive(Clone, Debug)]
pub struct RegionMaskSet {
    pub masks: [Tensor; NUM_REGIONS],
    pub non_face_mask: Tensor,
}

impl RegionMaskSet {
    pub fn mask(&self, r: Region) -> &Tensor {
        &self.masks[r.index()]
    }

    /// Union of the four region masks (the full face support).
    pub fn face_union(&self) -> Tensor {
        let (h, w) = mask_dims(&self.masks[0]);
        Tensor::from_fn(&[h, w], |i| {
            if self.masks.iter().any(|m| m.data()[i] > 0.5) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn from_masks(masks: [Tensor; NUM_REGIONS]) -> RegionMaskSet {
        let (h, w) = mask_dims(&masks[0]);
        let non_face = Tensor::from_fn(&[h, w], |i| {
            if masks.iter().any(|m| m.data()[i] > 0.5) {
                0.0
            } else {
                1.0
            }
        });
        RegionMaskSet {
            masks,
            non_face_mask: non_face,
        }
    }
}

/// Ordered landmark list; the ordering is identical for every face.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f32, f32)>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub struct RenderedFace {
    pub image: Tensor,
    pub masks: RegionMaskSet,
    pub landmarks: LandmarkSet,
    pub structure: Tensor,
}

// Pixel classes used for both color assignment and structure contours.
#[derive(Clone, Copy, PartialEq, Eq)]
enum PixClass {
    Background,
    Skin,
    EyeZone,
    Sclera,
    Iris,
    Pupil,
    Nose,
    Mouth,
}

/// Rasterize a face spec: image, region masks, landmarks, structure contour
/// map. Deterministic; rejects invalid specs.
pub fn render_face(spec: &FaceSpec, size: usize) -> Result<RenderedFace> {
    if size < 32 {
        return Err(Error::InvalidInput(format!("size {size} < 32")));
    }
    spec.validate(size)?;
    let l = spec.layout();
    let (dx, dy) = spec.pose_shift;
    let bg = spec.background();
    let sclera = [0.95, 0.95, 0.93];
    let pupil = [0.05, 0.05, 0.06];
    let nose_shade = [
        spec.skin_color[0] * 0.9,
        spec.skin_color[1] * 0.9,
        spec.skin_color[2] * 0.9,
    ];

    let classify = |x: f32, y: f32| -> PixClass {
        for eye in [&l.eye_l, &l.eye_r] {
            if eye.contains(x, y) {
                let d2 = (x - eye.cx).powi(2) + (y - eye.cy).powi(2);
                let d = d2.sqrt();
                if d <= 0.25 * l.eyeball {
                    return PixClass::Pupil;
                } else if d <= 0.55 * l.eyeball {
                    return PixClass::Iris;
                } else if d <= l.eyeball {
                    return PixClass::Sclera;
                }
                return PixClass::EyeZone;
            }
        }
        if l.nose.contains(x, y) {
            return PixClass::Nose;
        }
        if l.mouth.contains(x, y) {
            return PixClass::Mouth;
        }
        if l.face.contains(x, y) {
            return PixClass::Skin;
        }
        PixClass::Background
    };

    let mut classes = vec![PixClass::Background; size * size];
    for y in 0..size {
        for x in 0..size {
            classes[y * size + x] = classify(x as f32 + 0.5, y as f32 + 0.5);
        }
    }

    let mut image = vec![0.0f32; 3 * size * size];
    let mut masks: [Vec<f32>; NUM_REGIONS] = [
        vec![0.0; size * size],
        vec![0.0; size * size],
        vec![0.0; size * size],
        vec![0.0; size * size],
    ];
    for i in 0..size * size {
        let (color, region) = match classes[i] {
            PixClass::Background => (bg, None),
            PixClass::Skin => (spec.skin_color, Some(Region::Skin)),
            PixClass::EyeZone => (spec.skin_color, Some(Region::Eyes)),
            PixClass::Sclera => (sclera, Some(Region::Eyes)),
            PixClass::Iris => (spec.iris_color, Some(Region::Eyes)),
            PixClass::Pupil => (pupil, Some(Region::Eyes)),
            PixClass::Nose => (nose_shade, Some(Region::Nose)),
            PixClass::Mouth => (spec.lip_color, Some(Region::Mouth)),
        };
        for c in 0..3 {
            image[c * size * size + i] = color[c];
        }
        if let Some(r) = region {
            masks[r.index()][i] = 1.0;
        }
    }

    // Structure: 1 where the pixel class differs from the right or bottom
    // neighbour. Carries geometry only.
    let mut structure = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = classes[y * size + x];
            let right = if x + 1 < size {
                classes[y * size + x + 1]
            } else {
                c
            };
            let down = if y + 1 < size {
                classes[(y + 1) * size + x]
            } else {
                c
            };
            if c != right || c != down {
                structure[y * size + x] = 1.0;
            }
        }
    }

    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..BOUNDARY_LANDMARKS {
        let theta = std::f32::consts::TAU * k as f32 / BOUNDARY_LANDMARKS as f32;
        points.push((
            l.face.cx + l.face.rx * theta.cos(),
            l.face.cy + l.face.ry * theta.sin(),
        ));
    }
    points.push((
        spec.eye_params.left_center.0 + dx,
        spec.eye_params.left_center.1 + dy,
    ));
    points.push((
        spec.eye_params.right_center.0 + dx,
        spec.eye_params.right_center.1 + dy,
    ));
    points.push((l.nose.cx, l.nose.cy + l.nose.ry)); // nose tip
    points.push((l.mouth.cx - l.mouth.rx, l.mouth.cy));
    points.push((l.mouth.cx + l.mouth.rx, l.mouth.cy));

    let shape = [size, size];
    Ok(RenderedFace {
        image: Tensor::from_vec(&[3, size, size], image),
        masks: RegionMaskSet::from_masks([
            Tensor::from_vec(&shape, masks[0].clone()),
            Tensor::from_vec(&shape, masks[1].clone()),
            Tensor::from_vec(&shape, masks[2].clone()),
            Tensor::from_vec(&shape, masks[3].clone()),
        ]),
        landmarks: LandmarkSet { points },
        structure: Tensor::from_vec(&shape, structure),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let spec = FaceSpec::sample(7, 64);
        let a = render_face(&spec, 64).unwrap();
        let b = render_face(&spec, 64).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.structure.data(), b.structure.data());
        for r in Region::all() {
            assert_eq!(a.masks.mask(r).data(), b.masks.mask(r).data());
        }
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn pose_shift_translates_landmarks_exactly() {
        let mut spec = FaceSpec::sample(3, 64);
        spec.pose_shift = (0.0, 0.0);
        let base = render_face(&spec, 64).unwrap();
        spec.pose_shift = (5.0, 3.0);
        let moved = render_face(&spec, 64).unwrap();
        for (p, q) in base.landmarks.points.iter().zip(&moved.landmarks.points) {
            assert_eq!(q.0 - p.0, 5.0);
            assert_eq!(q.1 - p.1, 3.0);
        }
    }

    #[test]
    fn masks_disjoint_and_inside_face_support() {
        let spec = FaceSpec::sample(7, 64);
        let r = render_face(&spec, 64).unwrap();
        let n = 64 * 64;
        for i in 0..n {
            let total: f32 = r.masks.masks.iter().map(|m| m.data()[i]).sum();
            assert!(total <= 1.0, "masks overlap at pixel {i}");
            // union + non_face partitions the image
            assert_eq!(total + r.masks.non_face_mask.data()[i], 1.0);
        }
        // every region pixel is inside the face ellipse support (skin support
        // = face ellipse): reconstruct by checking the union is connected to
        // the layout ellipse.
        let l_face = Ellipse {
            cx: spec.face_center.0 + spec.pose_shift.0,
            cy: spec.face_center.1 + spec.pose_shift.1,
            rx: spec.face_axes.0,
            ry: spec.face_axes.1,
        };
        for i in 0..n {
            let (y, x) = (i / 64, i % 64);
            let inside_any = r.masks.masks.iter().any(|m| m.data()[i] > 0.5);
            if inside_any {
                assert!(
                    l_face.contains(x as f32 + 0.5, y as f32 + 0.5),
                    "region pixel outside face ellipse at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn structure_has_no_color_information() {
        // Two specs identical except colors must produce identical structure.
        let mut a = FaceSpec::sample(11, 64);
        let mut b = a.clone();
        b.skin_color = [0.2, 0.9, 0.3];
        b.lip_color = [0.1, 0.1, 0.9];
        b.iris_color = [0.9, 0.9, 0.1];
        a.identity_seed = 1;
        b.identity_seed = 1;
        let ra = render_face(&a, 64).unwrap();
        let rb = render_face(&b, 64).unwrap();
        assert_eq!(ra.structure.data(), rb.structure.data());
    }

    #[test]
    fn sampled_specs_are_valid_across_seeds_and_sizes() {
        for seed in 0..200 {
            for size in [32, 64, 128] {
                let spec = FaceSpec::sample(seed, size);
                spec.validate(size).unwrap();
            }
        }
    }

    #[test]
    fn out_of_bounds_spec_is_rejected() {
        let mut spec = FaceSpec::sample(3, 64);
        spec.pose_shift = (40.0, 0.0);
        assert!(render_face(&spec, 64).is_err());
    }

    #[test]
    fn tiny_size_is_rejected() {
        let spec = FaceSpec::sample(3, 64);
        assert!(render_face(&spec, 16).is_err());
    }
}
