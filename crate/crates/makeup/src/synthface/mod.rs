//! Procedural face generator: flat-shaded ellipse faces with exact region
//! masks, landmarks and a color-free structure render. Every output is a
//! pure function of the spec, so downstream stages can be checked against
//! ground truth instead of heuristics.

mod dataset;
mod face;
mod style;

pub use dataset::{
    face_dir, load_after_image, load_face_assets, load_styles, synthesize_dataset,
    DatasetManifest, DatasetRecord, FaceAssets, FaceEntry,
};
pub use face::{render_face, FaceSpec, LandmarkSet, RegionMaskSet, RenderedFace};
pub use style::{apply_makeup, make_style_catalog, EyeEdit, MakeupStyle, MouthEdit, NoseEdit, SkinEdit};

/// Fixed region order used everywhere: masks, query tokens, embeddings.
pub const REGION_NAMES: [&str; 4] = ["skin", "eyes", "nose", "mouth"];
pub const NUM_REGIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Skin = 0,
    Eyes = 1,
    Nose = 2,
    Mouth = 3,
}

impl Region {
    pub fn all() -> [Region; 4] {
        [Region::Skin, Region::Eyes, Region::Nose, Region::Mouth]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        REGION_NAMES[self as usize]
    }

    pub fn from_name(name: &str) -> Option<Region> {
        match name {
            "skin" => Some(Region::Skin),
            "eyes" => Some(Region::Eyes),
            "nose" => Some(Region::Nose),
            "mouth" => Some(Region::Mouth),
            _ => None,
        }
    }
}
