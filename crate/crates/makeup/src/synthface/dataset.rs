//! Dataset synthesis: renders faces, applies every assigned style, persists
//! the whole thing as 8-bit PNGs plus JSON metadata, and writes a manifest.
//!
//! Layout:
//! ```text
//! <out>/faces/<id>/before.png
//!                  after_<style_id>.png
//!                  mask_{skin,eyes,nose,mouth}.png
//!                  landmarks.json
//!                  structure.png
//!                  meta.json
//! <out>/manifest.json
//! <out>/styles.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use gradtape::nn::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_gray, load_mask, load_rgb, save_gray, save_rgb};

use super::face::{render_face, FaceSpec, LandmarkSet, RegionMaskSet};
use super::style::{apply_makeup, MakeupStyle};
use super::{Region, REGION_NAMES};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaceEntry {
    pub face_id: u32,
    pub face_seed: u64,
    pub dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub face_id: u32,
    pub style_id: u32,
    pub after: String,
    pub description: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub faces: Vec<FaceEntry>,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let raw = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Everything stored for one face, loaded back from disk.
pub struct FaceAssets {
    pub before: gradtape::Tensor,
    pub masks: RegionMaskSet,
    pub landmarks: LandmarkSet,
    pub structure: gradtape::Tensor,
}

pub fn load_face_assets(root: &Path, entry: &FaceEntry) -> Result<FaceAssets> {
    let dir = root.join(&entry.dir);
    let before = load_rgb(&dir.join("before.png"))?;
    let masks = RegionMaskSet::from_masks([
        load_mask(&dir.join("mask_skin.png"))?,
        load_mask(&dir.join("mask_eyes.png"))?,
        load_mask(&dir.join("mask_nose.png"))?,
        load_mask(&dir.join("mask_mouth.png"))?,
    ]);
    let landmarks: LandmarkSet =
        serde_json::from_str(&fs::read_to_string(dir.join("landmarks.json"))?)?;
    let structure = load_gray(&dir.join("structure.png"))?;
    Ok(FaceAssets {
        before,
        masks,
        landmarks,
        structure,
    })
}

pub fn load_after_image(root: &Path, record: &DatasetRecord) -> Result<gradtape::Tensor> {
    load_rgb(&root.join(&record.after))
}

pub fn load_styles(root: &Path) -> Result<Vec<MakeupStyle>> {
    let raw = fs::read_to_string(root.join("styles.json"))?;
    Ok(serde_json::from_str(&raw)?)
}

#[derive(Serialize)]
struct FaceMeta<'a> {
    face_seed: u64,
    spec: &'a FaceSpec,
    assigned_styles: Vec<u32>,
}

/// Render `num_faces` faces and every assigned style's after-image to
/// `out_dir`. `styles_per_face == 0` assigns the full catalog to every face;
/// otherwise each face gets a seeded subset of that size.
pub fn synthesize_dataset(
    num_faces: usize,
    styles: &[MakeupStyle],
    seed: u64,
    size: usize,
    styles_per_face: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if styles.is_empty() {
        return Err(Error::InvalidInput("no styles given".into()));
    }
    fs::create_dir_all(out_dir.join("faces"))?;
    fs::write(
        out_dir.join("styles.json"),
        serde_json::to_string_pretty(styles)?,
    )?;

    let mut manifest = DatasetManifest {
        seed,
        image_size: size,
        complete: false,
        error: None,
        faces: Vec::new(),
        records: Vec::new(),
    };

    let result = (|| -> Result<()> {
        for i in 0..num_faces {
            let face_seed = SplitMix64::derive(seed, i as u64).next_u64();
            let spec = FaceSpec::sample(face_seed, size);
            let rendered = render_face(&spec, size)?;
            let dir_rel = format!("faces/{i:04}");
            let dir = out_dir.join(&dir_rel);
            fs::create_dir_all(&dir)?;

            save_rgb(&rendered.image, &dir.join("before.png"))?;
            for r in Region::all() {
                save_gray(
                    rendered.masks.mask(r),
                    &dir.join(format!("mask_{}.png", REGION_NAMES[r.index()])),
                )?;
            }
            save_gray(&rendered.structure, &dir.join("structure.png"))?;
            fs::write(
                dir.join("landmarks.json"),
                serde_json::to_string(&rendered.landmarks)?,
            )?;

            let assigned: Vec<u32> = if styles_per_face == 0 || styles_per_face >= styles.len() {
                styles.iter().map(|s| s.style_id).collect()
            } else {
                let mut ids: Vec<u32> = styles.iter().map(|s| s.style_id).collect();
                SplitMix64::derive(seed ^ 0xa551_64ed, i as u64).shuffle(&mut ids);
                ids.truncate(styles_per_face);
                ids.sort_unstable();
                ids
            };

            fs::write(
                dir.join("meta.json"),
                serde_json::to_string_pretty(&FaceMeta {
                    face_seed,
                    spec: &spec,
                    assigned_styles: assigned.clone(),
                })?,
            )?;

            manifest.faces.push(FaceEntry {
                face_id: i as u32,
                face_seed,
                dir: dir_rel.clone(),
            });

            for sid in assigned {
                let style = styles
                    .iter()
                    .find(|s| s.style_id == sid)
                    .ok_or_else(|| Error::MissingData(format!("style {sid}")))?;
                let after = apply_makeup(&rendered.image, &rendered.masks, style)?;
                let rel = format!("{dir_rel}/after_{sid}.png");
                save_rgb(&after, &out_dir.join(&rel))?;
                manifest.records.push(DatasetRecord {
                    face_id: i as u32,
                    style_id: sid,
                    after: rel,
                    description: style.description.clone(),
                });
            }
        }
        Ok(())
    })();

    match result {
        Ok(()) => {
            manifest.complete = true;
            manifest.save(out_dir)?;
            Ok(manifest)
        }
        Err(e) => {
            // Persist a manifest noting the partial state, then fail.
            manifest.error = Some(e.to_string());
            let _ = manifest.save(out_dir);
            Err(e)
        }
    }
}

/// Convenience path accessors used by consumers of the layout.
pub fn face_dir(root: &Path, face_id: u32) -> PathBuf {
    root.join(format!("faces/{face_id:04}"))
}

#[cfg(test)]
mod tests {
    use super::super::style::make_style_catalog;
    use super::*;

    #[test]
    fn dataset_counts_and_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let styles = make_style_catalog(5, 1, 0.03).unwrap();
        let m = synthesize_dataset(10, &styles, 42, 32, 0, tmp.path()).unwrap();
        assert_eq!(m.faces.len(), 10);
        assert_eq!(m.records.len(), 50);
        assert!(m.complete);

        let reloaded = DatasetManifest::load(tmp.path()).unwrap();
        assert_eq!(reloaded.records.len(), m.records.len());
        for (a, b) in m.records.iter().zip(&reloaded.records) {
            assert_eq!(a.after, b.after);
            assert_eq!(a.style_id, b.style_id);
        }

        // After-image differs from before only inside the mask union.
        let assets = load_face_assets(tmp.path(), &m.faces[0]).unwrap();
        let after = load_after_image(tmp.path(), &m.records[0]).unwrap();
        let n = 32 * 32;
        for i in 0..n {
            if assets.masks.non_face_mask.data()[i] > 0.5 {
                for c in 0..3 {
                    assert_eq!(
                        after.data()[c * n + i],
                        assets.before.data()[c * n + i],
                        "after-image touched a non-face pixel"
                    );
                }
            }
        }
    }

    #[test]
    fn styles_per_face_subsets_are_respected() {
        let tmp = tempfile::tempdir().unwrap();
        let styles = make_style_catalog(6, 2, 0.03).unwrap();
        let m = synthesize_dataset(4, &styles, 7, 32, 2, tmp.path()).unwrap();
        assert_eq!(m.records.len(), 8);
    }
}
