//! Region-specific transfer: assemble one embedding set from several
//! reference images (one donor per region) and inject it exactly like a
//! single-reference set. Mixing happens in embedding space only; no masks
//! are consumed at inference.

use std::collections::BTreeMap;
use std::path::Path;

use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DdimConfig, DenoisingUNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inject::{
    transfer_with_embeddings, AttentionRecord, RegionEmbeddingSet, Stage2Modules,
};
use crate::styleenc::StyleEncoder;
use crate::synthface::{RegionMaskSet, NUM_REGIONS, REGION_NAMES};

/// Which reference image feeds each region, in fixed region order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RegionAssignment {
    pub skin: String,
    pub eyes: String,
    pub nose: String,
    pub mouth: String,
}

impl RegionAssignment {
    pub fn uniform(reference: &str) -> RegionAssignment {
        RegionAssignment {
            skin: reference.to_string(),
            eyes: reference.to_string(),
            nose: reference.to_string(),
            mouth: reference.to_string(),
        }
    }

    pub fn by_region(&self) -> [&str; NUM_REGIONS] {
        [&self.skin, &self.eyes, &self.nose, &self.mouth]
    }

    /// Distinct reference ids, in first-use order.
    pub fn references(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for r in self.by_region() {
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<RegionAssignment> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Pick row `n` of the assigned reference's embedding set for each region.
pub fn mix_embeddings(
    assignment: &RegionAssignment,
    per_reference: &BTreeMap<String, RegionEmbeddingSet>,
) -> Result<RegionEmbeddingSet> {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(NUM_REGIONS);
    let mut dim = None;
    for (n, reference) in assignment.by_region().iter().enumerate() {
        let set = per_reference.get(*reference).ok_or_else(|| {
            Error::MissingData(format!(
                "no embedding set for reference {reference} (region {})",
                REGION_NAMES[n]
            ))
        })?;
        if set.num_regions() != NUM_REGIONS {
            return Err(Error::ShapeMismatch(format!(
                "embedding set for {reference} has {} regions",
                set.num_regions()
            )));
        }
        let row = set.region_vec(n);
        if let Some(d) = dim {
            if d != row.len() {
                return Err(Error::ShapeMismatch("embedding dims differ".into()));
            }
        }
        dim = Some(row.len());
        rows.push(row);
    }
    let d = dim.unwrap();
    let flat: Vec<f32> = rows.concat();
    Ok(RegionEmbeddingSet {
        vectors: Tensor::from_vec(&[NUM_REGIONS, d], flat),
        provenance: format!(
            "mixed[skin={},eyes={},nose={},mouth={}]",
            assignment.skin, assignment.eyes, assignment.nose, assignment.mouth
        ),
    })
}

/// Region-specific transfer: extract one embedding set per distinct
/// reference, mix per the assignment, and run the standard conditioned
/// sampler.
#[allow(clippy::too_many_arguments)]
pub fn regional_transfer(
    source: &Tensor,
    structure: &Tensor,
    source_masks: &RegionMaskSet,
    assignment: &RegionAssignment,
    references: &BTreeMap<String, Tensor>,
    encoder: &StyleEncoder,
    modules: &Stage2Modules,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    text_tokens: &Tensor,
    ddim: &DdimConfig,
) -> Result<(Tensor, AttentionRecord)> {
    let mut sets = BTreeMap::new();
    for id in assignment.references() {
        let image = references
            .get(id)
            .ok_or_else(|| Error::MissingData(format!("reference image {id}")))?;
        let set = crate::inject::extract_region_embeddings(
            encoder,
            image,
            &modules.bank,
            &modules.projector,
            id,
        )?;
        sets.insert(id.to_string(), set);
    }
    let mixed = mix_embeddings(assignment, &sets)?;
    transfer_with_embeddings(
        source,
        structure,
        source_masks,
        &mixed,
        modules,
        base,
        schedule,
        text_tokens,
        ddim,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(tag: f32) -> RegionEmbeddingSet {
        RegionEmbeddingSet {
            vectors: Tensor::from_fn(&[4, 8], |i| tag + i as f32 / 100.0),
            provenance: format!("ref{tag}"),
        }
    }

    #[test]
    fn uniform_assignment_reproduces_the_single_set() {
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), set_of(1.0));
        let mixed = mix_embeddings(&RegionAssignment::uniform("a"), &refs).unwrap();
        assert_eq!(mixed.vectors.data(), refs["a"].vectors.data());
    }

    #[test]
    fn rows_come_from_the_assigned_references() {
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), set_of(1.0));
        refs.insert("b".to_string(), set_of(2.0));
        refs.insert("c".to_string(), set_of(3.0));
        let assignment = RegionAssignment {
            skin: "a".into(),
            eyes: "b".into(),
            nose: "a".into(),
            mouth: "c".into(),
        };
        let mixed = mix_embeddings(&assignment, &refs).unwrap();
        assert_eq!(mixed.region_vec(0), refs["a"].region_vec(0));
        assert_eq!(mixed.region_vec(1), refs["b"].region_vec(1));
        assert_eq!(mixed.region_vec(2), refs["a"].region_vec(2));
        assert_eq!(mixed.region_vec(3), refs["c"].region_vec(3));
    }

    #[test]
    fn swapping_two_assignments_permutes_exactly_those_rows() {
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), set_of(1.0));
        refs.insert("b".to_string(), set_of(2.0));
        let x = mix_embeddings(
            &RegionAssignment {
                skin: "a".into(),
                eyes: "a".into(),
                nose: "a".into(),
                mouth: "b".into(),
            },
            &refs,
        )
        .unwrap();
        let y = mix_embeddings(
            &RegionAssignment {
                skin: "a".into(),
                eyes: "b".into(),
                nose: "a".into(),
                mouth: "a".into(),
            },
            &refs,
        )
        .unwrap();
        assert_eq!(x.region_vec(0), y.region_vec(0));
        assert_eq!(x.region_vec(2), y.region_vec(2));
        assert_eq!(x.region_vec(1), refs["a"].region_vec(1));
        assert_eq!(y.region_vec(1), refs["b"].region_vec(1));
        assert_eq!(x.region_vec(3), refs["b"].region_vec(3));
        assert_eq!(y.region_vec(3), refs["a"].region_vec(3));
    }

    #[test]
    fn missing_reference_is_an_error() {
        let refs = BTreeMap::new();
        assert!(mix_embeddings(&RegionAssignment::uniform("nope"), &refs).is_err());
    }

    #[test]
    fn assignment_json_roundtrip() {
        let a = RegionAssignment {
            skin: "ref1.png".into(),
            eyes: "ref2.png".into(),
            nose: "ref1.png".into(),
            mouth: "ref3.png".into(),
        };
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.contains("\"skin\":\"ref1.png\""));
        let back: RegionAssignment = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
    }
}
