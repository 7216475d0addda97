//! Contrastive objectives for style-encoder fine-tuning: paired-view
//! InfoNCE over image embeddings, and a multi-positive image-text loss with
//! one text slot per sample-view. Both are cosine-based and scale invariant.

use gradtape::{Tensor, Var};

use crate::error::{Error, Result};

fn check_norms(t: &Tensor, what: &str) -> Result<()> {
    let (r, c) = (t.rows(), t.cols());
    for row in 0..r {
        let n: f32 = (0..c).map(|i| t.at2(row, i).powi(2)).sum();
        if n <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "{what}: row {row} has zero norm, cosine similarity undefined"
            )));
        }
    }
    Ok(())
}

/// Self-supervised InfoNCE over `[2B, d]` paired-view embeddings (rows
/// interleaved per sample). The positive of each anchor is its partner view;
/// the denominator runs over every other embedding in the batch. With
/// `symmetric` both views anchor in turn.
pub fn loss_ssl(embeddings: &Var, tau: f32, symmetric: bool) -> Result<Var> {
    let v = embeddings.value();
    if v.shape().len() != 2 || v.rows() < 2 || v.rows() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "expected [2B, d] paired embeddings, got {:?}",
            v.shape()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    check_norms(&v, "loss_ssl")?;
    Ok(embeddings.infonce_pairs(tau, symmetric))
}

/// Image-text contrastive loss. Anchors are the first-view embeddings
/// `[B, d]`; `texts` holds one embedding per sample-view slot `[M, d]` with
/// its style id; positives for an anchor are all slots sharing its style
/// (its own sample included); the denominator spans all `M` slots.
pub fn loss_text(
    anchors: &Var,
    texts: &Var,
    anchor_styles: &[u32],
    text_styles: &[u32],
    tau: f32,
) -> Result<Var> {
    let a = anchors.value();
    let t = texts.value();
    if a.shape().len() != 2 || t.shape().len() != 2 || a.cols() != t.cols() {
        return Err(Error::ShapeMismatch(format!(
            "anchors {:?} vs texts {:?}",
            a.shape(),
            t.shape()
        )));
    }
    if a.rows() != anchor_styles.len() || t.rows() != text_styles.len() {
        return Err(Error::ShapeMismatch("style id lengths differ from rows".into()));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    check_norms(&a, "loss_text anchors")?;
    check_norms(&t, "loss_text texts")?;

    let (b, m) = (a.rows(), t.rows());
    let mut pos = vec![0.0f32; b * m];
    for i in 0..b {
        let mut any = false;
        for k in 0..m {
            if text_styles[k] == anchor_styles[i] {
                pos[i * m + k] = 1.0;
                any = true;
            }
        }
        if !any {
            return Err(Error::InvalidInput(format!(
                "anchor {i} (style {}) has no positive text slot",
                anchor_styles[i]
            )));
        }
    }
    Ok(anchors.text_nce(texts, &Tensor::from_vec(&[b, m], pos), tau))
}
