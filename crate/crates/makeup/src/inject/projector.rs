//! Learnable region queries and the cross-attention projector that turns
//! encoder token features into N facial-region makeup embeddings.

use std::rc::Rc;

use gradtape::nn::{LayerNorm, Linear, Param, ParamStore, SplitMix64};
use gradtape::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::styleenc::{multi_head_attention, StyleEncoder};

/// N learnable query tokens in fixed region order (skin, eyes, nose, mouth).
pub struct RegionQueryBank {
    pub tokens: Rc<Param>,
    pub num_regions: usize,
    pub dim: usize,
}

impl RegionQueryBank {
    pub fn new(store: &mut ParamStore, num_regions: usize, dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed ^ 0x9ba9_c0de);
        let tokens = store.register(
            "query_bank.tokens",
            Tensor::from_fn(&[num_regions, dim], |_| rng.normal() * 0.2),
        );
        Self {
            tokens,
            num_regions,
            dim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProjectorConfig {
    pub depth: usize,
    pub heads: usize,
    /// Query/working dim (= region embedding dim).
    pub dim: usize,
    /// Width of the encoder token features consumed as keys/values.
    pub encoder_width: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            dim: 64,
            encoder_width: 128,
        }
    }
}

struct ProjectorBlock {
    ln_q: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Resampler-style stack: queries attend to encoder tokens, then a small
/// feed-forward, residual throughout; final norm + linear head.
pub struct Projector {
    pub cfg: ProjectorConfig,
    input_proj: Linear,
    blocks: Vec<ProjectorBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, cfg: ProjectorConfig, seed: u64) -> Projector {
        let mut rng = SplitMix64::new(seed ^ 0x9c09_ec70);
        let d = cfg.dim;
        let input_proj = Linear::new(store, "projector.input", cfg.encoder_width, d, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("projector.block{i}");
                ProjectorBlock {
                    ln_q: LayerNorm::new(store, &format!("{n}.ln_q"), d),
                    wq: Linear::new(store, &format!("{n}.wq"), d, d, &mut rng),
                    wk: Linear::new(store, &format!("{n}.wk"), d, d, &mut rng),
                    wv: Linear::new(store, &format!("{n}.wv"), d, d, &mut rng),
                    wo: Linear::new(store, &format!("{n}.wo"), d, d, &mut rng),
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), d),
                    fc1: Linear::new(store, &format!("{n}.fc1"), d, 2 * d, &mut rng),
                    fc2: Linear::new(store, &format!("{n}.fc2"), 2 * d, d, &mut rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "projector.final_ln", d);
        let head = Linear::new(store, "projector.head", d, d, &mut rng);
        Projector {
            cfg,
            input_proj,
            blocks,
            final_ln,
            head,
        }
    }

    /// `queries [N, dim]`, `encoder_tokens [T, encoder_width]` ->
    /// region embeddings `[N, dim]`.
    pub fn forward(&self, tape: &Tape, queries: &Var, encoder_tokens: &Var) -> Result<Var> {
        let et = encoder_tokens.shape();
        if et.len() != 2 || et[1] != self.cfg.encoder_width {
            return Err(Error::ShapeMismatch(format!(
                "projector expects encoder tokens [T,{}], got {et:?}",
                self.cfg.encoder_width
            )));
        }
        let kv = self.input_proj.forward(tape, encoder_tokens);
        let mut q = queries.clone();
        for b in &self.blocks {
            let qn = b.ln_q.forward(tape, &q);
            let attn = multi_head_attention(
                &b.wq.forward(tape, &qn),
                &b.wk.forward(tape, &kv),
                &b.wv.forward(tape, &kv),
                self.cfg.heads,
            );
            q = q.add(&b.wo.forward(tape, &attn));
            let ff = b
                .fc2
                .forward(tape, &b.fc1.forward(tape, &b.ln_ff.forward(tape, &q)).gelu());
            q = q.add(&ff);
        }
        Ok(self.head.forward(tape, &self.final_ln.forward(tape, &q)))
    }
}

/// Region makeup embeddings `f_1..f_N` for one reference image.
#[derive(Clone, Debug)]
pub struct RegionEmbeddingSet {
    /// `[N, dim]`, region-ordered.
    pub vectors: Tensor,
    /// Reference image identifier the set was extracted from.
    pub provenance: String,
}

impl RegionEmbeddingSet {
    pub fn num_regions(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn region_vec(&self, n: usize) -> Vec<f32> {
        let d = self.vectors.cols();
        self.vectors.data()[n * d..(n + 1) * d].to_vec()
    }
}

/// Query the frozen style encoder through the projector: encoder last-layer
/// token grid as keys/values, the learnable bank as queries.
pub fn extract_region_embeddings(
    encoder: &StyleEncoder,
    reference: &Tensor,
    bank: &RegionQueryBank,
    projector: &Projector,
    provenance: &str,
) -> Result<RegionEmbeddingSet> {
    if encoder.cfg.width != projector.cfg.encoder_width {
        return Err(Error::ShapeMismatch(format!(
            "encoder width {} vs projector keys {}",
            encoder.cfg.width, projector.cfg.encoder_width
        )));
    }
    let tape = Tape::new();
    let tokens = encoder.forward_tokens(&tape, reference)?;
    let queries = tape.param(&bank.tokens);
    let out = projector.forward(&tape, &queries, &tokens)?;
    Ok(RegionEmbeddingSet {
        vectors: out.value(),
        provenance: provenance.to_string(),
    })
}

/// Differentiable variant used inside the stage-2 training step.
pub fn region_embeddings_var(
    encoder: &StyleEncoder,
    tape: &Tape,
    reference: &Tensor,
    bank: &RegionQueryBank,
    projector: &Projector,
) -> Result<Var> {
    let tokens = encoder.forward_tokens(tape, reference)?;
    let queries = tape.param(&bank.tokens);
    projector.forward(tape, &queries, &tokens)
}
