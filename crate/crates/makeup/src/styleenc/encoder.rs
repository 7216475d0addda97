//! The makeup style encoder: a small ViT with a projection head. Fine-tuning
//! touches only the last transformer block, the final norm and the head; the
//! rest stays frozen after init.

use gradtape::nn::{Conv2d, LayerNorm, Linear, Param, ParamStore, SplitMix64};
use gradtape::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::imageio::image_dims;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 128,
            depth: 4,
            heads: 4,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch) * (self.image_size / self.patch)
    }
}

struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut SplitMix64) -> Block {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            wq: Linear::new(store, &format!("{name}.wq"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.wk"), width, width, rng),
            wv: Linear::new(store, &format!("{name}.wv"), width, width, rng),
            wo: Linear::new(store, &format!("{name}.wo"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 2 * width, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * width, width, rng),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var, heads: usize) -> Var {
        let h = self.ln1.forward(tape, x);
        let q = self.wq.forward(tape, &h);
        let k = self.wk.forward(tape, &h);
        let v = self.wv.forward(tape, &h);
        let attn = multi_head_attention(&q, &k, &v, heads);
        let x = x.add(&self.wo.forward(tape, &attn));
        let h = self.ln2.forward(tape, &x);
        let m = self.fc2.forward(tape, &self.fc1.forward(tape, &h).gelu());
        x.add(&m)
    }
}

/// Standard scaled dot-product attention over `[T, C]` with column-sliced
/// heads. Returns `[T, C]` (pre output-projection).
pub fn multi_head_attention(q: &Var, k: &Var, v: &Var, heads: usize) -> Var {
    let c = q.shape()[1];
    assert_eq!(c % heads, 0, "width not divisible by heads");
    let hd = c / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let parts: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * hd, hd);
            let kh = k.slice_cols(h * hd, hd);
            let vh = v.slice_cols(h * hd, hd);
            let scores = qh.matmul(&kh, false, true).scale(scale);
            scores.softmax_rows().matmul(&vh, false, false)
        })
        .collect();
    let refs: Vec<&Var> = parts.iter().collect();
    Var::concat_cols(&refs)
}

pub struct StyleEncoder {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    patch: Conv2d,
    pos: Rc<Param>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head_fc1: Linear,
    head_fc2: Linear,
}

impl StyleEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> StyleEncoder {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed ^ 0xe2c0_de00);
        let patch = Conv2d::new(
            &mut store,
            "patch",
            3,
            cfg.width,
            cfg.patch,
            cfg.patch,
            0,
            &mut rng,
        );
        let pos = store.register(
            "pos",
            Tensor::from_fn(&[cfg.tokens(), cfg.width], |_| rng.normal() * 0.02),
        );
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut store, &format!("block{i}"), cfg.width, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut store, "final_ln", cfg.width);
        // Two-layer projection head: instance-specific contrastive structure
        // can live here instead of crowding the backbone features.
        let head_fc1 = Linear::new(&mut store, "head.fc1", cfg.width, cfg.width, &mut rng);
        let head_fc2 = Linear::new(&mut store, "head.fc2", cfg.width, cfg.embed_dim, &mut rng);
        let enc = StyleEncoder {
            cfg,
            store,
            patch,
            pos,
            blocks,
            final_ln,
            head_fc1,
            head_fc2,
        };
        enc.freeze_backbone();
        enc
    }

    /// Freeze everything except the last block, the final norm and the
    /// projection head.
    pub fn freeze_backbone(&self) {
        let last = format!("block{}", self.cfg.depth - 1);
        for p in self.store.iter() {
            let n = p.name();
            let trainable =
                n.starts_with(&last) || n.starts_with("final_ln") || n.starts_with("head");
            p.set_trainable(trainable);
        }
    }

    pub fn set_all_trainable(&self, v: bool) {
        for p in self.store.iter() {
            p.set_trainable(v);
        }
    }

    /// Hash of the frozen parameters (freeze contract checks).
    pub fn frozen_hash(&self) -> u64 {
        self.store.content_hash_where(|p| !p.trainable())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = image_dims(image);
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {0}x{0} images, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Token features from the last encoder layer (after the final norm),
    /// `[tokens, width]`.
    pub fn forward_tokens(&self, tape: &Tape, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let x = tape.constant(image.clone());
        let patches = self.patch.forward(tape, &x).chw_to_tokens();
        let pos = tape.param(&self.pos);
        let mut h = patches.add(&pos);
        for b in &self.blocks {
            h = b.forward(tape, &h, self.cfg.heads);
        }
        Ok(self.final_ln.forward(tape, &h))
    }

    /// Pooled makeup-style embedding, `[1, embed_dim]`.
    pub fn embed(&self, tape: &Tape, image: &Tensor) -> Result<Var> {
        let tokens = self.forward_tokens(tape, image)?;
        let t = tokens.shape()[0];
        let pool = tape.constant(Tensor::full(&[1, t], 1.0 / t as f32));
        let mean = pool.matmul(&tokens, false, false);
        let h = self.head_fc1.forward(tape, &mean).gelu();
        Ok(self.head_fc2.forward(tape, &h))
    }

    /// Pooled embedding as a plain vector (inference convenience).
    pub fn embed_vec(&self, image: &Tensor) -> Result<Vec<f32>> {
        let tape = Tape::new();
        Ok(self.embed(&tape, image)?.value().into_vec())
    }

    /// Pooled last-layer features before the projection head, `[width]`.
    /// The head is contrastive-training scaffolding; downstream consumers
    /// (KNN evaluation, the stage-2 projector) read the encoder features.
    pub fn features_vec(&self, image: &Tensor) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let tokens = self.forward_tokens(&tape, image)?;
        let t = tokens.shape()[0];
        let pool = tape.constant(Tensor::full(&[1, t], 1.0 / t as f32));
        Ok(pool.matmul(&tokens, false, false).value().into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_dim_and_determinism() {
        let enc = StyleEncoder::new(EncoderConfig { image_size: 32, ..Default::default() }, 0);
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 19) as f32 / 19.0);
        let a = enc.embed_vec(&img).unwrap();
        let b = enc.embed_vec(&img).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn freeze_mask_keeps_gradients_off_the_backbone() {
        let cfg = EncoderConfig { image_size: 32, depth: 2, ..Default::default() };
        let enc = StyleEncoder::new(cfg, 1);
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let tape = Tape::new();
        let z = enc.embed(&tape, &img).unwrap();
        let loss = z.square().mean_all();
        let grads = tape.backward(&loss);
        for p in enc.store.iter() {
            let has = grads.param(p).is_some();
            assert_eq!(
                has,
                p.trainable(),
                "param {} trainable={} grad={}",
                p.name(),
                p.trainable(),
                has
            );
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let enc = StyleEncoder::new(EncoderConfig::default(), 0);
        let img = Tensor::zeros(&[3, 32, 32]);
        assert!(enc.embed_vec(&img).is_err());
    }
}
