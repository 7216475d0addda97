//! Low-rank adapters for the image-prompt cross-attention stream. One
//! adapter per cross-attention layer, factors on the query/key/value paths
//! (deltas on the shared base projections) and an output path that exists
//! only as the low-rank product, so zeroed factors contribute exactly
//! nothing.

use std::rc::Rc;

use gradtape::nn::{normal_init, Param, ParamStore, SplitMix64};
use gradtape::{Tape, Tensor, Var};

pub struct LoraLayer {
    pub a_q: Rc<Param>,
    pub b_q: Rc<Param>,
    pub a_k: Rc<Param>,
    pub b_k: Rc<Param>,
    pub a_v: Rc<Param>,
    pub b_v: Rc<Param>,
    pub a_o: Rc<Param>,
    pub b_o: Rc<Param>,
    pub rank: usize,
}

impl LoraLayer {
    /// `channels` is the attention width of the host layer; `ctx` the
    /// key/value input dim. The `a` factors get a small normal init, the `b`
    /// factors start at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        ctx: usize,
        rank: usize,
        rng: &mut SplitMix64,
    ) -> LoraLayer {
        let a_std = 1.0 / (channels as f32).sqrt();
        let ctx_std = 1.0 / (ctx as f32).sqrt();
        LoraLayer {
            a_q: store.register(&format!("{name}.a_q"), normal_init(rng, &[rank, channels], a_std)),
            b_q: store.register(&format!("{name}.b_q"), Tensor::zeros(&[channels, rank])),
            a_k: store.register(&format!("{name}.a_k"), normal_init(rng, &[rank, ctx], ctx_std)),
            b_k: store.register(&format!("{name}.b_k"), Tensor::zeros(&[channels, rank])),
            a_v: store.register(&format!("{name}.a_v"), normal_init(rng, &[rank, ctx], ctx_std)),
            b_v: store.register(&format!("{name}.b_v"), Tensor::zeros(&[channels, rank])),
            a_o: store.register(&format!("{name}.a_o"), normal_init(rng, &[rank, channels], a_std)),
            b_o: store.register(&format!("{name}.b_o"), Tensor::zeros(&[channels, rank])),
            rank,
        }
    }

    fn delta(tape: &Tape, x: &Var, a: &Rc<Param>, b: &Rc<Param>) -> Var {
        let av = tape.param(a);
        let bv = tape.param(b);
        x.matmul(&av, false, true).matmul(&bv, false, true)
    }

    pub fn delta_q(&self, tape: &Tape, tokens: &Var) -> Var {
        Self::delta(tape, tokens, &self.a_q, &self.b_q)
    }

    pub fn delta_k(&self, tape: &Tape, ctx_tokens: &Var) -> Var {
        Self::delta(tape, ctx_tokens, &self.a_k, &self.b_k)
    }

    pub fn delta_v(&self, tape: &Tape, ctx_tokens: &Var) -> Var {
        Self::delta(tape, ctx_tokens, &self.a_v, &self.b_v)
    }

    /// Output projection of the image stream (low-rank only).
    pub fn project_out(&self, tape: &Tape, attn: &Var) -> Var {
        Self::delta(tape, attn, &self.a_o, &self.b_o)
    }
}

/// Adapters for every cross-attention layer of the denoiser, in layer order.
pub struct LoraStack {
    pub layers: Vec<LoraLayer>,
}

impl LoraStack {
    /// `widths` lists the attention width of each cross-attention layer.
    pub fn new(
        store: &mut ParamStore,
        widths: &[usize],
        ctx: usize,
        rank: usize,
        seed: u64,
    ) -> LoraStack {
        let mut rng = SplitMix64::new(seed ^ 0x10aa_10aa);
        LoraStack {
            layers: widths
                .iter()
                .enumerate()
                .map(|(i, &w)| LoraLayer::new(store, &format!("lora{i}"), w, ctx, rank, &mut rng))
                .collect(),
        }
    }
}
