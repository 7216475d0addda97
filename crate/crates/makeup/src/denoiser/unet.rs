//! Small text-conditioned UNet denoiser with pluggable image-prompt
//! cross-attention (decoupled key/value stream summed with the text stream),
//! residual conditioning ports for the identity branch, and per-layer
//! attention map capture for the image-prompt tokens.

use gradtape::nn::{Conv2d, GroupNorm, Linear, ParamStore, SplitMix64};
use gradtape::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::LoraStack;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UnetConfig {
    pub base_channels: usize,
    pub ctx_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            ctx_dim: 64,
            heads: 4,
            time_dim: 128,
            groups: 8,
        }
    }
}

impl UnetConfig {
    pub fn channels(&self) -> [usize; 3] {
        [
            self.base_channels,
            self.base_channels * 2,
            self.base_channels * 4,
        ]
    }

    /// Attention widths of the five cross-attention layers in forward order
    /// (enc mid-res, enc low-res, mid, dec low-res, dec mid-res).
    pub fn cross_attn_widths(&self) -> [usize; 5] {
        let [_, c1, c2] = self.channels();
        [c1, c2, c2, c2, c1]
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &UnetConfig,
        rng: &mut SplitMix64,
    ) -> ResBlock {
        ResBlock {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), c_in, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            time_proj: Linear::new(store, &format!("{name}.time"), cfg.time_dim, c_out, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), c_out, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            skip: if c_in != c_out {
                Some(Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    c_in,
                    c_out,
                    1,
                    1,
                    0,
                    rng,
                ))
            } else {
                None
            },
        }
    }

    fn forward(&self, tape: &Tape, x: &Var, temb: &Var) -> Var {
        let mut h = self.conv1.forward(tape, &self.gn1.forward(tape, x).silu());
        let tproj = self.time_proj.forward(tape, temb).reshape(&[
            self.time_proj.weight.value().shape()[0],
        ]);
        h = h.add_channels(&tproj);
        let h = self.conv2.forward(tape, &self.gn2.forward(tape, &h).silu());
        match &self.skip {
            Some(s) => s.forward(tape, x).add(&h),
            None => x.add(&h),
        }
    }
}

/// One captured image-prompt attention map: per-location distribution over
/// the N region tokens, head-averaged, at the layer's spatial resolution.
pub struct AttnLayerMap {
    pub h: usize,
    pub w: usize,
    pub probs: Var, // [h*w, N]
    pub per_head: Vec<Tensor>,
}

struct CrossAttnBlock {
    gn: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    channels: usize,
}

impl CrossAttnBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &UnetConfig,
        rng: &mut SplitMix64,
    ) -> CrossAttnBlock {
        CrossAttnBlock {
            gn: GroupNorm::new(store, &format!("{name}.gn"), channels, cfg.groups),
            wq: Linear::new(store, &format!("{name}.wq"), channels, channels, rng),
            wk: Linear::new(store, &format!("{name}.wk"), cfg.ctx_dim, channels, rng),
            wv: Linear::new(store, &format!("{name}.wv"), cfg.ctx_dim, channels, rng),
            wo: Linear::new(store, &format!("{name}.wo"), channels, channels, rng),
            channels,
        }
    }

    /// Decoupled cross-attention: text stream through the base projections,
    /// image-prompt stream through base + LoRA deltas with a LoRA-only
    /// output path, summed. Returns the new hidden state and, when an image
    /// prompt is present, the head-averaged attention map over its tokens.
    fn forward(
        &self,
        tape: &Tape,
        x: &Var,
        text_tokens: &Var,
        image_ctx: Option<(&Var, Option<&crate::inject::LoraLayer>)>,
        heads: usize,
    ) -> (Var, Option<AttnLayerMap>) {
        let shape = x.shape();
        let (h, w) = (shape[1], shape[2]);
        let tokens = self.gn.forward(tape, x).chw_to_tokens(); // [HW, C]
        let q = self.wq.forward(tape, &tokens);
        let kt = self.wk.forward(tape, text_tokens);
        let vt = self.wv.forward(tape, text_tokens);
        let (attn_text, _) = attention_with_probs(&q, &kt, &vt, heads);
        let mut out = self.wo.forward(tape, &attn_text);

        let mut record = None;
        if let Some((f, lora)) = image_ctx {
            let mut qi = q;
            let mut ki = self.wk.forward(tape, f);
            let mut vi = self.wv.forward(tape, f);
            if let Some(l) = lora {
                qi = qi.add(&l.delta_q(tape, &tokens));
                ki = ki.add(&l.delta_k(tape, f));
                vi = vi.add(&l.delta_v(tape, f));
            }
            let (attn_img, probs, per_head) = attention_with_probs_full(&qi, &ki, &vi, heads);
            if let Some(l) = lora {
                out = out.add(&l.project_out(tape, &attn_img));
            }
            record = Some(AttnLayerMap {
                h,
                w,
                probs,
                per_head,
            });
        }

        let _ = self.channels;
        (x.add(&out.tokens_to_chw(h, w)), record)
    }
}

/// Multi-head scaled dot-product attention returning the head-averaged
/// probability map as a differentiable Var.
fn attention_with_probs(q: &Var, k: &Var, v: &Var, heads: usize) -> (Var, Var) {
    let (out, probs, _) = attention_with_probs_full(q, k, v, heads);
    (out, probs)
}

fn attention_with_probs_full(q: &Var, k: &Var, v: &Var, heads: usize) -> (Var, Var, Vec<Tensor>) {
    let c = q.shape()[1];
    assert_eq!(c % heads, 0, "attention width not divisible by heads");
    let hd = c / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut parts = Vec::with_capacity(heads);
    let mut probs_sum: Option<Var> = None;
    let mut per_head = Vec::with_capacity(heads);
    for hh in 0..heads {
        let qh = q.slice_cols(hh * hd, hd);
        let kh = k.slice_cols(hh * hd, hd);
        let vh = v.slice_cols(hh * hd, hd);
        let p = qh.matmul(&kh, false, true).scale(scale).softmax_rows();
        per_head.push(p.value());
        probs_sum = Some(match probs_sum {
            Some(acc) => acc.add(&p),
            None => p.clone(),
        });
        parts.push(p.matmul(&vh, false, false));
    }
    let refs: Vec<&Var> = parts.iter().collect();
    let out = Var::concat_cols(&refs);
    let probs = probs_sum.unwrap().scale(1.0 / heads as f32);
    (out, probs, per_head)
}

/// Extra conditioning fed into a forward pass. Everything is optional; with
/// all fields empty the output depends only on `(x_t, t, text tokens)`.
#[derive(Default)]
pub struct UnetConditioning<'a> {
    /// Region makeup embeddings `[N, ctx_dim]` (the image prompt).
    pub region_tokens: Option<Var>,
    pub lora: Option<&'a LoraStack>,
    /// Residuals added after each encoder level: `[c0@s, c1@s/2, c2@s/4]`.
    pub identity_residuals: Option<Vec<Var>>,
}

pub struct DenoisingUNet {
    pub cfg: UnetConfig,
    pub store: ParamStore,
    time_fc1: Linear,
    time_fc2: Linear,
    in_conv: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    attn1: CrossAttnBlock,
    down1: Conv2d,
    enc2: ResBlock,
    attn2: CrossAttnBlock,
    mid1: ResBlock,
    attn_mid: CrossAttnBlock,
    mid2: ResBlock,
    dec2: ResBlock,
    attn_d2: CrossAttnBlock,
    up1: Conv2d,
    dec1: ResBlock,
    attn_d1: CrossAttnBlock,
    up0: Conv2d,
    dec0: ResBlock,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

impl DenoisingUNet {
    pub fn new(cfg: UnetConfig, seed: u64) -> DenoisingUNet {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed ^ 0x0e70_u64);
        let [c0, c1, c2] = cfg.channels();
        let time_fc1 = Linear::new(&mut store, "time.fc1", 64, cfg.time_dim, &mut rng);
        let time_fc2 = Linear::new(&mut store, "time.fc2", cfg.time_dim, cfg.time_dim, &mut rng);
        let in_conv = Conv2d::new(&mut store, "in_conv", 3, c0, 3, 1, 1, &mut rng);
        let enc0 = ResBlock::new(&mut store, "enc0", c0, c0, &cfg, &mut rng);
        let down0 = Conv2d::new(&mut store, "down0", c0, c1, 3, 2, 1, &mut rng);
        let enc1 = ResBlock::new(&mut store, "enc1", c1, c1, &cfg, &mut rng);
        let attn1 = CrossAttnBlock::new(&mut store, "attn1", c1, &cfg, &mut rng);
        let down1 = Conv2d::new(&mut store, "down1", c1, c2, 3, 2, 1, &mut rng);
        let enc2 = ResBlock::new(&mut store, "enc2", c2, c2, &cfg, &mut rng);
        let attn2 = CrossAttnBlock::new(&mut store, "attn2", c2, &cfg, &mut rng);
        let mid1 = ResBlock::new(&mut store, "mid1", c2, c2, &cfg, &mut rng);
        let attn_mid = CrossAttnBlock::new(&mut store, "attn_mid", c2, &cfg, &mut rng);
        let mid2 = ResBlock::new(&mut store, "mid2", c2, c2, &cfg, &mut rng);
        let dec2 = ResBlock::new(&mut store, "dec2", c2 + c2, c2, &cfg, &mut rng);
        let attn_d2 = CrossAttnBlock::new(&mut store, "attn_d2", c2, &cfg, &mut rng);
        let up1 = Conv2d::new(&mut store, "up1", c2, c1, 3, 1, 1, &mut rng);
        let dec1 = ResBlock::new(&mut store, "dec1", c1 + c1, c1, &cfg, &mut rng);
        let attn_d1 = CrossAttnBlock::new(&mut store, "attn_d1", c1, &cfg, &mut rng);
        let up0 = Conv2d::new(&mut store, "up0", c1, c0, 3, 1, 1, &mut rng);
        let dec0 = ResBlock::new(&mut store, "dec0", c0 + c0, c0, &cfg, &mut rng);
        let out_gn = GroupNorm::new(&mut store, "out_gn", c0, cfg.groups);
        let out_conv = Conv2d::new(&mut store, "out_conv", c0, 3, 3, 1, 1, &mut rng);
        DenoisingUNet {
            cfg,
            store,
            time_fc1,
            time_fc2,
            in_conv,
            enc0,
            down0,
            enc1,
            attn1,
            down1,
            enc2,
            attn2,
            mid1,
            attn_mid,
            mid2,
            dec2,
            attn_d2,
            up1,
            dec1,
            attn_d1,
            up0,
            dec0,
            out_gn,
            out_conv,
        }
    }

    pub fn set_trainable(&self, v: bool) {
        for p in self.store.iter() {
            p.set_trainable(v);
        }
    }

    fn time_embedding(&self, tape: &Tape, t: usize) -> Var {
        let half = 32usize;
        let emb = Tensor::from_fn(&[1, 64], |i| {
            let idx = i % 64;
            let j = idx % half;
            let freq = (10_000f32).powf(-(j as f32) / half as f32);
            let arg = t as f32 * freq;
            if idx < half {
                arg.sin()
            } else {
                arg.cos()
            }
        });
        let e = tape.constant(emb);
        self.time_fc2
            .forward(tape, &self.time_fc1.forward(tape, &e).silu())
    }

    /// Predict the noise for one sample. `x_t` is `[3,H,W]` with H, W
    /// divisible by 4; `text_tokens` is `[Tt, ctx_dim]`. Returns the
    /// prediction and the attention maps captured at every cross-attention
    /// layer (present only when region tokens are supplied).
    pub fn forward(
        &self,
        tape: &Tape,
        x_t: &Tensor,
        t: usize,
        text_tokens: &Tensor,
        cond: &UnetConditioning,
    ) -> Result<(Var, Vec<AttnLayerMap>)> {
        let s = x_t.shape().to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected [3,H,W] with H,W divisible by 4, got {s:?}"
            )));
        }
        if text_tokens.shape().len() != 2 || text_tokens.shape()[1] != self.cfg.ctx_dim {
            return Err(Error::ShapeMismatch(format!(
                "text tokens must be [T,{}], got {:?}",
                self.cfg.ctx_dim,
                text_tokens.shape()
            )));
        }
        if let Some(r) = &cond.region_tokens {
            let rs = r.shape();
            if rs.len() != 2 || rs[1] != self.cfg.ctx_dim {
                return Err(Error::ShapeMismatch(format!(
                    "region tokens must be [N,{}], got {rs:?}",
                    self.cfg.ctx_dim
                )));
            }
        }
        if let Some(res) = &cond.identity_residuals {
            if res.len() != 3 {
                return Err(Error::ShapeMismatch(
                    "identity residuals must cover the 3 encoder levels".into(),
                ));
            }
        }

        let temb = self.time_embedding(tape, t);
        let text = tape.constant(text_tokens.clone());
        let heads = self.cfg.heads;
        let mut maps = Vec::new();
        let img_ctx = |lora_idx: usize| -> Option<(&Var, Option<&crate::inject::LoraLayer>)> {
            cond.region_tokens
                .as_ref()
                .map(|f| (f, cond.lora.map(|l| &l.layers[lora_idx])))
        };

        let x = tape.constant(x_t.clone());
        let mut h0 = self.enc0.forward(tape, &self.in_conv.forward(tape, &x), &temb);
        if let Some(res) = &cond.identity_residuals {
            h0 = h0.add(&res[0]);
        }
        let mut h1 = self.enc1.forward(tape, &self.down0.forward(tape, &h0), &temb);
        if let Some(res) = &cond.identity_residuals {
            h1 = h1.add(&res[1]);
        }
        let (h1, m) = self.attn1.forward(tape, &h1, &text, img_ctx(0), heads);
        maps.extend(m);
        let mut h2 = self.enc2.forward(tape, &self.down1.forward(tape, &h1), &temb);
        if let Some(res) = &cond.identity_residuals {
            h2 = h2.add(&res[2]);
        }
        let (h2, m) = self.attn2.forward(tape, &h2, &text, img_ctx(1), heads);
        maps.extend(m);

        let mid = self.mid1.forward(tape, &h2, &temb);
        let (mid, m) = self.attn_mid.forward(tape, &mid, &text, img_ctx(2), heads);
        maps.extend(m);
        let mid = self.mid2.forward(tape, &mid, &temb);

        let d2 = self.dec2.forward(tape, &mid.concat_channels(&h2), &temb);
        let (d2, m) = self.attn_d2.forward(tape, &d2, &text, img_ctx(3), heads);
        maps.extend(m);
        let u1 = self.up1.forward(tape, &d2.upsample_nearest_2x());
        let d1 = self.dec1.forward(tape, &u1.concat_channels(&h1), &temb);
        let (d1, m) = self.attn_d1.forward(tape, &d1, &text, img_ctx(4), heads);
        maps.extend(m);
        let u0 = self.up0.forward(tape, &d1.upsample_nearest_2x());
        let d0 = self.dec0.forward(tape, &u0.concat_channels(&h0), &temb);

        let eps = self
            .out_conv
            .forward(tape, &self.out_gn.forward(tape, &d0).silu());
        Ok((eps, maps))
    }

    /// Forward pass returning a plain tensor (inference).
    pub fn predict(
        &self,
        x_t: &Tensor,
        t: usize,
        text_tokens: &Tensor,
        cond: &UnetConditioning,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, x_t, t, text_tokens, cond)?.0.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoisingUNet {
        DenoisingUNet::new(
            UnetConfig {
                base_channels: 8,
                ..Default::default()
            },
            0,
        )
    }

    #[test]
    fn output_shape_matches_input_across_resolutions() {
        let unet = tiny();
        let text = Tensor::zeros(&[4, 64]);
        for size in [32usize, 64, 128] {
            let x = Tensor::from_fn(&[3, size, size], |i| ((i % 9) as f32 - 4.0) / 4.0);
            let out = unet
                .predict(&x, 10, &text, &UnetConditioning::default())
                .unwrap();
            assert_eq!(out.shape(), &[3, size, size]);
        }
    }

    #[test]
    fn unconditioned_forward_captures_no_maps() {
        let unet = tiny();
        let text = Tensor::zeros(&[4, 64]);
        let x = Tensor::zeros(&[3, 32, 32]);
        let tape = Tape::new();
        let (_, maps) = unet
            .forward(&tape, &x, 0, &text, &UnetConditioning::default())
            .unwrap();
        assert!(maps.is_empty());
    }

    #[test]
    fn region_tokens_capture_five_normalized_maps() {
        let unet = tiny();
        let text = Tensor::zeros(&[4, 64]);
        let x = Tensor::from_fn(&[3, 32, 32], |i| (i % 5) as f32 / 5.0);
        let tape = Tape::new();
        let cond = UnetConditioning {
            region_tokens: Some(tape.constant(Tensor::from_fn(&[4, 64], |i| (i % 3) as f32 / 3.0))),
            ..Default::default()
        };
        let (_, maps) = unet.forward(&tape, &x, 3, &text, &cond).unwrap();
        assert_eq!(maps.len(), 5);
        for m in &maps {
            let p = m.probs.value();
            assert_eq!(p.shape()[1], 4);
            assert_eq!(p.shape()[0], m.h * m.w);
            for r in 0..p.rows() {
                let s: f32 = (0..4).map(|c| p.at2(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-5, "location {r} sums to {s}");
            }
            assert_eq!(m.per_head.len(), 4);
        }
    }

    #[test]
    fn zeroed_lora_makes_region_tokens_inert() {
        use gradtape::nn::ParamStore;
        let unet = tiny();
        let text = Tensor::from_fn(&[3, 64], |i| (i % 7) as f32 / 7.0);
        let x = Tensor::from_fn(&[3, 32, 32], |i| (i % 11) as f32 / 11.0);

        let base = unet
            .predict(&x, 5, &text, &UnetConditioning::default())
            .unwrap();

        let mut store2 = ParamStore::new();
        let lora = LoraStack::new(&mut store2, &unet.cfg.cross_attn_widths(), 64, 4, 1);
        let tape = Tape::new();
        let cond = UnetConditioning {
            region_tokens: Some(tape.constant(Tensor::from_fn(&[4, 64], |i| (i % 5) as f32))),
            lora: Some(&lora),
            identity_residuals: None,
        };
        let (out, maps) = unet.forward(&tape, &x, 5, &text, &cond).unwrap();
        assert_eq!(out.value().data(), base.data(), "zero-init LoRA changed the output");
        assert_eq!(maps.len(), 5);
    }
}
