//! Spatial ops: conv2d (im2col + GEMM), group norm, nearest upsampling,
//! channel concat, and CHW <-> token layout changes. All single-sample
//! ([C,H,W]); batching is a loop at the model level.

use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let rows = ci * kh * kw;
    let cols = ho * wo;
    let mut col = vec![0.0f32; rows * cols];
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row * cols + oy * wo + ox] =
                            x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let cols = ho * wo;
    let mut gx = vec![0.0f32; ci * h * w];
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(c * h + iy as usize) * w + ix as usize] +=
                            gcol[row * cols + oy * wo + ox];
                    }
                }
            }
        }
    }
    gx
}

impl Var {
    /// 2D convolution over `[Ci,H,W]` with weight `[Co,Ci,kh,kw]` and bias `[Co]`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,kh,kw]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(b.shape(), &[co], "conv2d bias shape");

        let (col, ho, wo) = im2col(x.data(), ci, h, wd, kh, kw, stride, pad);
        let krows = ci * kh * kw;
        let cols = ho * wo;
        let mut out = vec![0.0f32; co * cols];
        gemm(co, krows, cols, w.data(), false, &col, false, &mut out, 0.0);
        for c in 0..co {
            let bc = b.data()[c];
            for v in &mut out[c * cols..(c + 1) * cols] {
                *v += bc;
            }
        }

        let (xc, wc) = (x.clone(), w.clone());
        self.tape.op(
            Tensor::from_vec(&[co, ho, wo], out),
            vec![self, weight, bias],
            Box::new(move |g| {
                // Recompute im2col rather than caching it; trades compute for memory.
                let (col, _, _) = im2col(xc.data(), ci, h, wd, kh, kw, stride, pad);
                let mut gw = vec![0.0f32; co * krows];
                gemm(co, cols, krows, g.data(), false, &col, true, &mut gw, 0.0);
                let mut gb = vec![0.0f32; co];
                for c in 0..co {
                    gb[c] = g.data()[c * cols..(c + 1) * cols].iter().sum();
                }
                let mut gcol = vec![0.0f32; krows * cols];
                gemm(krows, co, cols, wc.data(), true, g.data(), false, &mut gcol, 0.0);
                let gx = col2im(&gcol, ci, h, wd, kh, kw, stride, pad, ho, wo);
                vec![
                    Tensor::from_vec(&[ci, h, wd], gx),
                    Tensor::from_vec(&[co, ci, kh, kw], gw),
                    Tensor::from_vec(&[co], gb),
                ]
            }),
        )
    }

    /// GroupNorm over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var, eps: f32) -> Var {
        let x = self.value();
        let xs = x.shape().to_vec();
        assert_eq!(xs.len(), 3, "group_norm input must be [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);
        let gs = c / groups; // channels per group
        let gn = gs * h * w; // elements per group

        let mut xhat = vec![0.0f32; c * h * w];
        let mut inv_std = vec![0.0f32; groups];
        for g in 0..groups {
            let lo = g * gs * h * w;
            let hi = lo + gn;
            let xs_ = &x.data()[lo..hi];
            let mean = xs_.iter().map(|&v| v as f64).sum::<f64>() / gn as f64;
            let var = xs_.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / gn as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[g] = istd as f32;
            for i in 0..gn {
                xhat[lo + i] = ((xs_[i] as f64 - mean) * istd) as f32;
            }
        }
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / hw;
            xhat[i] * gm.data()[ch] + bt.data()[ch]
        });
        let xhat = Tensor::from_vec(&[c, h, w], xhat);
        let gm_c = gm.clone();
        self.tape.op(
            out,
            vec![self, gamma, beta],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; c * hw];
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for ch in 0..c {
                    for i in 0..hw {
                        let idx = ch * hw + i;
                        ggamma[ch] += g.data()[idx] * xhat.data()[idx];
                        gbeta[ch] += g.data()[idx];
                    }
                }
                for grp in 0..groups {
                    let lo = grp * gs * hw;
                    let mut sum_gxh = 0.0f64;
                    let mut sum_gxh_xh = 0.0f64;
                    for i in 0..gn {
                        let idx = lo + i;
                        let gxh = g.data()[idx] * gm_c.data()[idx / hw];
                        sum_gxh += gxh as f64;
                        sum_gxh_xh += (gxh * xhat.data()[idx]) as f64;
                    }
                    let m1 = (sum_gxh / gn as f64) as f32;
                    let m2 = (sum_gxh_xh / gn as f64) as f32;
                    for i in 0..gn {
                        let idx = lo + i;
                        let gxh = g.data()[idx] * gm_c.data()[idx / hw];
                        gx[idx] = inv_std[grp] * (gxh - m1 - xhat.data()[idx] * m2);
                    }
                }
                vec![
                    Tensor::from_vec(&[c, h, w], gx),
                    Tensor::from_vec(&[c], ggamma),
                    Tensor::from_vec(&[c], gbeta),
                ]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest_2x(&self) -> Var {
        let x = self.value();
        let xs = x.shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (h2, w2) = (2 * h, 2 * w);
        let out = Tensor::from_fn(&[c, h2, w2], |i| {
            let ch = i / (h2 * w2);
            let y = (i / w2) % h2;
            let xcol = i % w2;
            x.data()[(ch * h + y / 2) * w + xcol / 2]
        });
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xcol in 0..w2 {
                            gx[(ch * h + y / 2) * w + xcol / 2] +=
                                g.data()[(ch * h2 + y) * w2 + xcol];
                        }
                    }
                }
                vec![Tensor::from_vec(&[c, h, w], gx)]
            }),
        )
    }

    /// `x[C,H,W] + b[C]` broadcast over spatial positions.
    pub fn add_channels(&self, bias: &Var) -> Var {
        let x = self.value();
        let b = bias.value();
        let xs = x.shape().to_vec();
        assert_eq!(xs.len(), 3, "add_channels input must be [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let bflat = b.reshaped(&[c]);
        let hw = h * w;
        let out = Tensor::from_fn(&xs, |i| x.data()[i] + bflat.data()[i / hw]);
        let bshape = b.shape().to_vec();
        self.tape.op(
            out,
            vec![self, bias],
            Box::new(move |g| {
                let mut gb = vec![0.0f32; c];
                for ch in 0..c {
                    gb[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().sum();
                }
                vec![g.clone(), Tensor::from_vec(&bshape, gb)]
            }),
        )
    }

    /// Concatenate two `[C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(&sa[1..], &sb[1..], "concat_channels spatial mismatch");
        let (ca, cb) = (sa[0], sb[0]);
        let hw = sa[1] * sa[2];
        let mut buf = Vec::with_capacity((ca + cb) * hw);
        buf.extend_from_slice(a.data());
        buf.extend_from_slice(b.data());
        let (h, w) = (sa[1], sa[2]);
        self.tape.op(
            Tensor::from_vec(&[ca + cb, h, w], buf),
            vec![self, other],
            Box::new(move |g| {
                let ga = Tensor::from_vec(&[ca, h, w], g.data()[..ca * hw].to_vec());
                let gb = Tensor::from_vec(&[cb, h, w], g.data()[ca * hw..].to_vec());
                vec![ga, gb]
            }),
        )
    }

    /// `[C,H,W]` -> `[H*W, C]` token layout.
    pub fn chw_to_tokens(&self) -> Var {
        let x = self.value();
        let xs = x.shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let out = Tensor::from_fn(&[hw, c], |i| x.data()[(i % c) * hw + i / c]);
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let ch = i / hw;
                    let t = i % hw;
                    g.data()[t * c + ch]
                });
                vec![gx]
            }),
        )
    }

    /// `[H*W, C]` tokens -> `[C,H,W]`.
    pub fn tokens_to_chw(&self, h: usize, w: usize) -> Var {
        let x = self.value();
        assert_eq!(x.shape().len(), 2);
        let (hw, c) = (x.rows(), x.cols());
        assert_eq!(hw, h * w, "token count does not match h*w");
        let out = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / hw;
            let t = i % hw;
            x.data()[t * c + ch]
        });
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                let gx = Tensor::from_fn(&[hw, c], |i| g.data()[(i % c) * hw + i / c]);
                vec![gx]
            }),
        )
    }
}
