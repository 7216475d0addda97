//! Differentiable tensor operations recorded on the tape.
//!
//! Each op computes eagerly and pushes a backward closure that maps the
//! output gradient to per-parent gradient contributions.

use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl Var {
    // -- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .op(out, vec![self, other], Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.op(
            out,
            vec![self, other],
            Box::new(|g| vec![g.clone(), g.map(|x| -x)]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        let (ca, cb) = (a, b);
        self.tape.op(
            out,
            vec![self, other],
            Box::new(move |g| vec![g.zip_map(&cb, |g, y| g * y), g.zip_map(&ca, |g, x| g * x)]),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        let (ca, cb) = (a, b);
        self.tape.op(
            out,
            vec![self, other],
            Box::new(move |g| {
                let ga = g.zip_map(&cb, |g, y| g / y);
                let gb = Tensor::from_fn(ca.shape(), |i| {
                    let y = cb.data()[i];
                    -g.data()[i] * ca.data()[i] / (y * y)
                });
                vec![ga, gb]
            }),
        )
    }

    // -- elementwise unary ---------------------------------------------------

    pub fn neg(&self) -> Var {
        let out = self.value().map(|x| -x);
        self.tape
            .op(out, vec![self], Box::new(|g| vec![g.map(|x| -x)]))
    }

    pub fn scale(&self, c: f32) -> Var {
        let out = self.value().map(|x| x * c);
        self.tape
            .op(out, vec![self], Box::new(move |g| vec![g.map(|x| x * c)]))
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        let out = self.value().map(|x| x + c);
        self.tape.op(out, vec![self], Box::new(|g| vec![g.clone()]))
    }

    pub fn square(&self) -> Var {
        let a = self.value();
        let out = a.map(|x| x * x);
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| vec![g.zip_map(&a, |g, x| 2.0 * g * x)]),
        )
    }

    pub fn relu(&self) -> Var {
        let a = self.value();
        let out = a.map(|x| x.max(0.0));
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| vec![g.zip_map(&a, |g, x| if x > 0.0 { g } else { 0.0 })]),
        )
    }

    pub fn silu(&self) -> Var {
        let a = self.value();
        let out = a.map(|x| x * sigmoid(x));
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                vec![g.zip_map(&a, |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var {
        let a = self.value();
        let out = a.map(gelu_f);
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| vec![g.zip_map(&a, |g, x| g * gelu_df(x))]),
        )
    }

    // -- broadcast ------------------------------------------------------------

    /// `x[M,N] + b[N]` (bias over rows).
    pub fn add_row(&self, bias: &Var) -> Var {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.shape().len(), 2, "add_row expects 2D input");
        assert_eq!(b.shape(), &[x.cols()], "add_row bias shape");
        let n = x.cols();
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i % n]);
        let cols = n;
        let rows = x.rows();
        self.tape.op(
            out,
            vec![self, bias],
            Box::new(move |g| {
                let mut gb = vec![0.0f32; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g.data()[r * cols + c];
                    }
                }
                vec![g.clone(), Tensor::from_vec(&[cols], gb)]
            }),
        )
    }

    // -- matmul -----------------------------------------------------------------

    /// `op(self) @ op(other)` for 2D tensors; transposition is stride-level.
    pub fn matmul(&self, other: &Var, trans_a: bool, trans_b: bool) -> Var {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape().len(), 2, "matmul A must be 2D");
        assert_eq!(b.shape().len(), 2, "matmul B must be 2D");
        let (m, ka) = if trans_a {
            (a.cols(), a.rows())
        } else {
            (a.rows(), a.cols())
        };
        let (kb, n) = if trans_b {
            (b.cols(), b.rows())
        } else {
            (b.rows(), b.cols())
        };
        assert_eq!(ka, kb, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
        let k = ka;
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, a.data(), trans_a, b.data(), trans_b, &mut out, 0.0);
        let (ca, cb) = (a.clone(), b.clone());
        self.tape.op(
            Tensor::from_vec(&[m, n], out),
            vec![self, other],
            Box::new(move |g| {
                // dA' = G B'^T, dB' = A'^T G  (primed = after transposition),
                // then un-transpose back into the storage layout.
                let ga = if trans_a {
                    // A stored k x m; dA = B' G^T
                    let mut buf = vec![0.0f32; ca.numel()];
                    gemm(k, n, m, cb.data(), trans_b, g.data(), true, &mut buf, 0.0);
                    Tensor::from_vec(ca.shape(), buf)
                } else {
                    let mut buf = vec![0.0f32; ca.numel()];
                    gemm(m, n, k, g.data(), false, cb.data(), !trans_b, &mut buf, 0.0);
                    Tensor::from_vec(ca.shape(), buf)
                };
                let gb = if trans_b {
                    // B stored n x k; dB = G^T A'
                    let mut buf = vec![0.0f32; cb.numel()];
                    gemm(n, m, k, g.data(), true, ca.data(), trans_a, &mut buf, 0.0);
                    Tensor::from_vec(cb.shape(), buf)
                } else {
                    let mut buf = vec![0.0f32; cb.numel()];
                    gemm(k, m, n, ca.data(), !trans_a, g.data(), false, &mut buf, 0.0);
                    Tensor::from_vec(cb.shape(), buf)
                };
                vec![ga, gb]
            }),
        )
    }

    // -- shape ----------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let out = self.value().reshaped(shape);
        let orig = self.shape();
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| vec![g.reshaped(&orig)]),
        )
    }

    pub fn transpose2d(&self) -> Var {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let out = Tensor::from_fn(&[c, r], |i| {
            let (nr, nc) = (i / r, i % r);
            a.at2(nc, nr)
        });
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                let gt = Tensor::from_fn(&[r, c], |i| {
                    let (nr, nc) = (i / c, i % c);
                    g.at2(nc, nr)
                });
                vec![gt]
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let out = Tensor::from_fn(&[r, len], |i| a.at2(i / len, start + i % len));
        self.tape.op(
            out,
            vec![self],
            Box::new(move |g| {
                let mut buf = vec![0.0f32; r * c];
                for row in 0..r {
                    for col in 0..len {
                        buf[row * c + start + col] = g.at2(row, col);
                    }
                }
                vec![Tensor::from_vec(&[r, c], buf)]
            }),
        )
    }

    pub fn concat_cols(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut buf = vec![0.0f32; r * total];
        let mut off = 0;
        for v in &vals {
            for row in 0..r {
                for col in 0..v.cols() {
                    buf[row * total + off + col] = v.at2(row, col);
                }
            }
            off += v.cols();
        }
        let tape = parts[0].tape.clone();
        let widths_c = widths.clone();
        tape.op(
            Tensor::from_vec(&[r, total], buf),
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(widths_c.len());
                let mut off = 0;
                for w in &widths_c {
                    let part = Tensor::from_fn(&[r, *w], |i| g.at2(i / w, off + i % w));
                    out.push(part);
                    off += w;
                }
                out
            }),
        )
    }

    /// Stack 1D vectors (or equal-shape tensors flattened) as the rows of a matrix.
    pub fn stack_rows(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let w = vals[0].numel();
        for v in &vals {
            assert_eq!(v.numel(), w, "stack_rows: ragged inputs");
        }
        let rows = vals.len();
        let mut buf = Vec::with_capacity(rows * w);
        for v in &vals {
            buf.extend_from_slice(v.data());
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let tape = parts[0].tape.clone();
        tape.op(
            Tensor::from_vec(&[rows, w], buf),
            parts.to_vec(),
            Box::new(move |g| {
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Tensor::from_vec(s, g.data()[i * w..(i + 1) * w].to_vec())
                    })
                    .collect()
            }),
        )
    }

    // -- reductions -------------------------------------------------------------

    pub fn sum_all(&self) -> Var {
        let a = self.value();
        let s: f64 = a.sum_f64();
        let shape = a.shape().to_vec();
        self.tape.op(
            Tensor::scalar(s as f32),
            vec![self],
            Box::new(move |g| vec![Tensor::full(&shape, g.scalar_value())]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// `sum(x * w)` with constant weights; grad is `g * w`.
    pub fn weighted_sum(&self, weights: &Tensor) -> Var {
        let a = self.value();
        same_shape(&a, weights, "weighted_sum");
        let s: f64 = a
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x as f64 * w as f64)
            .sum();
        let w = weights.clone();
        self.tape.op(
            Tensor::scalar(s as f32),
            vec![self],
            Box::new(move |g| {
                let gs = g.scalar_value();
                vec![w.map(|x| x * gs)]
            }),
        )
    }

    // -- row-wise nonlinearities ---------------------------------------------

    pub fn softmax_rows(&self) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2);
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            softmax_slice(&a.data()[row * c..(row + 1) * c], &mut out[row * c..(row + 1) * c]);
        }
        let p = Tensor::from_vec(&[r, c], out);
        let pc = p.clone();
        self.tape.op(
            p,
            vec![self],
            Box::new(move |g| {
                let mut buf = vec![0.0f32; r * c];
                for row in 0..r {
                    let pr = &pc.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let dot: f32 = pr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for i in 0..c {
                        buf[row * c + i] = pr[i] * (gr[i] - dot);
                    }
                }
                vec![Tensor::from_vec(&[r, c], buf)]
            }),
        )
    }

    pub fn log_softmax_rows(&self) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2);
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            let x = &a.data()[row * c..(row + 1) * c];
            let m = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + x.iter().map(|&v| ((v - m) as f64).exp()).sum::<f64>().ln() as f32;
            for i in 0..c {
                out[row * c + i] = x[i] - lse;
            }
        }
        let y = Tensor::from_vec(&[r, c], out);
        let yc = y.clone();
        self.tape.op(
            y,
            vec![self],
            Box::new(move |g| {
                let mut buf = vec![0.0f32; r * c];
                for row in 0..r {
                    let yr = &yc.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let gsum: f32 = gr.iter().sum();
                    for i in 0..c {
                        buf[row * c + i] = gr[i] - yr[i].exp() * gsum;
                    }
                }
                vec![Tensor::from_vec(&[r, c], buf)]
            }),
        )
    }

    /// Row-wise L2 normalization: `y = x / max(||x||, eps)`.
    pub fn l2_normalize_rows(&self) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2);
        let (r, c) = (a.rows(), a.cols());
        let mut norms = vec![0.0f32; r];
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            let x = &a.data()[row * c..(row + 1) * c];
            let n = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt() as f32;
            let n = n.max(1e-12);
            norms[row] = n;
            for i in 0..c {
                out[row * c + i] = x[i] / n;
            }
        }
        let y = Tensor::from_vec(&[r, c], out);
        let yc = y.clone();
        self.tape.op(
            y,
            vec![self],
            Box::new(move |g| {
                let mut buf = vec![0.0f32; r * c];
                for row in 0..r {
                    let yr = &yc.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let dot: f32 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for i in 0..c {
                        buf[row * c + i] = (gr[i] - yr[i] * dot) / norms[row];
                    }
                }
                vec![Tensor::from_vec(&[r, c], buf)]
            }),
        )
    }

    /// LayerNorm over the last dim of a 2D tensor with affine params.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f32) -> Var {
        let x = self.value();
        assert_eq!(x.shape().len(), 2);
        let (r, c) = (x.rows(), x.cols());
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);

        let mut xhat = vec![0.0f32; r * c];
        let mut inv_std = vec![0.0f32; r];
        for row in 0..r {
            let xs = &x.data()[row * c..(row + 1) * c];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[row] = istd as f32;
            for i in 0..c {
                xhat[row * c + i] = ((xs[i] as f64 - mean) * istd) as f32;
            }
        }
        let out = Tensor::from_fn(&[r, c], |i| xhat[i] * gm.data()[i % c] + bt.data()[i % c]);
        let xhat = Tensor::from_vec(&[r, c], xhat);
        let gm_c = gm.clone();
        self.tape.op(
            out,
            vec![self, gamma, beta],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; r * c];
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for row in 0..r {
                    let xh = &xhat.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let mut sum_gxh = 0.0f64;
                    let mut sum_gxh_xh = 0.0f64;
                    for i in 0..c {
                        let gxh = gr[i] * gm_c.data()[i];
                        sum_gxh += gxh as f64;
                        sum_gxh_xh += (gxh * xh[i]) as f64;
                        ggamma[i] += gr[i] * xh[i];
                        gbeta[i] += gr[i];
                    }
                    let m1 = (sum_gxh / c as f64) as f32;
                    let m2 = (sum_gxh_xh / c as f64) as f32;
                    for i in 0..c {
                        let gxh = gr[i] * gm_c.data()[i];
                        gx[row * c + i] = inv_std[row] * (gxh - m1 - xh[i] * m2);
                    }
                }
                vec![
                    Tensor::from_vec(&[r, c], gx),
                    Tensor::from_vec(&[c], ggamma),
                    Tensor::from_vec(&[c], gbeta),
                ]
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_f(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_slice(x: &[f32], out: &mut [f32]) {
    let m = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = ((v - m) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
