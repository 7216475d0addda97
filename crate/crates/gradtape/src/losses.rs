//! Fused loss ops. Forward passes accumulate in f64 so that scalar loss
//! values agree with direct-formula references to within f32 rounding of the
//! final result; backward passes are analytic.

use crate::tape::Var;
use crate::tensor::Tensor;

fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.rows(), t.cols());
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|&x| x as f64).collect())
        .collect()
}

fn normalize_rows_f64(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut out = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for r in rows {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n > 0.0, "zero-norm embedding: cosine similarity undefined");
        out.push(r.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    (out, norms)
}

/// Backprop `g_hat` (grad wrt the normalized row) to the raw row.
fn denormalize_grad(zhat: &[f64], norm: f64, g_hat: &[f64]) -> Vec<f64> {
    let dot: f64 = zhat.iter().zip(g_hat).map(|(z, g)| z * g).sum();
    zhat.iter()
        .zip(g_hat)
        .map(|(z, g)| (g - z * dot) / norm)
        .collect()
}

impl Var {
    /// InfoNCE over a batch of paired views.
    ///
    /// Rows of `z` are `[2B, d]`, interleaved: row `2i` and `2i+1` are the two
    /// views of sample `i`. Each anchor's positive is its partner view; the
    /// denominator runs over every other row in the batch. With `symmetric`
    /// both views act as anchors, otherwise only the first view of each pair.
    pub fn infonce_pairs(&self, tau: f32, symmetric: bool) -> Var {
        let z = self.value();
        assert_eq!(z.shape().len(), 2, "infonce_pairs expects [2B, d]");
        let n = z.rows();
        assert!(n >= 2 && n % 2 == 0, "infonce_pairs needs an even row count >= 2");
        let tau = tau as f64;
        assert!(tau > 0.0, "temperature must be positive");

        let raw = rows_f64(&z);
        let (zh, norms) = normalize_rows_f64(&raw);
        // Cosine similarity matrix.
        let mut s = vec![vec![0.0f64; n]; n];
        for a in 0..n {
            for k in (a + 1)..n {
                let d: f64 = zh[a].iter().zip(&zh[k]).map(|(x, y)| x * y).sum();
                s[a][k] = d;
                s[k][a] = d;
            }
        }
        let anchors: Vec<usize> = if symmetric {
            (0..n).collect()
        } else {
            (0..n).step_by(2).collect()
        };
        let na = anchors.len() as f64;

        let mut loss = 0.0f64;
        // dL/d l_{ak} stored densely; diagonal stays zero (excluded index).
        let mut gl = vec![vec![0.0f64; n]; n];
        for &a in &anchors {
            let partner = a ^ 1;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                if k != a {
                    m = m.max(s[a][k] / tau);
                }
            }
            let mut denom = 0.0f64;
            for k in 0..n {
                if k != a {
                    denom += ((s[a][k] / tau) - m).exp();
                }
            }
            let lse = m + denom.ln();
            loss += -(s[a][partner] / tau) + lse;
            for k in 0..n {
                if k == a {
                    continue;
                }
                let p = ((s[a][k] / tau) - m).exp() / denom;
                gl[a][k] = (p - if k == partner { 1.0 } else { 0.0 }) / (na * tau);
            }
        }
        loss /= na;

        let d = z.cols();
        let shape = z.shape().to_vec();
        self.tape.op(
            Tensor::scalar(loss as f32),
            vec![self],
            Box::new(move |g| {
                let gs = g.scalar_value() as f64;
                let mut gz = vec![0.0f64; shape[0] * d];
                for a in 0..n {
                    // s[a][k] receives gradient from both anchor roles.
                    let mut ghat = vec![0.0f64; d];
                    for k in 0..n {
                        let w = gl[a][k] + gl[k][a];
                        if w != 0.0 {
                            for j in 0..d {
                                ghat[j] += w * zh[k][j];
                            }
                        }
                    }
                    let graw = denormalize_grad(&zh[a], norms[a], &ghat);
                    for j in 0..d {
                        gz[a * d + j] = gs * graw[j];
                    }
                }
                vec![Tensor::from_vec(&shape, gz.iter().map(|&x| x as f32).collect())]
            }),
        )
    }

    /// Multi-positive image-text contrastive loss.
    ///
    /// `self` holds anchor embeddings `[B, d]`, `texts` holds text embeddings
    /// `[M, d]`, and `positives[B, M]` marks same-style text slots with 1.0
    /// (every row must contain at least one). The denominator runs over all
    /// `M` text slots.
    pub fn text_nce(&self, texts: &Var, positives: &Tensor, tau: f32) -> Var {
        let zi = self.value();
        let zt = texts.value();
        assert_eq!(zi.shape().len(), 2);
        assert_eq!(zt.shape().len(), 2);
        assert_eq!(zi.cols(), zt.cols(), "embedding dims differ");
        let (b, m) = (zi.rows(), zt.rows());
        assert_eq!(positives.shape(), &[b, m], "positive mask shape");
        let tau = tau as f64;
        assert!(tau > 0.0, "temperature must be positive");

        let raw_i = rows_f64(&zi);
        let raw_t = rows_f64(&zt);
        let (zhi, norms_i) = normalize_rows_f64(&raw_i);
        let (zht, norms_t) = normalize_rows_f64(&raw_t);

        let mut loss = 0.0f64;
        let mut gl = vec![vec![0.0f64; m]; b];
        for i in 0..b {
            let l: Vec<f64> = (0..m)
                .map(|k| {
                    zhi[i]
                        .iter()
                        .zip(&zht[k])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        / tau
                })
                .collect();
            let np: f64 = (0..m).map(|k| positives.at2(i, k) as f64).sum();
            assert!(np >= 1.0, "anchor {i} has no positive text slot");
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = l.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + denom.ln();
            let mut pos_sum = 0.0f64;
            for k in 0..m {
                let p = (l[k] - mx).exp() / denom;
                let w = positives.at2(i, k) as f64 / np;
                pos_sum += w * l[k];
                gl[i][k] = (p - w) / (b as f64 * tau);
            }
            loss += -pos_sum + lse;
        }
        loss /= b as f64;

        let d = zi.cols();
        let (bi_shape, bt_shape) = (zi.shape().to_vec(), zt.shape().to_vec());
        self.tape.op(
            Tensor::scalar(loss as f32),
            vec![self, texts],
            Box::new(move |g| {
                let gs = g.scalar_value() as f64;
                let mut gzi = vec![0.0f64; b * d];
                let mut gzt = vec![0.0f64; m * d];
                for i in 0..b {
                    let mut ghat = vec![0.0f64; d];
                    for k in 0..m {
                        if gl[i][k] != 0.0 {
                            for j in 0..d {
                                ghat[j] += gl[i][k] * zht[k][j];
                            }
                        }
                    }
                    let graw = denormalize_grad(&zhi[i], norms_i[i], &ghat);
                    for j in 0..d {
                        gzi[i * d + j] = gs * graw[j];
                    }
                }
                for k in 0..m {
                    let mut ghat = vec![0.0f64; d];
                    for i in 0..b {
                        if gl[i][k] != 0.0 {
                            for j in 0..d {
                                ghat[j] += gl[i][k] * zhi[i][j];
                            }
                        }
                    }
                    let graw = denormalize_grad(&zht[k], norms_t[k], &ghat);
                    for j in 0..d {
                        gzt[k * d + j] = gs * graw[j];
                    }
                }
                vec![
                    Tensor::from_vec(&bi_shape, gzi.iter().map(|&x| x as f32).collect()),
                    Tensor::from_vec(&bt_shape, gzt.iter().map(|&x| x as f32).collect()),
                ]
            }),
        )
    }

    /// Binary focal + dice mask loss between probability maps `[N, P]` and
    /// binary target masks `[N, P]`.
    ///
    /// Focal terms are averaged over every pixel of every included region;
    /// dice is the set-level form `1 - 2*sum(p*m) / (sum(p) + sum(m))`
    /// averaged over included regions (or, with `per_pixel_dice`, a smoothed
    /// per-pixel variant averaged like the focal part). `include` drops
    /// regions (e.g. those whose mask is empty) from both terms.
    pub fn focal_dice(
        &self,
        masks: &Tensor,
        alpha: f32,
        gamma: f32,
        per_pixel_dice: bool,
        include: &[bool],
    ) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "focal_dice expects [N, pixels]");
        assert_eq!(a.shape(), masks.shape(), "map/mask shape mismatch");
        let (n, p) = (a.rows(), a.cols());
        assert_eq!(include.len(), n);
        let n_inc = include.iter().filter(|&&b| b).count();
        assert!(n_inc > 0, "focal_dice: all regions excluded");
        let (alpha, gamma) = (alpha as f64, gamma as f64);
        const EPS: f64 = 1e-6;

        let clamp = |x: f64| x.clamp(EPS, 1.0 - EPS);
        let mut focal = 0.0f64;
        let mut dice = 0.0f64;
        // Per-region sums for the set-level dice gradient.
        let mut sums = vec![(0.0f64, 0.0f64); n]; // (sum p + sum m, sum p*m)
        for r in 0..n {
            if !include[r] {
                continue;
            }
            let mut s = 0.0f64;
            let mut inter = 0.0f64;
            for c in 0..p {
                let pr = clamp(a.at2(r, c) as f64);
                let m = masks.at2(r, c) as f64;
                if m > 0.5 {
                    focal += -alpha * (1.0 - pr).powf(gamma) * pr.ln();
                } else {
                    focal += -(1.0 - alpha) * pr.powf(gamma) * (1.0 - pr).ln();
                }
                s += pr + m;
                inter += pr * m;
                if per_pixel_dice {
                    dice += 1.0 - (2.0 * pr * m + EPS) / (pr + m + EPS);
                }
            }
            sums[r] = (s, inter);
            if !per_pixel_dice {
                dice += 1.0 - 2.0 * inter / s.max(EPS);
            }
        }
        let focal_norm = (n_inc * p) as f64;
        let dice_norm = if per_pixel_dice {
            (n_inc * p) as f64
        } else {
            n_inc as f64
        };
        let loss = focal / focal_norm + dice / dice_norm;

        let masks_c = masks.clone();
        let include_c = include.to_vec();
        let a_c = a.clone();
        self.tape.op(
            Tensor::scalar(loss as f32),
            vec![self],
            Box::new(move |g| {
                let gs = g.scalar_value() as f64;
                let mut ga = vec![0.0f32; n * p];
                for r in 0..n {
                    if !include_c[r] {
                        continue;
                    }
                    let (s, inter) = sums[r];
                    for c in 0..p {
                        let raw = a_c.at2(r, c) as f64;
                        if raw < EPS || raw > 1.0 - EPS {
                            continue; // clamped region: zero slope
                        }
                        let pr = raw;
                        let m = masks_c.at2(r, c) as f64;
                        let dfl = if m > 0.5 {
                            alpha * (gamma * (1.0 - pr).powf(gamma - 1.0) * pr.ln()
                                - (1.0 - pr).powf(gamma) / pr)
                        } else {
                            (1.0 - alpha)
                                * (pr.powf(gamma) / (1.0 - pr)
                                    - gamma * pr.powf(gamma - 1.0) * (1.0 - pr).ln())
                        };
                        let ddice = if per_pixel_dice {
                            let denom = pr + m + EPS;
                            -(2.0 * m * denom - (2.0 * pr * m + EPS)) / (denom * denom)
                        } else {
                            let s2 = s.max(EPS);
                            -2.0 * (m * s2 - inter) / (s2 * s2)
                        };
                        ga[r * p + c] =
                            (gs * (dfl / focal_norm + ddice / dice_norm)) as f32;
                    }
                }
                vec![Tensor::from_vec(&[n, p], ga)]
            }),
        )
    }

    /// Mean squared error against a constant target, f64-accumulated.
    pub fn mse_to(&self, target: &Tensor) -> Var {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "mse_to shape mismatch");
        let n = x.numel() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n;
        let t = target.clone();
        let xc = x.clone();
        self.tape.op(
            Tensor::scalar(loss as f32),
            vec![self],
            Box::new(move |g| {
                let gs = g.scalar_value();
                let coef = 2.0 / n as f32;
                vec![xc.zip_map(&t, |a, b| gs * coef * (a - b))]
            }),
        )
    }
}
