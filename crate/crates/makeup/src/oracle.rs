//! Independent reference implementations used by the test and acceptance
//! suites. Everything here is written as direct f64 formula evaluation with
//! plain loops, deliberately sharing no code with the production path it
//! checks. Not used by the pipeline itself.

/// Cosine similarity of two raw vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Paired-view InfoNCE. `z` holds `2B` rows, interleaved views
/// `(sample 0 view 1, sample 0 view 2, sample 1 view 1, ...)`. The positive
/// of an anchor is its partner view; the denominator runs over every other
/// row. Anchors are all rows when `symmetric`, otherwise the first views.
pub fn ssl_loss(z: &[Vec<f64>], tau: f64, symmetric: bool) -> f64 {
    let n = z.len();
    assert!(n >= 2 && n % 2 == 0);
    let anchors: Vec<usize> = if symmetric {
        (0..n).collect()
    } else {
        (0..n).step_by(2).collect()
    };
    let mut total = 0.0;
    for &a in &anchors {
        let partner = a ^ 1;
        let pos = (cosine(&z[a], &z[partner]) / tau).exp();
        let denom: f64 = (0..n)
            .filter(|&k| k != a)
            .map(|k| (cosine(&z[a], &z[k]) / tau).exp())
            .sum();
        total += -(pos / denom).ln();
    }
    total / anchors.len() as f64
}

/// Multi-positive image-text contrastive loss. `positives[i]` lists the text
/// slots with the same style as anchor `i` (the anchor's own sample
/// included); the denominator runs over every text slot.
pub fn text_loss(anchors: &[Vec<f64>], texts: &[Vec<f64>], positives: &[Vec<usize>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, anchor) in anchors.iter().enumerate() {
        let denom: f64 = texts
            .iter()
            .map(|t| (cosine(anchor, t) / tau).exp())
            .sum();
        let p = &positives[i];
        assert!(!p.is_empty());
        let mut s = 0.0;
        for &k in p {
            s += ((cosine(anchor, &texts[k]) / tau).exp() / denom).ln();
        }
        total += -s / p.len() as f64;
    }
    total / anchors.len() as f64
}

/// Per-pixel binary focal term.
pub fn focal_term(p: f64, m: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    if m > 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Set-level dice for one region.
pub fn dice_term(map: &[f64], mask: &[f64]) -> f64 {
    let inter: f64 = map.iter().zip(mask).map(|(p, m)| p * m).sum();
    let s: f64 = map.iter().sum::<f64>() + mask.iter().sum::<f64>();
    1.0 - 2.0 * inter / s.max(1e-6)
}

/// Focal + dice attention-alignment loss over `n` region maps of `pix`
/// pixels each. Mirrors the production reduction: focal averaged over all
/// included pixels, set-level dice averaged over included regions.
pub fn attention_loss(
    maps: &[Vec<f64>],
    masks: &[Vec<f64>],
    alpha: f64,
    gamma: f64,
    per_pixel_dice: bool,
    include: &[bool],
) -> f64 {
    let n_inc = include.iter().filter(|&&b| b).count();
    let pix = maps[0].len();
    let mut focal = 0.0;
    let mut dice = 0.0;
    for r in 0..maps.len() {
        if !include[r] {
            continue;
        }
        for c in 0..pix {
            focal += focal_term(maps[r][c], masks[r][c], alpha, gamma);
            if per_pixel_dice {
                let (p, m) = (maps[r][c].clamp(1e-6, 1.0 - 1e-6), masks[r][c]);
                dice += 1.0 - (2.0 * p * m + 1e-6) / (p + m + 1e-6);
            }
        }
        if !per_pixel_dice {
            let clamped: Vec<f64> = maps[r].iter().map(|&p| p.clamp(1e-6, 1.0 - 1e-6)).collect();
            dice += dice_term(&clamped, &masks[r]);
        }
    }
    let dice_norm = if per_pixel_dice {
        (n_inc * pix) as f64
    } else {
        n_inc as f64
    };
    focal / (n_inc * pix) as f64 + dice / dice_norm
}

/// Mean squared error.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Single-window SSIM with the canonical constants (L = 1).
pub fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Central finite difference of a scalar function at `x[i]`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssl_oracle_matches_the_closed_form_basis_case() {
        // Two samples, views collapsed onto orthogonal basis vectors:
        // per-anchor loss is log((e + 2) / e).
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let z = vec![e1.clone(), e1, e2.clone(), e2];
        let want = ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
        let got = ssl_loss(&z, 1.0, true);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let got = ssl_loss(&z, 1.0, false);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_oracle_matches_the_half_case() {
        // p = 0.5 on a positive pixel with alpha 0.25, gamma 2:
        // 0.25 * 0.25 * ln 2.
        let got = focal_term(0.5, 1.0, 0.25, 2.0);
        let want = 0.25 * 0.25 * 2.0f64.ln();
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn dice_oracle_extremes() {
        let m = vec![1.0, 1.0, 0.0, 0.0];
        assert!(dice_term(&m, &m).abs() < 1e-9);
        let disjoint = vec![0.0, 0.0, 1.0, 1.0];
        assert!((dice_term(&m, &disjoint) - 1.0).abs() < 1e-6);
    }
}
