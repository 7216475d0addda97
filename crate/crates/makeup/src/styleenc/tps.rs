//! Thin-plate-spline warping from control-point correspondences.

use gradtape::Tensor;

use crate::error::{Error, Result};
use crate::imageio::warp_with;

/// Radial kernel `U(r) = r^2 log(r^2)` with `U(0) = 0`.
fn kernel(r2: f64) -> f64 {
    if r2 <= 1e-24 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// A fitted thin-plate spline mapping control nodes to scalar values, one
/// instance per output coordinate.
struct TpsCoord {
    nodes: Vec<(f64, f64)>,
    w: Vec<f64>,
    affine: [f64; 3], // a0 + a1 x + a2 y
}

impl TpsCoord {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (i, &(nx, ny)) in self.nodes.iter().enumerate() {
            let r2 = (x - nx).powi(2) + (y - ny).powi(2);
            v += self.w[i] * kernel(r2);
        }
        v
    }
}

/// Full 2D TPS map: nodes -> (x, y) values.
pub struct TpsMap {
    fx: TpsCoord,
    fy: TpsCoord,
}

impl TpsMap {
    /// Fit the interpolating TPS with `f(nodes[i]) == values[i]`, solving the
    /// standard `(K P; P^T 0)` system per coordinate.
    pub fn fit(nodes: &[(f32, f32)], values: &[(f32, f32)]) -> Result<TpsMap> {
        let n = nodes.len();
        if n < 3 {
            return Err(Error::Degenerate(format!(
                "thin-plate spline needs at least 3 control points, got {n}"
            )));
        }
        if values.len() != n {
            return Err(Error::ShapeMismatch("control point counts differ".into()));
        }
        let nodes: Vec<(f64, f64)> = nodes.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let dim = n + 3;
        let mut a = vec![vec![0.0f64; dim]; dim];
        for i in 0..n {
            for j in 0..n {
                let r2 = (nodes[i].0 - nodes[j].0).powi(2) + (nodes[i].1 - nodes[j].1).powi(2);
                a[i][j] = kernel(r2);
            }
            a[i][n] = 1.0;
            a[i][n + 1] = nodes[i].0;
            a[i][n + 2] = nodes[i].1;
            a[n][i] = 1.0;
            a[n + 1][i] = nodes[i].0;
            a[n + 2][i] = nodes[i].1;
        }
        let solve_coord = |rhs: Vec<f64>| -> Result<TpsCoord> {
            let sol = solve_dense(a.clone(), rhs).ok_or_else(|| {
                Error::Degenerate("singular thin-plate spline system (collinear controls?)".into())
            })?;
            Ok(TpsCoord {
                nodes: nodes.clone(),
                w: sol[..n].to_vec(),
                affine: [sol[n], sol[n + 1], sol[n + 2]],
            })
        };
        let mut bx = vec![0.0f64; dim];
        let mut by = vec![0.0f64; dim];
        for i in 0..n {
            bx[i] = values[i].0 as f64;
            by[i] = values[i].1 as f64;
        }
        Ok(TpsMap {
            fx: solve_coord(bx)?,
            fy: solve_coord(by)?,
        })
    }

    pub fn eval(&self, x: f32, y: f32) -> (f32, f32) {
        (
            self.fx.eval(x as f64, y as f64) as f32,
            self.fy.eval(x as f64, y as f64) as f32,
        )
    }
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in (r + 1)..n {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Warp an image so that content at `control_src[i]` appears at
/// `control_dst[i]`: the sampler solves the TPS with nodes at the
/// destinations and values at the sources, then inverse-maps every output
/// pixel. Zero displacement short-circuits to a bit-exact copy.
pub fn tps_warp(image: &Tensor, control_src: &[(f32, f32)], control_dst: &[(f32, f32)]) -> Result<Tensor> {
    if control_src == control_dst {
        return Ok(image.clone());
    }
    let map = TpsMap::fit(control_dst, control_src)?;
    let s = image.shape().to_vec();
    let (h, w) = if s.len() == 3 { (s[1], s[2]) } else { (s[0], s[1]) };
    Ok(warp_with(image, h, w, |x, y| map.eval(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3() -> Vec<(f32, f32)> {
        let mut pts = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                pts.push((8.0 + 24.0 * x as f32, 8.0 + 24.0 * y as f32));
            }
        }
        pts
    }

    #[test]
    fn zero_displacement_is_bit_exact_identity() {
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 97) as f32 / 97.0);
        let pts = grid3();
        let out = tps_warp(&img, &pts, &pts).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn uniform_translation_is_subsumed_by_the_affine_part() {
        // All controls translated by (2, 0): the fitted map must be an exact
        // translation, so a delta pixel moves exactly.
        let mut img = Tensor::zeros(&[1, 64, 64]);
        img.data_mut()[20 * 64 + 20] = 1.0;
        let src = grid3();
        let dst: Vec<(f32, f32)> = src.iter().map(|&(x, y)| (x + 2.0, y)).collect();
        let out = tps_warp(&img, &src, &dst).unwrap();
        assert!((out.data()[20 * 64 + 22] - 1.0).abs() < 1e-4);
        assert!(out.data()[20 * 64 + 20].abs() < 1e-4);
    }

    #[test]
    fn fitted_map_is_exact_at_control_points() {
        let src = grid3();
        let mut rng = gradtape::nn::SplitMix64::new(5);
        let dst: Vec<(f32, f32)> = src
            .iter()
            .map(|&(x, y)| (x + rng.range(-2.0, 2.0), y + rng.range(-2.0, 2.0)))
            .collect();
        let map = TpsMap::fit(&dst, &src).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (ex, ey) = map.eval(d.0, d.1);
            assert!(
                (ex - s.0).abs() < 1e-3 && (ey - s.1).abs() < 1e-3,
                "control point maps to ({ex},{ey}), want ({},{})",
                s.0,
                s.1
            );
        }
    }

    #[test]
    fn collinear_controls_are_rejected() {
        let src = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)];
        let dst = [(1.0, 1.5), (2.0, 2.5), (3.0, 3.5), (4.0, 4.5)];
        assert!(TpsMap::fit(&src, &dst).is_err());
    }
}
