//! Image tensors, PNG round-trips and raster utilities.
//!
//! Images are `[3, H, W]` f32 tensors in `[0,1]`; masks and grayscale maps
//! are `[H, W]`. Pixel `(x, y)` covers the unit square with center
//! `(x + 0.5, y + 0.5)`; continuous coordinates (landmarks, warps) live in
//! that frame.

use std::path::Path;

use gradtape::Tensor;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

pub fn image_dims(img: &Tensor) -> (usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "expected [3,H,W] image, got {s:?}");
    assert_eq!(s[0], 3, "expected 3 channels, got {s:?}");
    (s[1], s[2])
}

pub fn mask_dims(m: &Tensor) -> (usize, usize) {
    let s = m.shape();
    assert_eq!(s.len(), 2, "expected [H,W] mask, got {s:?}");
    (s[0], s[1])
}

pub fn px(img: &Tensor, c: usize, y: usize, x: usize) -> f32 {
    let (h, w) = image_dims(img);
    debug_assert!(y < h && x < w);
    img.data()[(c * h + y) * w + x]
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = image_dims(img);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    quantize(px(img, 0, y, x)),
                    quantize(px(img, 1, y, x)),
                    quantize(px(img, 2, y, x)),
                ]),
            );
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * h + y) * w + x] = p.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

pub fn save_gray(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = mask_dims(map);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([quantize(map.data()[y * w + x])]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = (0..h * w)
        .map(|i| img.as_raw()[i] as f32 / 255.0)
        .collect();
    Ok(Tensor::from_vec(&[h, w], data))
}

/// Load a mask PNG and re-binarize at 0.5.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

// -- sampling and resizing ----------------------------------------------------

/// Bilinear sample one channel plane at a continuous position, clamping to
/// the image border.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    // Convert from continuous coords to sample-space where integer i is the
    // center of pixel i.
    let sx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let sy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Warp any `[C,H,W]` or `[H,W]` tensor through a per-pixel source lookup.
pub fn warp_with(src: &Tensor, out_h: usize, out_w: usize, lookup: impl Fn(f32, f32) -> (f32, f32)) -> Tensor {
    let s = src.shape().to_vec();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        2 => (1, s[0], s[1]),
        _ => panic!("warp_with: unsupported shape {s:?}"),
    };
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sx, sy) = lookup(ox as f32 + 0.5, oy as f32 + 0.5);
            for ch in 0..c {
                let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
                out[(ch * out_h + oy) * out_w + ox] = sample_bilinear(plane, h, w, sx, sy);
            }
        }
    }
    if s.len() == 3 {
        Tensor::from_vec(&[c, out_h, out_w], out)
    } else {
        Tensor::from_vec(&[out_h, out_w], out)
    }
}

/// Area-average downsample of a `[H,W]` map to `(oh, ow)`; used to bring
/// masks to attention-map resolution.
pub fn area_downsample(map: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = mask_dims(map);
    assert!(h % oh == 0 && w % ow == 0, "area_downsample needs integer factor");
    let (fy, fx) = (h / oh, w / ow);
    Tensor::from_fn(&[oh, ow], |i| {
        let (oy, ox) = (i / ow, i % ow);
        let mut s = 0.0f32;
        for dy in 0..fy {
            for dx in 0..fx {
                s += map.data()[(oy * fy + dy) * w + ox * fx + dx];
            }
        }
        s / (fy * fx) as f32
    })
}

pub fn binarize(map: &Tensor, thresh: f32) -> Tensor {
    map.map(|v| if v >= thresh { 1.0 } else { 0.0 })
}

/// Nearest-neighbour upscale of `[H,W]` by an integer factor.
pub fn upscale_nearest(map: &Tensor, factor: usize) -> Tensor {
    let (h, w) = mask_dims(map);
    Tensor::from_fn(&[h * factor, w * factor], |i| {
        let (y, x) = (i / (w * factor), i % (w * factor));
        map.data()[(y / factor) * w + x / factor]
    })
}

// -- mask morphology -----------------------------------------------------------

/// Chebyshev dilation of a binary mask by `r` pixels.
pub fn dilate(mask: &Tensor, r: usize) -> Tensor {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask_dims(mask);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let y0 = y.saturating_sub(r);
        let x0 = x.saturating_sub(r);
        for yy in y0..=(y + r).min(h - 1) {
            for xx in x0..=(x + r).min(w - 1) {
                if mask.data()[yy * w + xx] > 0.5 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

/// Normalized box blur over a `(2r+1)^2` window (what feathering uses):
/// 1 where the window lies fully inside the mask, 0 fully outside, a convex
/// ramp in between. Out-of-bounds window cells count as mask value 0.
pub fn box_feather(mask: &Tensor, r: usize) -> Tensor {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask_dims(mask);
    let win = ((2 * r + 1) * (2 * r + 1)) as f32;
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let mut s = 0.0f32;
        for dy in -(r as isize)..=(r as isize) {
            for dx in -(r as isize)..=(r as isize) {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    s += mask.data()[yy as usize * w + xx as usize];
                }
            }
        }
        s / win
    })
}

// -- misc ----------------------------------------------------------------------

pub fn to_gray(img: &Tensor) -> Tensor {
    let (h, w) = image_dims(img);
    Tensor::from_fn(&[h, w], |i| {
        (img.data()[i] + img.data()[h * w + i] + img.data()[2 * h * w + i]) / 3.0
    })
}

/// Sobel gradient magnitude, scaled into [0,1]. Geometry-only signature of an
/// image, used as the structure proxy for generated outputs.
pub fn sobel_edges(gray: &Tensor) -> Tensor {
    let (h, w) = mask_dims(gray);
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray.data()[yy * w + xx]
    };
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1);
        ((gx * gx + gy * gy).sqrt() / 8.0).min(1.0)
    })
}

/// Mean color over a mask, per channel. Errors on an empty mask.
pub fn mean_color(img: &Tensor, mask: &Tensor) -> Result<[f32; 3]> {
    let (h, w) = image_dims(img);
    let (mh, mw) = mask_dims(mask);
    if (h, w) != (mh, mw) {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} vs mask {mh}x{mw}"
        )));
    }
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for i in 0..h * w {
        if mask.data()[i] > 0.5 {
            count += 1;
            for c in 0..3 {
                acc[c] += img.data()[c * h * w + i] as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("mean_color over empty mask".into()));
    }
    Ok([
        (acc[0] / count as f64) as f32,
        (acc[1] / count as f64) as f32,
        (acc[2] / count as f64) as f32,
    ])
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64
}

pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / m).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 256) as f32 / 255.0);
        let dir = std::env::temp_dir().join("makeup_imageio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.png");
        save_rgb(&img, &p).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn feather_zero_is_identity_and_ramps_inside() {
        let mask = Tensor::from_fn(&[9, 9], |i| {
            let (y, x) = (i / 9, i % 9);
            if (2..7).contains(&y) && (2..7).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(box_feather(&mask, 0).data(), mask.data());
        let f = box_feather(&mask, 1);
        assert_eq!(f.data()[4 * 9 + 4], 1.0); // deep inside
        assert_eq!(f.data()[0], 0.0); // far outside
        let edge = f.data()[2 * 9 + 4];
        assert!(edge > 0.0 && edge < 1.0);
    }

    #[test]
    fn dilate_grows_by_chebyshev_radius() {
        let mask = Tensor::from_fn(&[7, 7], |i| if i == 3 * 7 + 3 { 1.0 } else { 0.0 });
        let d = dilate(&mask, 2);
        assert_eq!(d.data()[1 * 7 + 1], 1.0);
        assert_eq!(d.data()[0], 0.0);
    }

    #[test]
    fn bilinear_integral_translation_is_exact() {
        let img = Tensor::from_fn(&[5, 5], |i| i as f32);
        let v = sample_bilinear(img.data(), 5, 5, 3.5, 2.5); // center of (3,2)
        assert_eq!(v, (2 * 5 + 3) as f32);
    }
}
