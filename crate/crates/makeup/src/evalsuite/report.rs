//! Report rendering: a per-pair image grid (source | reference | output |
//! attention maps) and a summary CSV over an evaluation directory.

use std::fs;
use std::path::Path;

use gradtape::Tensor;

use crate::error::{Error, Result};
use crate::imageio::{image_dims, load_gray, load_rgb, save_rgb};
use crate::synthface::REGION_NAMES;

fn gray_to_rgb(g: &Tensor) -> Tensor {
    let (h, w) = (g.shape()[0], g.shape()[1]);
    Tensor::from_fn(&[3, h, w], |i| g.data()[i % (h * w)])
}

/// Horizontally tile same-height RGB images with a 2px separator.
pub fn tile_row(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty image row".into()));
    }
    let (h, _) = image_dims(&images[0]);
    let sep = 2usize;
    let total_w: usize =
        images.iter().map(|i| image_dims(i).1).sum::<usize>() + sep * (images.len() - 1);
    let mut out = Tensor::ones(&[3, h, total_w]);
    let n = h * total_w;
    let data = out.data_mut();
    let mut x0 = 0usize;
    for img in images {
        let (ih, iw) = image_dims(img);
        if ih != h {
            return Err(Error::ShapeMismatch("row images must share height".into()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..iw {
                    data[c * n + y * total_w + x0 + x] = img.data()[(c * ih + y) * iw + x];
                }
            }
        }
        x0 += iw + sep;
    }
    Ok(out)
}

/// Vertically stack same-width rows with a 2px separator.
pub fn stack_rows_img(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let (_, w) = image_dims(&rows[0]);
    let sep = 2usize;
    let total_h: usize =
        rows.iter().map(|r| image_dims(r).0).sum::<usize>() + sep * (rows.len() - 1);
    let mut out = Tensor::ones(&[3, total_h, w]);
    let n = total_h * w;
    let data = out.data_mut();
    let mut y0 = 0usize;
    for row in rows {
        let (rh, rw) = image_dims(row);
        if rw != w {
            return Err(Error::ShapeMismatch("grid rows must share width".into()));
        }
        for c in 0..3 {
            for y in 0..rh {
                for x in 0..w {
                    data[c * n + (y0 + y) * w + x] = row.data()[(c * rh + y) * rw + x];
                }
            }
        }
        y0 += rh + sep;
    }
    Ok(out)
}

/// Build `grid.png` and `summary.csv` from an evaluation directory produced
/// by the eval loop. Returns the number of pair rows rendered.
pub fn render_report(eval_dir: &Path, out_dir: &Path) -> Result<usize> {
    let csv = fs::read_to_string(eval_dir.join("eval.csv"))
        .map_err(|_| Error::MissingData(format!("{}/eval.csv (run eval first)", eval_dir.display())))?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MissingData("empty eval.csv".into()))?;
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();

    fs::create_dir_all(out_dir)?;

    // grid rows in csv order
    let mut grid_rows = Vec::new();
    let mut pair_ids = Vec::new();
    for row in &rows {
        let pair_id: u32 = row
            .split(',')
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::InvalidInput("bad pair id in eval.csv".into()))?;
        pair_ids.push(pair_id);
        let mut images = vec![
            load_rgb(&eval_dir.join(format!("pair_{pair_id:04}_source.png")))?,
            load_rgb(&eval_dir.join(format!("pair_{pair_id:04}_reference.png")))?,
            load_rgb(&eval_dir.join(format!("pair_{pair_id:04}_output.png")))?,
        ];
        for r in REGION_NAMES {
            images.push(gray_to_rgb(&load_gray(
                &eval_dir.join(format!("pair_{pair_id:04}_attn_{r}.png")),
            )?));
        }
        grid_rows.push(tile_row(&images)?);
    }
    let grid = stack_rows_img(&grid_rows)?;
    save_rgb(&grid, &out_dir.join("grid.png"))?;

    // summary: mean of each numeric column
    let cols: Vec<&str> = header.split(',').collect();
    let mut sums = vec![0.0f64; cols.len()];
    for row in &rows {
        for (i, v) in row.split(',').enumerate() {
            sums[i] += v.parse::<f64>().unwrap_or(0.0);
        }
    }
    let mut out = String::from("metric,mean\n");
    for (i, c) in cols.iter().enumerate().skip(3) {
        out.push_str(&format!("{c},{:.8}\n", sums[i] / rows.len() as f64));
    }
    out.push_str(&format!("rows,{}\n", rows.len()));
    fs::write(out_dir.join("summary.csv"), out)?;
    Ok(rows.len())
}
