//! PNG input/output.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Grid, Rect, Tensor};

/// Loads a PNG as a `3 x h x w` tensor with values in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(c, y as usize, x as usize) = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_image(t: &Tensor) -> RgbImage {
    RgbImage::from_fn(t.w as u32, t.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(t.at(0, y, x)), to_u8(t.at(1, y, x)), to_u8(t.at(2, y, x))])
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    if t.c != 3 {
        return Err(Error::dim("rgb image channels", 3, t.c));
    }
    ensure_parent(path)?;
    rgb_image(t).save(path)?;
    Ok(())
}

/// Saves a grid as 8-bit grayscale, min-max scaled (constant grids map to black).
pub fn save_gray(g: &Grid, path: &Path) -> Result<()> {
    let lo = g.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let img = GrayImage::from_fn(g.w as u32, g.h as u32, |x, y| {
        let v = g.at(y as usize, x as usize);
        let n = if range > 0.0 { (v - lo) / range } else { 0.0 };
        Luma([to_u8(n)])
    });
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Saves the image with one-pixel rectangle outlines drawn over it.
pub fn save_overlay(t: &Tensor, rects: &[Rect], path: &Path) -> Result<()> {
    let mut img = rgb_image(t);
    let color = Rgb([255u8, 255, 255]);
    for r in rects {
        let (x1, y1) = (r.x1.min(t.w) - 1, r.y1.min(t.h) - 1);
        for x in r.x0..=x1 {
            img.put_pixel(x as u32, r.y0 as u32, color);
            img.put_pixel(x as u32, y1 as u32, color);
        }
        for y in r.y0..=y1 {
            img.put_pixel(r.x0 as u32, y as u32, color);
            img.put_pixel(x1 as u32, y as u32, color);
        }
    }
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_rgb_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let data: Vec<f64> = (0..3 * 5 * 7).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(3, 5, 7, data).unwrap();
        save_rgb(&t, &p).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), t);
    }

    #[test]
    fn missing_png_is_missing_artifact() {
        assert!(matches!(
            load_rgb(Path::new("/no/such/file.png")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
