//! Dense channel-major tensors, single-channel grids and pixel rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `c x h x w` array of `f64` stored channel-major (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::dim("tensor data", c * h * w, data.len()));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![value; c * h * w],
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel vector at spatial position `(y, x)`.
    pub fn channel_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.at(c, y, x)).collect()
    }

    /// Global average pooling over the spatial dimensions.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        (0..self.c)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }

    /// Appends the planes of `other` after the planes of `self`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::dim("concat spatial size", self.h * self.w, other.h * other.w));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// Top-left `h x w` window.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        self.crop(Rect::new(0, 0, w, h).expect("non-empty crop"))
    }

    /// Copies the pixels inside `rect` (half-open) into a new tensor.
    pub fn crop(&self, rect: Rect) -> Tensor {
        let (h, w) = (rect.height(), rect.width());
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..h {
                let src = (c * self.h + rect.y0 + y) * self.w + rect.x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres and edge clamping. This is the
    /// only resampling kernel used anywhere in the crate.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let ys = sample_positions(self.h, out_h);
        let xs = sample_positions(self.w, out_w);
        let mut out = Tensor::zeros(self.c, out_h, out_w);
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * self.w + x0] * (1.0 - fx) + src[y0 * self.w + x1] * fx;
                    let bot = src[y1 * self.w + x0] * (1.0 - fx) + src[y1 * self.w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Resize to a fixed height, preserving aspect ratio (width rounded to
    /// the nearest pixel, at least 1).
    pub fn resize_to_height(&self, height: usize) -> Tensor {
        let width = ((self.w as f64) * (height as f64) / (self.h as f64)).round().max(1.0) as usize;
        self.resize_bilinear(height, width)
    }
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Single-channel real grid (similarity maps, density maps, masks).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim("grid data", h * w, data.len()));
        }
        Ok(Grid { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor {
            c: 1,
            h: self.h,
            w: self.w,
            data: self.data,
        }
    }
}

/// Integer pixel rectangle, half-open: covers `x0..x1` by `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidArgument(format!(
                "empty rectangle ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.x1 <= w && self.y1 <= h
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_window() {
        let t = Tensor::from_vec(1, 3, 3, (0..9).map(f64::from).collect()).unwrap();
        let c = t.crop(Rect::new(1, 1, 3, 3).unwrap());
        assert_eq!(c.data, vec![4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let t = Tensor::filled(2, 5, 7, 0.25);
        let r = t.resize_bilinear(11, 3);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_identity_and_aspect() {
        let t = Tensor::from_vec(1, 2, 4, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(t.resize_bilinear(2, 4), t);
        let r = t.resize_to_height(4);
        assert_eq!((r.h, r.w), (4, 8));
    }

    #[test]
    fn upsample_interpolates_between_pixels() {
        let t = Tensor::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let r = t.resize_bilinear(1, 4);
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rect_rules() {
        assert!(Rect::new(2, 2, 2, 5).is_err());
        let a = Rect::new(0, 0, 2, 2).unwrap();
        let b = Rect::new(1, 0, 3, 2).unwrap();
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(a.iou(&Rect::new(5, 5, 6, 6).unwrap()), 0.0);
    }

    #[test]
    fn spatial_mean_of_two_by_two() {
        let t = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.spatial_mean(), vec![2.5]);
    }
}
