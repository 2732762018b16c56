//! Static PNG exports: input overlays with boxes and normalized CAM heatmaps.

use std::path::Path;

use crate::cam::{BBox, Cam, Interval};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// 1- or 3-channel tensor with values in [0, 1] (clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("can only render 1 or 3 channels, got {c}")));
        }
        let mut img = Self::new(w, h);
        for i in 0..h * w {
            for k in 0..3 {
                let ch = if c == 1 { 0 } else { k };
                img.data[i * 3 + k] = to_u8(t.data()[ch * h * w + i]);
            }
        }
        Ok(img)
    }

    /// Nearest-neighbour rendering of the CAM over an `h x w` input,
    /// min-max normalized to gray.
    pub fn heatmap(cam: &Cam, h: usize, w: usize) -> Self {
        let gray = cam.to_gray();
        let (ch, cw) = cam.extent();
        let mut img = Self::new(w, h);
        for y in 0..h {
            let cy = ((y as f64 / cam.scale_y) as usize).min(ch - 1);
            for x in 0..w {
                let cx = ((x as f64 / cam.scale_x) as usize).min(cw - 1);
                let g = gray[cy * cw + cx];
                img.data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[g, g, g]);
            }
        }
        img
    }

    pub fn upscale(&self, k: usize) -> Self {
        let k = k.max(1);
        let mut out = Self::new(self.width * k, self.height * k);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = ((y / k) * self.width + x / k) * 3;
                let dst = (y * out.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    fn put(&mut self, x: i64, y: i64, colour: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&colour);
        }
    }

    /// One-pixel outline of a box given in unscaled input coordinates.
    pub fn draw_box(&mut self, b: &BBox, scale: usize, colour: [u8; 3]) {
        let s = scale.max(1) as f64;
        let x0 = (b.x0 * s).floor() as i64;
        let y0 = (b.y0 * s).floor() as i64;
        let x1 = (b.x1 * s).ceil() as i64 - 1;
        let y1 = (b.y1 * s).ceil() as i64 - 1;
        for x in x0..=x1 {
            self.put(x, y0, colour);
            self.put(x, y1, colour);
        }
        for y in y0..=y1 {
            self.put(x0, y, colour);
            self.put(x1, y, colour);
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, colour: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.put(x as i64, y as i64, colour);
            }
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Input image with the predicted box (green) and ground-truth boxes (red).
pub fn overlay(image: &Tensor, predicted: Option<&BBox>, gt: &[BBox], scale: usize) -> Result<RgbImage> {
    let mut img = RgbImage::from_tensor(image)?.upscale(scale);
    for g in gt {
        img.draw_box(g, scale, RED);
    }
    if let Some(p) = predicted {
        img.draw_box(p, scale, GREEN);
    }
    Ok(img)
}

/// A 1-D CAM as a gray band with predicted (green) and ground-truth (red)
/// interval bars underneath.
pub fn sequence_strip(cam: &Cam, predicted: &[Interval], gt: &[Interval], band: usize) -> RgbImage {
    let (_, t) = cam.extent();
    let len = (t as f64 * cam.scale_x).round() as usize;
    let band = band.max(1);
    let mut img = RgbImage::heatmap(cam, 1, len);
    let row = img.data.clone();
    img = RgbImage::new(len, 3 * band);
    for y in 0..band {
        img.data[y * len * 3..(y + 1) * len * 3].copy_from_slice(&row);
    }
    for i in predicted {
        img.fill_rect(i.start as usize, band, i.end as usize, 2 * band, GREEN);
    }
    for i in gt {
        img.fill_rect(i.start as usize, 2 * band, i.end as usize, 3 * band, RED);
    }
    img
}
