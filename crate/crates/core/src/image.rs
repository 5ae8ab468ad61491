//! RGB float images, square crop windows and patch extraction.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value for pixels sampled outside the source frame. It maps to zero
/// after patch normalization.
pub const PAD_VALUE: f32 = 0.5;
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "buffer of {} values does not hold {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blends `rgb` into pixel `(x, y)`.
    pub fn blend_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = self.data[i + c] * (1.0 - alpha) + rgb[c] * alpha;
        }
    }

    fn sample(&self, x: f64, y: f64, c: usize) -> f32 {
        let at = |xi: isize, yi: isize| -> f32 {
            if xi < 0 || yi < 0 || xi as usize >= self.width || yi as usize >= self.height {
                PAD_VALUE
            } else {
                self.data[(yi as usize * self.width + xi as usize) * 3 + c]
            }
        };
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
        let bottom = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resample of a square window into an `out x out` image.
    pub fn crop_resize(&self, window: &CropWindow, out: usize) -> Image {
        let step = window.side / out as f64;
        let mut data = Vec::with_capacity(out * out * 3);
        for v in 0..out {
            let y = window.y0 + (v as f64 + 0.5) * step - 0.5;
            for u in 0..out {
                let x = window.x0 + (u as f64 + 0.5) * step - 0.5;
                for c in 0..3 {
                    data.push(self.sample(x, y, c));
                }
            }
        }
        Image {
            width: out,
            height: out,
            data,
        }
    }

    /// Splits into non-overlapping `p x p` patches, row-major, each flattened
    /// as `(dy, dx, channel)` and normalized to zero mean.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        if p == 0 || self.width % p != 0 || self.height % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}-pixel patches",
                self.width, self.height
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Tensor::zeros(gh * gw, 3 * p * p);
        for i in 0..gh {
            for j in 0..gw {
                let row = out.row_mut(i * gw + j);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let px = self.pixel(j * p + dx, i * p + dy);
                        for v in px {
                            row[k] = (v as f64 - PIXEL_MEAN) / PIXEL_STD;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let v = self.pixel(x as usize, y as usize);
            *px = Rgb(v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Draws an unfilled rectangle outline in pixel coordinates.
    pub fn draw_rect(&mut self, b: &BBox, rgb: [f32; 3], thickness: usize) {
        if !b.is_valid() || self.width == 0 || self.height == 0 {
            return;
        }
        let maxx = self.width as f64 - 1.0;
        let maxy = self.height as f64 - 1.0;
        let x1 = b.x1.round().clamp(0.0, maxx) as usize;
        let x2 = b.x2.round().clamp(0.0, maxx) as usize;
        let y1 = b.y1.round().clamp(0.0, maxy) as usize;
        let y2 = b.y2.round().clamp(0.0, maxy) as usize;
        for t in 0..thickness {
            for x in x1..=x2 {
                for y in [y1 + t, y2.saturating_sub(t)] {
                    if y < self.height {
                        self.set_pixel(x, y, rgb);
                    }
                }
            }
            for y in y1..=y2 {
                for x in [x1 + t, x2.saturating_sub(t)] {
                    if x < self.width {
                        self.set_pixel(x, y, rgb);
                    }
                }
            }
        }
    }
}

/// Square window `[x0, x0 + side) x [y0, y0 + side)` in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    pub const MIN_SIDE: f64 = 4.0;

    /// Window centered on `(cx, cy)` whose side is `factor` times the larger
    /// box dimension.
    pub fn around(cx: f64, cy: f64, w: f64, h: f64, factor: f64) -> Self {
        let side = (factor * w.max(h)).max(Self::MIN_SIDE);
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
        }
    }

    pub fn around_box(b: &BBox, factor: f64) -> Self {
        let (cx, cy) = b.center();
        Self::around(cx, cy, b.width(), b.height(), factor)
    }

    /// Frame-pixel box to normalized crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.x0) / self.side,
            (b.y1 - self.y0) / self.side,
            (b.x2 - self.x0) / self.side,
            (b.y2 - self.y0) / self.side,
        )
    }

    /// Normalized crop box back to frame pixels.
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.x1 * self.side,
            self.y0 + b.y1 * self.side,
            self.x0 + b.x2 * self.side,
            self.y0 + b.y2 * self.side,
        )
    }
}
