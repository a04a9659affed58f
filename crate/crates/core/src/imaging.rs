//! Raster images with pixel values normalised to `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major image with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::precondition("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::precondition(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::precondition(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Image with every sample set to `value` (clamped to `[0, 1]`).
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value.clamp(0.0, 1.0); width * height * channels],
        )
    }

    /// Builds an image from a per-pixel function; values are clamped.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Box covering the whole image.
    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Decodes a PNG or JPEG byte stream.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        decode_image(bytes)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_image(&bytes)
    }

    /// Encodes as an 8-bit PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = match self.channels {
            1 => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, bytes).expect("buffer size checked"),
            ),
            _ => DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, bytes).expect("buffer size checked"),
            ),
        };
        let mut out = std::io::Cursor::new(Vec::new());
        dynamic
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.w > 0.0 && self.h > 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union; 0 for degenerate boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Intersection over the smaller of the two areas.
    pub fn min_area_overlap(&self, other: &BoundingBox) -> f64 {
        let denom = self.area().min(other.area());
        if denom <= 0.0 {
            0.0
        } else {
            (self.intersection_area(other) / denom).clamp(0.0, 1.0)
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        const SLACK: f64 = 1e-9;
        self.is_valid()
            && self.right() <= width as f64 + SLACK
            && self.bottom() <= height as f64 + SLACK
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: usize, height: usize) -> BoundingBox {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = self.right().clamp(0.0, width as f64);
        let y1 = self.bottom().clamp(0.0, height as f64);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}x{}]", self.x, self.y, self.w, self.h)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let dynamic = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    match dynamic {
        DynamicImage::ImageLuma8(img) => {
            let px = img
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect();
            ImageBuffer::new(w, h, 1, px)
        }
        DynamicImage::ImageLuma16(img) => {
            let px = img
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect();
            ImageBuffer::new(w, h, 1, px)
        }
        DynamicImage::ImageRgb8(img) => {
            let px = img
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect();
            ImageBuffer::new(w, h, 3, px)
        }
        DynamicImage::ImageRgb16(img) => {
            let px = img
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect();
            ImageBuffer::new(w, h, 3, px)
        }
        other => Err(Error::Format(format!(
            "{:?} ({} channels)",
            other.color(),
            other.color().channel_count()
        ))),
    }
}

/// Replicates a single-channel (NIR) image into three identical channels.
pub fn nir_to_three_channel(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 1 {
        return Err(Error::precondition(format!(
            "channel cloning expects 1 channel, got {}",
            img.channels
        )));
    }
    let pixels = img.pixels.iter().flat_map(|&v| [v, v, v]).collect();
    ImageBuffer::new(img.width, img.height, 3, pixels)
}

/// Luminance with weights 0.299 / 0.587 / 0.114.
///
/// Written as `r + 0.587 (g - r) + 0.114 (b - r)` so that gray inputs
/// (`r == g == b`) come back bit-exact.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            (r + 0.587 * (g - r) + 0.114 * (b - r)).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
    }
}

/// Copies the pixels under `bx`. Coordinates are rounded to whole pixels.
pub fn crop(img: &ImageBuffer, bx: &BoundingBox) -> Result<ImageBuffer> {
    let x0 = bx.x.round();
    let y0 = bx.y.round();
    let x1 = bx.right().round();
    let y1 = bx.bottom().round();
    if x0 < 0.0
        || y0 < 0.0
        || x1 > img.width as f64
        || y1 > img.height as f64
        || x1 <= x0
        || y1 <= y0
    {
        return Err(Error::Bounds(bx.to_string(), img.width, img.height));
    }
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    let ch = img.channels;
    let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0) * ch);
    for y in y0..y1 {
        let row = (y * img.width + x0) * ch;
        pixels.extend_from_slice(&img.pixels[row..row + (x1 - x0) * ch]);
    }
    Ok(ImageBuffer {
        width: x1 - x0,
        height: y1 - y0,
        channels: ch,
        pixels,
    })
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::precondition("resize target must be non-empty"));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let ch = img.channels;
    let xs = sample_positions(img.width, width);
    let ys = sample_positions(img.height, height);
    let mut pixels = Vec::with_capacity(width * height * ch);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..ch {
                let p00 = img.get(x0, y0, c);
                let p10 = img.get(x1, y0, c);
                let p01 = img.get(x0, y1, c);
                let p11 = img.get(x1, y1, c);
                let top = p00 + (p10 - p00) * tx;
                let bottom = p01 + (p11 - p01) * tx;
                pixels.push((top + (bottom - top) * ty).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageBuffer {
        width,
        height,
        channels: ch,
        pixels,
    })
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Resizes to `height` rows, preserving the aspect ratio.
pub fn resize_to_height(img: &ImageBuffer, height: usize) -> Result<ImageBuffer> {
    let width = ((img.width as f64 * height as f64 / img.height as f64).round() as usize).max(1);
    resize(img, width, height)
}
