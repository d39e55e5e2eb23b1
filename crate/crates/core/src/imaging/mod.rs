//! Image representation, codecs, geometric transforms and patch extraction.
//!
//! Pixels are stored as `f64` in `[0, 1]`, row-major and channel-interleaved.
//! Quantization only happens when an image is encoded.

mod codec;
mod transform;

pub use codec::{decode_image, encode_image, read_image, write_image, ImageFormat};
pub use transform::{
    apply_augmentation, resize_bilinear, rotate, AugmentSpec, FlipMode, ResolvedAugment,
    Rotation, ZoomCrop, MAX_ROTATION_DEG,
};

use crate::error::{Error, Result};

/// Dense image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, checking the buffer length, channel count and value range.
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "buffer holds {} values, expected {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Like [`Image::new`] but clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut pixels {
            *v = clamp_unit(*v);
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[self.index(x, y, c)]
    }

    /// Writes one sample, clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.pixels[i] = clamp_unit(v);
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Copies `values` (row-major, channel-interleaved, `rect.w * rect.h * channels`
    /// long) into `rect`, clamping to `[0, 1]`.
    pub fn write_region(&mut self, rect: Rect, values: &[f64]) -> Result<()> {
        self.check_rect(rect)?;
        let c = self.channels;
        if values.len() != rect.w * rect.h * c {
            return Err(Error::InvalidImage(format!(
                "region buffer holds {} values, expected {}",
                values.len(),
                rect.w * rect.h * c
            )));
        }
        let row_len = rect.w * c;
        for (ry, src) in values.chunks_exact(row_len).enumerate() {
            let start = self.index(rect.x, rect.y + ry, 0);
            for (dst, &v) in self.pixels[start..start + row_len].iter_mut().zip(src) {
                *dst = clamp_unit(v);
            }
        }
        Ok(())
    }

    pub fn check_rect(&self, rect: Rect) -> Result<()> {
        if rect.w == 0
            || rect.h == 0
            || rect.x + rect.w > self.width
            || rect.y + rect.h > self.height
        {
            return Err(Error::RectOutOfBounds {
                rect,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Promotes a gray image to RGB by replicating the channel.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels,
        }
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.get(self.width - 1 - x, y, c);
                    let i = out.index(x, y, c);
                    out.pixels[i] = v;
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Image {
        let mut out = self.clone();
        let row = self.width * self.channels;
        for y in 0..self.height {
            let src = (self.height - 1 - y) * row;
            out.pixels[y * row..(y + 1) * row].copy_from_slice(&self.pixels[src..src + row]);
        }
        out
    }

    /// Copies out a rectangular region as a new image.
    pub fn crop(&self, rect: Rect) -> Result<Image> {
        self.check_rect(rect)?;
        let mut pixels = Vec::with_capacity(rect.w * rect.h * self.channels);
        for y in rect.y..rect.y + rect.h {
            let start = self.index(rect.x, y, 0);
            pixels.extend_from_slice(&self.pixels[start..start + rect.w * self.channels]);
        }
        Ok(Image {
            width: rect.w,
            height: rect.h,
            channels: self.channels,
            pixels,
        })
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Axis-aligned pixel rectangle, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub const fn square(x: usize, y: usize, edge: usize) -> Self {
        Self::new(x, y, edge, edge)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@({},{})", self.w, self.h, self.x, self.y)
    }
}

/// Square, flattened region of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub edge: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Copies a square region out of `image` in row-major, channel-interleaved order.
pub fn extract_patch(image: &Image, rect: Rect) -> Result<Patch> {
    if rect.w != rect.h {
        return Err(Error::InvalidArgument(format!(
            "patch rect must be square, got {rect}"
        )));
    }
    let cropped = image.crop(rect)?;
    Ok(Patch {
        edge: rect.w,
        channels: image.channels,
        values: cropped.pixels,
    })
}
