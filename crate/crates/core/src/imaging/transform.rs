//! Bilinear resize, rotation, flips and zoom-crop augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Rect};
use crate::error::{Error, Result};

/// Largest rotation magnitude drawn by [`Rotation::UpTo`] by default.
pub const MAX_ROTATION_DEG: f64 = 25.0;

/// Samples `image` at a real-valued position with edge clamping.
fn sample_bilinear(image: &Image, sx: f64, sy: f64, out: &mut [f64]) {
    let (w, h) = (image.width(), image.height());
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    for (c, o) in out.iter_mut().enumerate() {
        let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
        let bottom = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Corner-aligned source coordinate of output index `i`.
#[inline]
fn corner_aligned(i: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        (i * (src_len - 1)) as f64 / (dst_len - 1) as f64
    }
}

/// Bilinear resize whose output corners coincide with the input corners.
pub fn resize_bilinear(image: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let c = image.channels();
    let mut pixels = vec![0.0; out_w * out_h * c];
    for y in 0..out_h {
        let sy = corner_aligned(y, image.height(), out_h);
        for x in 0..out_w {
            let sx = corner_aligned(x, image.width(), out_w);
            let i = (y * out_w + x) * c;
            sample_bilinear(image, sx, sy, &mut pixels[i..i + c]);
        }
    }
    Image::from_clamped(out_w, out_h, c, pixels)
}

/// Rotates counter-clockwise by `degrees` about the image center. Source
/// positions outside the image take the nearest edge value.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (w, h, c) = image.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0; w * h * c];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // inverse mapping: rotate the destination offset by -theta
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            let i = (y * w + x) * c;
            sample_bilinear(image, sx, sy, &mut pixels[i..i + c]);
        }
    }
    Image::from_clamped(w, h, c, pixels).expect("rotation preserves geometry")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rotation {
    Fixed(f64),
    /// Uniform in `[-max, +max]` degrees, drawn from the seed.
    UpTo(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlipMode {
    #[default]
    Off,
    Always,
    /// Fair coin flip drawn from the seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoomCrop {
    pub ratio: f64,
    pub random_offset: bool,
}

/// Selection of augmentations; random parts are resolved from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation: Option<Rotation>,
    pub hflip: FlipMode,
    pub vflip: FlipMode,
    pub zoom: Option<ZoomCrop>,
}

impl AugmentSpec {
    /// Every augmentation randomized: rotation up to 25 degrees, coin-flip
    /// mirroring on both axes and a 0.8 zoom-crop at a random offset.
    pub fn standard() -> Self {
        Self {
            rotation: Some(Rotation::UpTo(MAX_ROTATION_DEG)),
            hflip: FlipMode::Random,
            vflip: FlipMode::Random,
            zoom: Some(ZoomCrop {
                ratio: 0.8,
                random_offset: true,
            }),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(z) = self.zoom {
            if !(z.ratio > 0.0 && z.ratio <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "zoom ratio {} outside (0, 1]",
                    z.ratio
                )));
            }
        }
        Ok(())
    }

    /// Draws every random choice, producing a fully concrete transform.
    pub fn resolve(&self, seed: u64) -> Result<ResolvedAugment> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotate_deg = match self.rotation {
            None => 0.0,
            Some(Rotation::Fixed(d)) => d,
            Some(Rotation::UpTo(max)) => rng.random_range(-max.abs()..=max.abs()),
        };
        let mut flip = |mode: FlipMode| match mode {
            FlipMode::Off => false,
            FlipMode::Always => true,
            FlipMode::Random => rng.random_bool(0.5),
        };
        let hflip = flip(self.hflip);
        let vflip = flip(self.vflip);
        let zoom = self.zoom.map(|z| {
            let (ox, oy) = if z.random_offset {
                (rng.random::<f64>(), rng.random::<f64>())
            } else {
                (0.5, 0.5)
            };
            (z.ratio, ox, oy)
        });
        Ok(ResolvedAugment {
            rotate_deg,
            hflip,
            vflip,
            zoom,
        })
    }
}

/// A concrete augmentation: applying it involves no randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAugment {
    pub rotate_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// `(ratio, offset_x, offset_y)`, offsets as fractions of the slack in `[0, 1]`.
    pub zoom: Option<(f64, f64, f64)>,
}

impl ResolvedAugment {
    /// Rotation, then flips, then zoom-crop resized back to the input size.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        let mut out = rotate(image, self.rotate_deg);
        if self.hflip {
            out = out.hflip();
        }
        if self.vflip {
            out = out.vflip();
        }
        if let Some((ratio, ox, oy)) = self.zoom {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "zoom ratio {ratio} outside (0, 1]"
                )));
            }
            let (w, h) = (out.width(), out.height());
            let cw = ((w as f64 * ratio).round() as usize).clamp(1, w);
            let ch = ((h as f64 * ratio).round() as usize).clamp(1, h);
            let x = ((w - cw) as f64 * ox.clamp(0.0, 1.0)).round() as usize;
            let y = ((h - ch) as f64 * oy.clamp(0.0, 1.0)).round() as usize;
            let crop = out.crop(Rect::new(x, y, cw, ch))?;
            out = resize_bilinear(&crop, w, h)?;
        }
        Ok(out)
    }

    pub fn describe(&self) -> String {
        let mut parts = vec![format!("rot={:.4}", self.rotate_deg)];
        if self.hflip {
            parts.push("hflip".into());
        }
        if self.vflip {
            parts.push("vflip".into());
        }
        if let Some((r, ox, oy)) = self.zoom {
            parts.push(format!("zoom={r}@{ox:.4},{oy:.4}"));
        }
        parts.join(";")
    }
}

pub fn apply_augmentation(image: &Image, spec: &AugmentSpec, seed: u64) -> Result<Image> {
    spec.resolve(seed)?.apply(image)
}
