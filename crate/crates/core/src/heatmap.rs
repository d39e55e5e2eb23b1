//! Red/blue evidence images: red for positive WE, blue for negative, white
//! for neutral.

use std::io::Write;

use crate::engine::SaliencyMap;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    SymmetricMax,
    /// Scale by the q-th percentile of |WE|, then clamp.
    Percentile(f64),
}

impl Normalization {
    pub const DEFAULT_PERCENTILE: f64 = 99.0;

    /// Accepts `symmetric_max`, `percentile` (q = 99) and `pNN` / `percentile:NN`.
    pub fn parse(s: &str) -> Result<Self> {
        let q = match s {
            "symmetric_max" | "max" => return Ok(Self::SymmetricMax),
            "percentile" => Self::DEFAULT_PERCENTILE,
            _ => s
                .strip_prefix("percentile:")
                .or_else(|| s.strip_prefix('p'))
                .and_then(|q| q.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown normalization `{s}`")))?,
        };
        let n = Self::Percentile(q);
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Percentile(q) if !(q > 50.0 && q <= 100.0) => Err(Error::InvalidArgument(format!(
                "percentile {q} outside (50, 100]"
            ))),
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::SymmetricMax => "symmetric_max".into(),
            Self::Percentile(q) => format!("percentile:{q}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    White,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub normalization: Normalization,
    pub alpha: f64,
    pub background: Background,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            normalization: Normalization::SymmetricMax,
            alpha: 0.5,
            background: Background::White,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0,1]", self.alpha)));
        }
        Ok(())
    }
}

/// Normalized grid plus the divisor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub scale: f64,
}

fn percentile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

pub fn normalize_values(values: &[f64], normalization: Normalization) -> Normalized {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = match normalization {
        Normalization::SymmetricMax => max,
        Normalization::Percentile(q) => {
            let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
            abs.sort_by(f64::total_cmp);
            match percentile_of_sorted(&abs, q) {
                p if p > 0.0 => p,
                _ => max,
            }
        }
    };
    if scale == 0.0 {
        return Normalized {
            values: vec![0.0; values.len()],
            scale,
        };
    }
    Normalized {
        values: values.iter().map(|v| (v / scale).clamp(-1.0, 1.0)).collect(),
        scale,
    }
}

pub fn normalize_saliency(map: &SaliencyMap, spec: &RenderSpec) -> Normalized {
    normalize_values(&map.we_sum, spec.normalization)
}

pub fn heat_color(v: f64) -> [f64; 3] {
    if v > 0.0 {
        [1.0, 1.0 - v, 1.0 - v]
    } else {
        [1.0 + v, 1.0 + v, 1.0]
    }
}

pub fn render_heatmap(values: &[f64], width: usize, height: usize) -> Result<Image> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: (width, height, 1),
            found: (values.len(), 1, 1),
        });
    }
    let pixels = values
        .iter()
        .flat_map(|&v| heat_color(v.clamp(-1.0, 1.0)))
        .collect();
    Image::new(width, height, 3, pixels)
}

/// `alpha * heat + (1 - alpha) * original`, with gray originals promoted to RGB.
pub fn overlay(original: &Image, heat: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    let base = original.to_rgb();
    if base.dims() != heat.dims() {
        return Err(Error::DimensionMismatch {
            expected: heat.dims(),
            found: original.dims(),
        });
    }
    let pixels = heat
        .pixels()
        .iter()
        .zip(base.pixels())
        .map(|(h, o)| alpha * h + (1.0 - alpha) * o)
        .collect();
    Image::from_clamped(heat.width(), heat.height(), 3, pixels)
}

/// Normalizes, colors and (for `Background::Original`) blends over `original`.
pub fn render(map: &SaliencyMap, spec: &RenderSpec, original: Option<&Image>) -> Result<(Image, Normalized)> {
    spec.validate()?;
    let norm = normalize_saliency(map, spec);
    let heat = render_heatmap(&norm.values, map.width, map.height)?;
    let out = match (spec.background, original) {
        (Background::White, _) => heat,
        (Background::Original, Some(img)) => overlay(img, &heat, spec.alpha)?,
        (Background::Original, None) => {
            return Err(Error::InvalidArgument("overlay requested without an original image".into()))
        }
    };
    Ok((out, norm))
}

/// Side-car text recording how a rendered image was scaled.
pub fn write_render_sidecar<W: Write>(mut out: W, spec: &RenderSpec, norm: &Normalized) -> Result<()> {
    writeln!(out, "normalization={}", spec.normalization.describe())?;
    writeln!(out, "scale={:.16e}", norm.scale)?;
    match spec.background {
        Background::White => writeln!(out, "background=white")?,
        Background::Original => writeln!(out, "background=original\nalpha={}", spec.alpha)?,
    }
    Ok(())
}
