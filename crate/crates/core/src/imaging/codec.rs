//! Netpbm (P2/P3/P5/P6) and PNG codecs.
//!
//! PPM output is the golden format: binary P5/P6 at maxval 255, samples
//! quantized with round-half-up. PNG goes through the `png` crate.

use std::io::Cursor;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Picks a format from a file extension (`ppm`, `pgm`, `pnm`, `png`).
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "ppm" | "pgm" | "pnm" => Some(Self::Ppm),
            "png" => Some(Self::Png),
            _ => None,
        }
    }

    /// Sniffs the magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG") {
            Some(Self::Png)
        } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
            Some(Self::Ppm)
        } else {
            None
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    match format {
        ImageFormat::Ppm => decode_pnm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

pub fn encode_image(image: &Image, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Ppm => Ok(encode_pnm(image)),
        ImageFormat::Png => encode_png(image),
    }
}

/// Reads an image file, choosing the codec from the extension or the magic bytes.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let format = ImageFormat::from_path(path)
        .or_else(|| ImageFormat::detect(&bytes))
        .ok_or_else(|| Error::MalformedHeader(format!("unrecognized image {}", path.display())))?;
    decode_image(&bytes, format)
}

/// Writes an image, choosing the codec from the extension (PPM when unknown).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Ppm);
    std::fs::write(path, encode_image(image, format)?)?;
    Ok(())
}

#[inline]
fn quantize_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct PnmHeader {
    magic: u8,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn next_number(&mut self, what: &str) -> Result<u32> {
        let tok = self
            .next_token()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "bad {what}: {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing netpbm magic".into()));
    }
    let magic = bytes[1];
    match magic {
        b'2' | b'3' | b'5' | b'6' => {}
        b'1' | b'4' => {
            return Err(Error::UnsupportedColorMode("bitmap (P1/P4)".into()));
        }
        b'7' => return Err(Error::UnsupportedColorMode("PAM (P7)".into())),
        other => {
            return Err(Error::MalformedHeader(format!(
                "unknown netpbm magic P{}",
                other as char
            )))
        }
    }
    let mut tokens = Tokens { bytes, pos: 2 };
    let width = tokens.next_number("width")? as usize;
    let height = tokens.next_number("height")? as usize;
    let maxval = tokens.next_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedColorMode(format!("maxval {maxval}")));
    }
    // Binary payloads start after exactly one whitespace byte.
    let mut data_start = tokens.pos;
    if matches!(magic, b'5' | b'6') {
        if data_start >= bytes.len() || !bytes[data_start].is_ascii_whitespace() {
            return Err(Error::TruncatedPayload("no data after header".into()));
        }
        data_start += 1;
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval,
        data_start,
    })
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let h = parse_pnm_header(bytes)?;
    let channels = if matches!(h.magic, b'3' | b'6') { 3 } else { 1 };
    let count = h.width * h.height * channels;
    let maxval = h.maxval as f64;
    let raw: Vec<u32> = match h.magic {
        b'2' | b'3' => {
            let mut tokens = Tokens {
                bytes,
                pos: h.data_start,
            };
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                match tokens.next_token() {
                    None => {
                        return Err(Error::TruncatedPayload(format!(
                            "expected {count} samples, found {i}"
                        )))
                    }
                    Some(tok) => {
                        let v = std::str::from_utf8(tok)
                            .ok()
                            .and_then(|s| s.parse::<u32>().ok())
                            .ok_or_else(|| {
                                Error::MalformedHeader(format!(
                                    "bad sample {:?}",
                                    String::from_utf8_lossy(tok)
                                ))
                            })?;
                        out.push(v);
                    }
                }
            }
            out
        }
        _ => {
            let payload = &bytes[h.data_start..];
            let wide = h.maxval > 255;
            let need = if wide { count * 2 } else { count };
            if payload.len() < need {
                return Err(Error::TruncatedPayload(format!(
                    "expected {need} bytes, found {}",
                    payload.len()
                )));
            }
            if wide {
                payload[..need]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
                    .collect()
            } else {
                payload[..need].iter().map(|&b| b as u32).collect()
            }
        }
    };
    if let Some(v) = raw.iter().find(|&&v| v > h.maxval) {
        return Err(Error::MalformedHeader(format!(
            "sample {v} exceeds maxval {}",
            h.maxval
        )));
    }
    let pixels = raw.into_iter().map(|v| v as f64 / maxval).collect();
    Image::new(h.width, h.height, channels, pixels)
}

fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| quantize_u8(v)));
    out
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedPayload(io.to_string())
        }
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::MalformedHeader(other.to_string()),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedColorMode(format!("PNG {other:?}"))),
    };
    let wide = match depth {
        png::BitDepth::Eight => false,
        png::BitDepth::Sixteen => true,
        other => return Err(Error::UnsupportedColorMode(format!("PNG bit depth {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedHeader("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h * channels);
    for row in buf.chunks_exact(info.line_size).take(h) {
        if wide {
            pixels.extend(
                row[..w * channels * 2]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0),
            );
        } else {
            pixels.extend(row[..w * channels].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(w, h, channels, pixels)
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(if image.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let data: Vec<u8> = image.pixels().iter().map(|&v| quantize_u8(v)).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_ppm_full_white() {
        let img = decode_image(b"P3\n2 2\n255\n255 255 255 255 255 255\n255 255 255 255 255 255\n", ImageFormat::Ppm).unwrap();
        assert_eq!(img.dims(), (2, 2, 3));
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ascii_pgm_zero() {
        let img = decode_image(b"P2 1 1 255 0", ImageFormat::Ppm).unwrap();
        assert_eq!(img.dims(), (1, 1, 1));
        assert_eq!(img.pixels(), &[0.0]);
    }

    #[test]
    fn ascii_ppm_red_green() {
        let img = decode_image(b"P3\n# two pixels\n2 1\n255\n255 0 0  0 255 0\n", ImageFormat::Ppm).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn binary_16bit_pgm() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let img = decode_image(&bytes, ImageFormat::Ppm).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            decode_image(b"P6\n2 x\n255\n", ImageFormat::Ppm),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_image(b"P6\n2 2\n255\n\x00\x00", ImageFormat::Ppm),
            Err(Error::TruncatedPayload(_))
        ));
        assert!(matches!(
            decode_image(b"P3 1 1 255 1 2", ImageFormat::Ppm),
            Err(Error::TruncatedPayload(_))
        ));
        assert!(matches!(
            decode_image(b"P4\n1 1\n\x00", ImageFormat::Ppm),
            Err(Error::UnsupportedColorMode(_))
        ));
        assert!(matches!(
            decode_image(b"\x89PNG\r\n\x1a\n", ImageFormat::Png),
            Err(Error::TruncatedPayload(_) | Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn half_rounds_up() {
        let img = Image::filled(1, 1, 1, 0.5).unwrap();
        let bytes = encode_image(&img, ImageFormat::Ppm).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\x80");
    }

    #[test]
    fn ppm_encoding_is_deterministic() {
        let img = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(
            encode_image(&img, ImageFormat::Ppm).unwrap(),
            encode_image(&img, ImageFormat::Ppm).unwrap()
        );
    }

    #[test]
    fn png_rejects_alpha() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(matches!(
            decode_image(&out, ImageFormat::Png),
            Err(Error::UnsupportedColorMode(_))
        ));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
            |(w, h, c)| {
                proptest::collection::vec(0.0f64..=1.0, w * h * c)
                    .prop_map(move |px| Image::new(w, h, c, px).unwrap())
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(img in arb_image(), png in any::<bool>()) {
            let format = if png { ImageFormat::Png } else { ImageFormat::Ppm };
            let back = decode_image(&encode_image(&img, format).unwrap(), format).unwrap();
            prop_assert_eq!(back.dims(), img.dims());
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
