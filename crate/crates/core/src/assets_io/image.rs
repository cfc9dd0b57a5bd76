//! Binary PPM (`P6`, RGB) and PGM (`P5`, grey) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::renderer::Image;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1-channel image as PGM or a 3-channel image as PPM.
pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot store a {c}-channel image as PPM/PGM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .filter(|s| !s.is_empty() && s.len() <= 9)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::malformed(field, "expected a decimal number"))
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::malformed("magic", "expected P5 or P6")),
    };
    let mut h = Header { buf: bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::malformed("maxval", format!("{maxval} is not an 8-bit maximum")));
    }
    if !bytes.get(h.pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::malformed("maxval", "missing separator before pixel data"));
    }
    let payload = &bytes[h.pos + 1..];
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(channels));
    if expected != Some(payload.len()) {
        return Err(Error::malformed(
            "pixels",
            format!("{width}x{height}x{channels} image but {} payload bytes", payload.len()),
        ));
    }
    if let Some(&b) = payload.iter().find(|&&b| b as usize > maxval) {
        return Err(Error::malformed("pixels", format!("sample {b} exceeds maxval {maxval}")));
    }
    let scale = maxval as f64;
    Ok(Image {
        width,
        height,
        channels,
        data: payload.iter().map(|&b| b as f64 / scale).collect(),
    })
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    super::write(path, &encode_image(img)?)
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(&super::read(path)?)
}

/// Rounds every sample to the nearest 8-bit level, as a save/load would.
pub fn quantize_image(img: &Image) -> Image {
    Image {
        data: img.data.iter().map(|&v| to_byte(v) as f64 / 255.0).collect(),
        ..img.clone()
    }
}
