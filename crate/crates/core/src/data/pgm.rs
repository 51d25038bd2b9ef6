//! Binary greymap (`P5`, maxval 255) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, PgmError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{width}x{height} image given {} pixels", pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Quantise intensities in [0, 1] by `round(v * 255)`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(width, height, pixels)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, PgmError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.token()?;
        match magic.as_str() {
            "P5" => {}
            "P2" => return Err(PgmError::Unsupported("P2 (ASCII greymap)".into())),
            m if m.len() == 2 && m.starts_with('P') => return Err(PgmError::Unsupported(m.to_string())),
            m => return Err(PgmError::BadMagic(m.to_string())),
        }
        let width = cur.number("width")?;
        let height = cur.number("height")?;
        let maxval = cur.number("maxval")?;
        if maxval != 255 {
            return Err(PgmError::Unsupported(format!("maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(PgmError::MalformedHeader(format!("zero extent {width}x{height}")));
        }
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(PgmError::MalformedHeader("missing whitespace after maxval".into())),
        }
        let expected = width * height;
        let payload = &bytes[cur.pos..];
        if payload.len() < expected {
            return Err(PgmError::Truncated { expected, found: payload.len() });
        }
        Ok(GrayImage { width, height, pixels: payload[..expected].to_vec() })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> std::result::Result<String, PgmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::MalformedHeader("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, PgmError> {
        let tok = self.token()?;
        tok.parse().map_err(|_| PgmError::MalformedHeader(format!("bad {what} {tok:?}")))
    }
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(GrayImage::decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_layout() {
        let img = GrayImage::new(2, 2, vec![0, 1, 254, 255]).unwrap();
        let bytes = img.encode();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(bytes.len(), 11 + 4);
        assert_eq!(GrayImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(GrayImage::decode(b"P2\n1 1\n255\n0"), Err(PgmError::Unsupported(_))));
        assert!(matches!(GrayImage::decode(b"XY\n1 1\n255\n0"), Err(PgmError::BadMagic(_))));
        assert!(matches!(GrayImage::decode(b"P5\n2 x\n255\n"), Err(PgmError::MalformedHeader(_))));
        assert_eq!(GrayImage::decode(b"P5\n2 2\n255\n\x01"), Err(PgmError::Truncated { expected: 4, found: 1 }));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = GrayImage::decode(b"P5\n# made by hand\n1 1\n255\n\x07").unwrap();
        assert_eq!(img.pixels, vec![7]);
    }
}
