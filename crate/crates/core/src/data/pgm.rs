//! Binary greyscale PGM (`P5`, maxval 255).

use std::path::Path;

use super::write_atomic;
use crate::error::{contract, Error, Result};
use crate::explain::{MapKind, PixelMap};

/// `round-half-up(v · 255)` per pixel behind a `P5\n{w} {h}\n255\n` header.
pub fn encode_pgm(map: &PixelMap) -> Result<Vec<u8>> {
    if let Some(v) = map.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return contract("write_pgm", format!("value {v} outside [0, 1]"));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|&v| (v * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn write_pgm(map: &PixelMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(map)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    /// Skips whitespace and `#` comments.
    fn skip_blank(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err(format!("{what} out of range"))
            }
        }
    }
}

/// Parses a `P5` image into a map with values `byte / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<PixelMap> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return c.err("missing P5 magic");
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return c.err("zero extent");
    }
    if maxval == 0 || maxval > 255 {
        return c.err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return c.err("expected whitespace after maxval");
    }
    c.pos += 1;
    let need = width * height;
    let pixels = &bytes[c.pos..];
    if pixels.len() < need {
        c.pos = bytes.len();
        return c.err(format!("truncated raster: {} of {need} bytes", pixels.len()));
    }
    let values = pixels[..need].iter().map(|&b| f64::from(b) / maxval as f64).collect();
    PixelMap::new(height, width, values, MapKind::Cam)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<PixelMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}
