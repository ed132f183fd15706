//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255. Images are
//! scaled to [0, 1] on read and rescaled on write; 8-bit data round-trips
//! losslessly. Parse errors name the byte offset.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{Element, Shape, Tensor};

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    fn err(&self, msg: &str) -> Error {
        Error::data(format!("{msg} at byte {}", self.pos))
    }

    fn magic(&mut self, want: &[u8; 2]) -> Result<()> {
        if self.bytes.len() < 2 {
            return Err(self.err("truncated header"));
        }
        if &self.bytes[..2] != want {
            return Err(Error::data(format!(
                "bad magic {:?} (expected {:?}) at byte 0",
                &self.bytes[..2.min(self.bytes.len())],
                want
            )));
        }
        self.pos = 2;
        Ok(())
    }

    /// Skip whitespace and `#` comment lines.
    fn skip_space(&mut self) -> Result<()> {
        let mut skipped = false;
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
                skipped = true;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                skipped = true;
            } else {
                break;
            }
        }
        if !skipped {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("number out of range"))
    }

    /// Header tail: dims, maxval 255, single whitespace byte before payload.
    fn dims_and_payload(&mut self) -> Result<(usize, usize, &'a [u8])> {
        self.skip_space()?;
        let w = self.number()?;
        self.skip_space()?;
        let h = self.number()?;
        self.skip_space()?;
        let maxval = self.number()?;
        if maxval != 255 {
            return Err(self.err("maxval must be 255"));
        }
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected single whitespace before payload"));
        }
        self.pos += 1;
        if w == 0 || h == 0 {
            return Err(self.err("dims must be >= 1"));
        }
        Ok((w, h, &self.bytes[self.pos..]))
    }
}

/// Write a `(1, 3, h, w)` tensor in [0, 1] as binary PPM.
pub fn write_ppm<E: Element>(path: &Path, image: &Tensor<E>) -> Result<()> {
    let Shape { n, c, h, w } = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("write_ppm expects (1, 3, h, w), got {}", image.shape())));
    }
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = Element::as_f64(image.at(0, ch, y, x));
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a binary PPM into a `(1, 3, h, w)` tensor scaled to [0, 1].
pub fn read_ppm<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path)?;
    let mut p = HeaderParser::new(&bytes);
    p.magic(b"P6")?;
    let (w, h, payload) = p.dims_and_payload()?;
    if payload.len() != w * h * 3 {
        return Err(Error::data(format!(
            "payload of {} bytes does not match {w}x{h}x3 at byte {}",
            payload.len(),
            bytes.len() - payload.len()
        )));
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = payload[(y * w + x) * 3 + ch];
                t.set(0, ch, y, x, E::from_f64(v as f64 / 255.0));
            }
        }
    }
    Ok(t)
}

/// Write a label map as binary PGM (value 255 = ignore).
pub fn write_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    let (h, w) = label.dims();
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend_from_slice(label.data());
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a binary PGM as a label map, validating values against
/// `num_classes` (255 stays the ignore value).
pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let bytes = std::fs::read(path)?;
    let mut p = HeaderParser::new(&bytes);
    p.magic(b"P5")?;
    let (w, h, payload) = p.dims_and_payload()?;
    if payload.len() != w * h {
        return Err(Error::data(format!(
            "payload of {} bytes does not match {w}x{h} at byte {}",
            payload.len(),
            bytes.len() - payload.len()
        )));
    }
    let lm = LabelMap::new(h, w, payload.to_vec())?;
    lm.validate(num_classes)?;
    Ok(lm)
}
