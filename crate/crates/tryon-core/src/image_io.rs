//! Portable raster I/O: binary PPM (P6, 8-bit RGB) for images and binary
//! PBM (P4, 1 bit per pixel) for masks.
//!
//! Byte-exact conventions:
//! - PPM: `P6\n<w> <h>\n255\n` followed by `h*w*3` bytes, row-major RGB.
//! - PBM: `P4\n<w> <h>\n` followed by `h` rows of `ceil(w/8)` bytes, most
//!   significant bit first; bit 1 marks the inpaint region.
//! - Pixels map to model space as `v = u/127.5 - 1` and back with
//!   `u = round((v+1)*127.5)`, which roundtrips every 8-bit value.
//!
//! Parsers report the byte offset of the first malformed datum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, `h*w*3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

/// Binary mask, one byte per pixel holding 0 or 1; 1 = inpaint region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize) -> RgbImage {
        RgbImage { w, h, data: vec![0; w * h * 3] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[1, 3, h, w]` tensor in [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.h, self.w);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] =
                        self.data[(y * w + x) * 3 + c] as f64 / 127.5 - 1.0;
                }
            }
        }
        Tensor::from_vec(data, vec![1, 3, h, w])
    }

    /// Quantize a `[1, 3, h, w]` tensor in [-1, 1] back to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<RgbImage> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::invalid("from_tensor", format!("expected [1,3,h,w], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = t.data()[(c * h + y) * w + x];
                    img.data[(y * w + x) * 3 + c] =
                        (((v + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
                }
            }
        }
        Ok(img)
    }
}

impl BitMask {
    pub fn new(w: usize, h: usize) -> BitMask {
        BitMask { w, h, data: vec![0; w * h] }
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    /// `[1, 1, h, w]` tensor with values in {0, 1}.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&b| b as f64).collect();
        Tensor::from_vec(data, vec![1, 1, self.h, self.w])
    }
}

// ── encoding ─────────────────────────────────────────────────────────

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pbm(mask: &BitMask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.w, mask.h).into_bytes();
    let row_bytes = mask.w.div_ceil(8);
    for y in 0..mask.h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..mask.w {
            if mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

// ── parsing ──────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { offset: start, msg: "integer overflow".into() })
    }

    fn expect_single_whitespace(&mut self) -> Result<()> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected whitespace before raster data"));
        }
        self.pos += 1;
        Ok(())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("truncated {what}: need {n} bytes from offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(2, "magic")? != b"P6" {
        return Err(Error::Parse { offset: 0, msg: "not a P6 ppm".into() });
    }
    let w = c.read_uint()?;
    let h = c.read_uint()?;
    let maxval = c.read_uint()?;
    if maxval != 255 {
        return Err(c.err(format!("unsupported maxval {maxval} (expected 255)")));
    }
    if w == 0 || h == 0 || w > 1 << 20 || h > 1 << 20 {
        return Err(c.err(format!("implausible extents {w}x{h}")));
    }
    c.expect_single_whitespace()?;
    let data = c.take(w * h * 3, "pixel data")?.to_vec();
    Ok(RgbImage { w, h, data })
}

pub fn parse_pbm(bytes: &[u8]) -> Result<BitMask> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(2, "magic")? != b"P4" {
        return Err(Error::Parse { offset: 0, msg: "not a P4 pbm".into() });
    }
    let w = c.read_uint()?;
    let h = c.read_uint()?;
    if w == 0 || h == 0 || w > 1 << 20 || h > 1 << 20 {
        return Err(c.err(format!("implausible extents {w}x{h}")));
    }
    c.expect_single_whitespace()?;
    let row_bytes = w.div_ceil(8);
    let raster = c.take(row_bytes * h, "raster data")?;
    let mut mask = BitMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let byte = raster[y * row_bytes + x / 8];
            mask.data[y * w + x] = (byte >> (7 - x % 8)) & 1;
        }
    }
    Ok(mask)
}

// ── file helpers ─────────────────────────────────────────────────────

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ppm(&bytes)
}

pub fn write_pbm(path: &Path, mask: &BitMask) -> Result<()> {
    fs::write(path, encode_pbm(mask)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pbm(path: &Path) -> Result<BitMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pbm(&bytes)
}
