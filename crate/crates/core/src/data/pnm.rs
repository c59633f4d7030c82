//! 8-bit binary PGM (`P5`) and PPM (`P6`) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

/// Decoded raster: `channels` interleaved 8-bit samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    /// Byte offset of the first pixel sample in the source file.
    pub payload_offset: usize,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
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
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut hd = Header { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(hd.err(0, "expected P5 or P6 magic")),
    };
    hd.pos = 2;
    let width = hd.number("width")?;
    let height = hd.number("height")?;
    hd.skip_space();
    let at = hd.pos;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(hd.err(at, format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(hd.err(at, "zero image dimension"));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(hd.err(hd.pos, "expected single whitespace before pixel data")),
    }
    let need = width * height * channels;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(hd.err(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(hd.err(hd.pos + need, "trailing bytes after pixel data"));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload.to_vec(),
        payload_offset: hd.pos,
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

fn read_raster(path: &Path, channels: usize) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let r = decode(&bytes, path)?;
    if r.channels != channels {
        let want = if channels == 1 { "P5 graymap" } else { "P6 pixmap" };
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("expected {want}"),
        });
    }
    Ok(r)
}

fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a graymap whose samples are all 0 or 255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = read_raster(path, 1)?;
    if let Some(i) = r.data.iter().position(|&v| v != 0 && v != 255) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: r.payload_offset + i,
            msg: format!("mask value {} is not binary (0 or 255)", r.data[i]),
        });
    }
    Mask::new(r.height, r.width, r.data.iter().map(|&v| (v == 255) as u8).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_raster(
        path,
        &Raster {
            width: mask.width(),
            height: mask.height(),
            channels: 1,
            data: mask.data().iter().map(|&v| v * 255).collect(),
            payload_offset: 0,
        },
    )
}

/// Reads any 8-bit graymap as a `(1, 1, H, W)` map in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let r = read_raster(path, 1)?;
    Tensor::from_vec(
        Shape::new(1, 1, r.height, r.width),
        r.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
    )
}

/// Writes channel 0 of the first batch item, quantised to 8 bits.
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    write_raster(
        path,
        &Raster {
            width: s.w,
            height: s.h,
            channels: 1,
            data: map.data()[..s.plane()].iter().map(|&v| quantize(v)).collect(),
            payload_offset: 0,
        },
    )
}

/// Reads a pixmap as a `(1, 3, H, W)` image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let r = read_raster(path, 3)?;
    Ok(Tensor::from_fn(Shape::new(1, 3, r.height, r.width), |_, c, y, x| {
        f64::from(r.data[(y * r.width + x) * 3 + c]) / 255.0
    }))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.c != 3 || s.n != 1 {
        return Err(Error::input(format!("image must be 1x3xHxW, got {s}")));
    }
    let mut data = Vec::with_capacity(s.plane() * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    write_raster(
        path,
        &Raster {
            width: s.w,
            height: s.h,
            channels: 3,
            data,
            payload_offset: 0,
        },
    )
}
