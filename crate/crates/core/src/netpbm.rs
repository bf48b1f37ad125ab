//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Result, ScdError};
use crate::tensor::Tensor4;

/// Row-major 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ScdError::Shape(format!("{}x{} raster with {} bytes", width, height, data.len())));
        }
        Ok(Self { width, height, data })
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| ScdError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| ScdError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| in_file(e, path))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, payload) = parse(bytes, b"P5", 1)?;
    GrayImage::new(w, h, payload.to_vec())
}

/// Writes a (1, 3, H, W) image in [0, 1]; bytes are round(255 v), halves away from zero.
pub fn write_ppm(image: &Tensor4, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| ScdError::io(path, e))
}

pub fn encode_ppm(image: &Tensor4) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(ScdError::Shape(format!("PPM needs a (1,3,H,W) image, got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((255.0 * image.at(0, ch, y, x)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Reads a P6 file back as a (1, 3, H, W) tensor of byte/255.
pub fn read_ppm(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path).map_err(|e| ScdError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| in_file(e, path))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    let (w, h, payload) = parse(bytes, b"P6", 3)?;
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| f64::from(payload[3 * (y * w + x) + c]) / 255.0))
}

fn in_file(e: ScdError, path: &Path) -> ScdError {
    match e {
        ScdError::Format(m) => ScdError::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn parse<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ScdError::Format(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ScdError::Format("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ScdError::Format("header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ScdError::Format("malformed header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(ScdError::Format(format!("maxval {maxval} unsupported, only 255")));
    }
    if w == 0 || h == 0 {
        return Err(ScdError::Format(format!("empty raster {w}x{h}")));
    }
    let need = w * h * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(ScdError::Format(format!("short payload: {} of {need} bytes", payload.len())));
    }
    Ok((w, h, &payload[..need]))
}
