//! Binary PPM (P6, maxval 255) images as `1×3×H×W` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Ppm {
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
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
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

/// Parse a P6 file.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(maxval_at, "empty image"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err(h.pos, "expected single whitespace before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(0, "image dimensions overflow"))?;
    let data = &bytes[h.pos..];
    if data.len() < need {
        return Err(err(bytes.len(), format!("truncated pixel data: need {need} bytes, have {}", data.len())));
    }
    if data.len() > need {
        return Err(err(h.pos + need, "trailing bytes after pixel data"));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |[_, c, y, x]| {
        data[(y * width + x) * 3 + c] as f32 / 255.0
    }))
}

/// Quantize to 8 bits (round half to even on `255·v`, clamped) and encode.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::Shape(format!("PPM needs a 1×3×H×W image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    out.reserve(3 * s.plane());
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                let v = (img.at(0, c, y, x) * 255.0).round_ties_even().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Every `.ppm` file directly inside `dir`, sorted by name.
pub fn read_ppm_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_ppm(&p)?))
        })
        .collect()
}
