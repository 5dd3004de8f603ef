//! 8-bit grayscale buffers and binary PGM (P5) I/O.

use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("only maxval 255 is supported, got {0}")]
    MaxVal(u32),
    #[error("truncated pixel data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_f32(&self) -> ImageF32 {
        ImageF32 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        self.write_pgm(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_pgm<R: Read>(mut r: R) -> Result<Self, PgmError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_pgm_bytes(&bytes)
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos).ok_or_else(|| PgmError::Header("missing magic".into()))?;
        if magic != b"P5" {
            return Err(PgmError::Header(format!("expected P5, got {:?}", String::from_utf8_lossy(magic))));
        }
        let mut fields = [0u32; 3];
        for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| PgmError::Header(format!("missing {name}")))?;
            fields[i] = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PgmError::Header(format!("bad {name}")))?;
        }
        if fields[2] != 255 {
            return Err(PgmError::MaxVal(fields[2]));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let (width, height) = (fields[0] as usize, fields[1] as usize);
        let expected = width * height;
        let got = bytes.len().saturating_sub(pos);
        if got < expected {
            return Err(PgmError::Truncated { expected, got });
        }
        Ok(Self { width, height, data: bytes[pos..pos + expected].to_vec() })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Floating-point grayscale buffer used by the gradient and matching code.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Separable Gaussian blur with clamped borders.
    pub fn gaussian_blur(&self, sigma: f32) -> ImageF32 {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            let row = &self.data[(y * w) as usize..((y + 1) * w) as usize];
            for x in 0..w {
                let mut acc = 0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * row[xx as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        ImageF32 { width: self.width, height: self.height, data: out }
    }

    /// 2x2 box-filter decimation.
    pub fn downsample(&self) -> ImageF32 {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.get(2 * x, 2 * y) + self.get(2 * x + 1, 2 * y) + self.get(2 * x, 2 * y + 1) + self.get(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        ImageF32 { width: w, height: h, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_header() {
        let mut img = GrayImage::new(3, 2, 7);
        img.set(2, 1, 200);
        let bytes = img.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::from_pgm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        let img = GrayImage::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(GrayImage::from_pgm_bytes(b"P2\n1 1\n255\n0"), Err(PgmError::Header(_))));
        assert!(matches!(GrayImage::from_pgm_bytes(b"P5\n1 1\n65535\n00"), Err(PgmError::MaxVal(65535))));
        assert!(matches!(GrayImage::from_pgm_bytes(b"P5\n4 4\n255\n000"), Err(PgmError::Truncated { .. })));
    }

    #[test]
    fn blur_preserves_constant() {
        let img = ImageF32::new(9, 7, 42.0);
        let b = img.gaussian_blur(1.5);
        assert!(b.data.iter().all(|v| (v - 42.0).abs() < 1e-4));
    }
}
