//! Binary PPM (P6) images with 8-bit samples.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Config(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Image {
            width,
            height,
            pixels: rgb
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Appends channel-planar `[3, H, W]` values scaled to `[0, 1]`.
    pub fn push_planar(&self, out: &mut Vec<f64>) {
        for c in 0..3 {
            out.extend(
                self.pixels[c..]
                    .iter()
                    .step_by(3)
                    .map(|&v| v as f64 / 255.0),
            );
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.pixels.len());
        self.push_planar(&mut data);
        Tensor::new([3, self.height, self.width], data).expect("pixel count matches shape")
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a P6 file. Errors carry the byte offset where parsing failed.
    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, PpmError> {
        let mut pos = 0;
        if bytes.get(..2) != Some(b"P6") {
            return Err(PpmError::new(0, "expected magic `P6`"));
        }
        pos += 2;
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(PpmError::new(
                pos,
                format!("maxval {maxval} unsupported, expected 255"),
            ));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => {
                return Err(PpmError::new(
                    pos,
                    "expected single whitespace before pixel data",
                ))
            }
        }
        if width == 0 || height == 0 {
            return Err(PpmError::new(pos, "image has zero size"));
        }
        let need = width * height * 3;
        let have = bytes.len() - pos;
        if have < need {
            return Err(PpmError::new(
                bytes.len(),
                format!("pixel data truncated: {have} of {need} bytes"),
            ));
        }
        if have > need {
            return Err(PpmError::new(
                pos + need,
                format!("{} trailing bytes", have - need),
            ));
        }
        Ok(Image {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmError {
    pub offset: usize,
    pub detail: String,
}

impl PpmError {
    fn new(offset: usize, detail: impl Into<String>) -> Self {
        PpmError {
            offset,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for PpmError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "malformed PPM at byte {}: {}", self.offset, self.detail)
    }
}

fn header_number(
    bytes: &[u8],
    pos: &mut usize,
    what: &str,
) -> std::result::Result<usize, PpmError> {
    // whitespace and `#` comments may precede each header field
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::new(start, format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n <= 1 << 16)
        .ok_or_else(|| PpmError::new(start, format!("{what} out of range")))
}
