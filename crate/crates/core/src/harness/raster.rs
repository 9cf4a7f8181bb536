//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(offset: usize, msg: impl Into<String>) -> Error {
    Error::Raster { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad(start, format!("{what} out of range")))
    }
}

/// Decodes a P5/P6 image into `[1, C, H, W]` with values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(0, "expected magic P5 or P6")),
    };
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let max_at = hd.pos;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(bad(max_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(bad(max_at, "zero image dimension"));
    }
    match bytes.get(hd.pos) {
        Some(c) if c.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(bad(hd.pos, "expected whitespace after maxval")),
    }
    let need = w * h * channels;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(bad(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = payload[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![1, channels, h, w], data)
}

/// Encodes `[1, 1|3, H, W]` as P5/P6, clamping to `[0, 1]` and rounding to
/// the nearest level.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims4("save_raster")?;
    let magic = match (n, c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::shape("save_raster", format!("expected [1, 1|3, H, W], got {:?}", image.shape()))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_raster(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

pub fn save_raster(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
