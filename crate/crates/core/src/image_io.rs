//! Binary PPM (P6) images with 8-bit channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::check_image;

/// Nearest point of the 1/255 grid, clamped to `[0, 1]`.
pub fn quantize(x: f64) -> f64 {
    to_byte(x) as f64 / 255.0
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes `[3, H, W]` as P6 with `round(x·255)` bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    check_image(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, detail: detail.into() }
    }

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

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse { offset: start, detail: format!("{field} out of range") })
    }
}

/// Parses P6 bytes to `[3, H, W]` with `b / 255` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut hd = Header { bytes, pos: 0 };
    if bytes.get(..2) != Some(b"P6") {
        return Err(hd.err("unsupported magic, expected P6"));
    }
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let max = hd.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(hd.err("zero image extent"));
    }
    if max != 255 {
        return Err(hd.err(format!("maxval {max} unsupported, expected 255")));
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(hd.err("expected single whitespace before payload"));
    }
    hd.pos += 1;
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or_else(|| hd.err("extents overflow"))?;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(Error::Parse { offset: bytes.len(), detail: format!("truncated payload: need {need} bytes, got {}", payload.len()) });
    }
    if payload.len() > need {
        return Err(Error::Parse { offset: hd.pos + need, detail: "trailing bytes after payload".into() });
    }
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = payload[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}
