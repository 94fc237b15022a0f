//! Binary PPM (P6) / PGM (P5) codec, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => {
                    return Err(Error::Parse {
                        offset: self.pos,
                        message: "unexpected end of header".into(),
                    })
                }
            }
        }
    }

    fn token(&mut self) -> Result<(usize, &'a [u8])> {
        self.skip_whitespace_and_comments()?;
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        Ok((start, &self.bytes[start..self.pos]))
    }

    fn number(&mut self) -> Result<usize> {
        let (offset, tok) = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset,
                message: format!("expected number, got {:?}", String::from_utf8_lossy(tok)),
            })
    }
}

/// Loads a P6/P5 image as a 3×H×W tensor in [0,1]; grayscale is replicated
/// across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let (off, magic) = r.token()?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::Parse {
                offset: off,
                message: format!(
                    "unsupported magic {:?}, expected P5 or P6",
                    String::from_utf8_lossy(magic)
                ),
            })
        }
    };
    let w = r.number()?;
    let h = r.number()?;
    let maxval_off = r.pos;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: maxval_off,
            message: format!("maxval {} out of supported 8-bit range", maxval),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = r.pos + 1;
    let expected = w * h * channels;
    if bytes.len() < payload + expected {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!(
                "truncated payload: need {} bytes, have {}",
                expected,
                bytes.len().saturating_sub(payload)
            ),
        });
    }
    let raw = &bytes[payload..payload + expected];
    let scale = 1.0 / maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    if channels == 3 {
        for p in 0..h * w {
            for c in 0..3 {
                data[c * h * w + p] = raw[p * 3 + c] as f64 * scale;
            }
        }
    } else {
        for p in 0..h * w {
            let v = raw[p] as f64 * scale;
            data[p] = v;
            data[h * w + p] = v;
            data[2 * h * w + p] = v;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a tensor as P6 (3×H×W) or P5 (1×H×W or H×W), clamping to [0,1]
/// and quantizing with round(v·255).
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let (channels, h, w) = match t.shape() {
        &[3, h, w] => (3, h, w),
        &[1, h, w] => (1, h, w),
        &[h, w] => (1, h, w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "save_image expects 3×H×W, 1×H×W or H×W, got {:?}",
                other
            )))
        }
    };
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if channels == 3 {
        for p in 0..h * w {
            for c in 0..3 {
                out.push(quantize(t.data()[c * h * w + p]));
            }
        }
    } else {
        for &v in &t.data()[..h * w] {
            out.push(quantize(v));
        }
    }
    Ok(out)
}

/// Writes a binary map (true → 255, false → 0) as P5.
pub fn save_binary_map(map: &[bool], h: usize, w: usize, path: &Path) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "binary map length {} vs {}×{}",
            map.len(),
            h,
            w
        )));
    }
    let data: Vec<f64> = map.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    save_image(&Tensor::from_vec(&[h, w], data)?, path)
}
