//! Binary netpbm I/O: P6 for RGB images, P5 for single-channel maps. Only
//! 8-bit payloads (maxval 255) are supported.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::to_byte;
use crate::tensor::Tensor;

/// Planes and extents of a tensor whose last two axes are spatial and whose
/// leading axes multiply to `planes`.
fn planes_of(t: &Tensor, planes: usize, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::dim(format!("{what} needs a spatial tensor, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if s[..s.len() - 2].iter().product::<usize>() != planes || h == 0 || w == 0 {
        return Err(Error::dim(format!("{what} needs {planes} plane(s) of positive extent, got {s:?}")));
    }
    Ok((h, w))
}

fn header(magic: &str, h: usize, w: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Encodes a `3×H×W` (or `1×3×H×W`) image in `[0,1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = planes_of(image, 3, "PPM")?;
    let d = image.data();
    let n = h * w;
    let mut out = header("P6", h, w);
    out.reserve(3 * n);
    for i in 0..n {
        out.extend((0..3).map(|c| to_byte(d[c * n + i])));
    }
    Ok(out)
}

/// Encodes an `H×W` map (any leading unit axes) in `[0,1]` as P5.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = planes_of(map, 1, "PGM")?;
    let mut out = header("P5", h, w);
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
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
            let message = match self.bytes.get(self.pos) {
                None => format!("unexpected end of header, expected {what}"),
                Some(b) => format!("expected {what}, found byte 0x{b:02x}"),
            };
            return Err(Error::Parse { offset: self.pos, message });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} {text} out of range"),
        })
    }
}

/// Decodes a P5 or P6 file into `(height, width, bytes)`.
fn decode(bytes: &[u8], magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "file too short for a magic number".into(),
        });
    }
    if &bytes[..2] != magic.as_bytes() {
        return Err(Error::Format(format!(
            "expected magic {magic}, found {:?}",
            String::from_utf8_lossy(&bytes[..2])
        )));
    }
    let channels: usize = if magic == "P6" { 3 } else { 1 };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} at byte {maxval_at}: only 8-bit files are supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("zero extent {w}x{h}"),
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(b) => {
            return Err(Error::Parse {
                offset: cur.pos,
                message: format!("expected whitespace after maxval, found byte 0x{b:02x}"),
            })
        }
        None => {
            return Err(Error::Parse {
                offset: cur.pos,
                message: "unexpected end of header".into(),
            })
        }
    }
    let need = channels
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| Error::Parse {
            offset: maxval_at,
            message: format!("extent {w}x{h} overflows"),
        })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated pixel data: {} of {need} bytes", payload.len()),
        });
    }
    Ok((h, w, payload[..need].to_vec()))
}

/// Decodes a P6 file into a `3×H×W` tensor of `byte/255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, px) = decode(bytes, "P6")?;
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Decodes a P5 file into a `1×H×W` tensor of `byte/255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, px) = decode(bytes, "P5")?;
    Tensor::new(&[1, h, w], px.iter().map(|&b| f64::from(b) / 255.0).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path`, creating missing parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn located(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?).map_err(|e| located(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read(path)?).map_err(|e| located(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pgm(map)?)
}
