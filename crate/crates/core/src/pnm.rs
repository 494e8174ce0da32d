//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Result, SpnError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for grey, 3 for RGB (interleaved).
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(SpnError::InvalidArgument(format!("cannot encode {c}-channel image"))),
    };
    if img.data.len() != img.width * img.height * img.channels {
        return Err(SpnError::Shape(format!(
            "{}x{}x{} image with {} bytes",
            img.width,
            img.height,
            img.channels,
            img.data.len()
        )));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Image> {
    let bad = |m: &str| SpnError::format(origin, m);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("bad magic (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = width * height * channels;
    if bytes.len() - pos != n {
        return Err(bad(&format!("expected {n} bytes of pixel data, found {}", bytes.len() - pos)));
    }
    Ok(Image { width, height, channels, data: bytes[pos..].to_vec() })
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| SpnError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| SpnError::io(path, e))
}
