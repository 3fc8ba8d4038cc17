use std::io::{Read, Write};

use super::ImageTensor;
use crate::error::{IapError, Result};
use crate::scalar::Real;

pub const IAPI_MAGIC: &[u8; 4] = b"IAPI";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IapError::Format(msg.into()))
}

/// Reads the raw image format: `"IAPI"`, then little-endian `u32` height,
/// width and channels, then `H*W*C` little-endian `f32` values.
pub fn read_iapi<T: Real>(mut r: impl Read) -> Result<ImageTensor<T>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != IAPI_MAGIC {
        return format_err("bad magic, expected IAPI");
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(1), word(2), word(3));
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| IapError::Format("image dims overflow".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    ImageTensor::new(h, w, c, data)
}

pub fn write_iapi<T: Real>(img: &ImageTensor<T>, mut w: impl Write) -> Result<()> {
    w.write_all(IAPI_MAGIC)?;
    for v in [img.height(), img.width(), img.channels()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in img.data() {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a binary (`P6`) or ASCII (`P3`) PPM into an RGB image scaled to `[0, 1]`.
pub fn read_ppm<T: Real>(mut r: impl Read) -> Result<ImageTensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PPM header");
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| IapError::Format(format!("bad PPM number {s:?}")))
    };
    let w = num(token(&bytes)?)?;
    let h = num(token(&bytes)?)?;
    let maxval = num(token(&bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return format_err(format!("PPM maxval {maxval} out of range"));
    }
    let n = w * h * 3;
    let scale = 1.0 / maxval as f64;
    let samples: Vec<usize> = match magic.as_str() {
        "P3" => (0..n)
            .map(|_| token(&bytes).and_then(num))
            .collect::<Result<_>>()?,
        "P6" => {
            // exactly one whitespace byte separates maxval from the raster
            let start = pos + 1;
            let width = if maxval < 256 { 1 } else { 2 };
            let raster = bytes
                .get(start..start + n * width)
                .ok_or_else(|| IapError::Format("truncated PPM raster".into()))?;
            if width == 1 {
                raster.iter().map(|&b| b as usize).collect()
            } else {
                raster
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
                    .collect()
            }
        }
        other => return format_err(format!("unsupported PPM magic {other:?}")),
    };
    if samples.iter().any(|&s| s > maxval) {
        return format_err("PPM sample exceeds maxval");
    }
    ImageTensor::new(
        h,
        w,
        3,
        samples
            .into_iter()
            .map(|s| T::lit(s as f64 * scale))
            .collect(),
    )
}
