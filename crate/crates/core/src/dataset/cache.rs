//! Preprocessed-sample cache files.
//!
//! One file per sample: a 16-byte header (`RDXS`, version, height, width as
//! little-endian `u32`) followed by `height * width` little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::preprocess::FloatImage;

pub const SAMPLE_MAGIC: &[u8; 4] = b"RDXS";
pub const SAMPLE_VERSION: u32 = 1;

pub fn encode_sample(img: &FloatImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.pixels().len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for v in img.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8]) -> std::result::Result<FloatImage, String> {
    if bytes.len() < 16 {
        return Err(format!("sample file too short ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err("bad magic, expected RDXS".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = word(4);
    if version != SAMPLE_VERSION as usize {
        return Err(format!("unsupported sample version {version}"));
    }
    let (h, w) = (word(8), word(12));
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(format!("expected {} payload bytes for {h}x{w}, found {}", h * w * 4, body.len()));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FloatImage::new(w, h, pixels).map_err(|e| e.to_string())
}

pub fn write_sample(path: &Path, img: &FloatImage) -> Result<()> {
    write_atomic(path, &encode_sample(img))
}

pub fn read_sample(path: &Path) -> Result<FloatImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes).map_err(|msg| Error::Image {
        path: path.to_path_buf(),
        msg,
    })
}
