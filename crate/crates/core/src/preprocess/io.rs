use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::DynamicImage;

use super::GrayImage;
use crate::error::{Error, Result};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

/// Reads a PNG or binary PGM as 8-bit grayscale. Colour images are reduced
/// with `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_luma8().into_raw()
        }
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().min(255.0) as u8
            })
            .collect(),
    };
    GrayImage::new(w, h, pixels)
}

pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| image_err(path, e))?;
    Ok((w as usize, h as usize))
}

/// Writes a binary (P5) PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height())
        .and_then(|_| out.write_all(img.pixels()))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}
