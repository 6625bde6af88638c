//! Contrast-limited adaptive histogram equalisation.
//!
//! The image is split into a `tiles_x x tiles_y` grid of `ceil(W/tiles_x) x
//! ceil(H/tiles_y)` tiles. When the grid overhangs the image, the overhang is
//! filled by reflect-101 mirroring so every tile holds the same number of
//! pixels. Each tile gets a clipped-histogram CDF lookup table; output pixels
//! blend the four nearest tables bilinearly.

use super::GrayImage;
use crate::error::{Error, Result};

const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            clip_limit: 2.0,
            tiles_x: 3,
            tiles_y: 3,
        }
    }
}

#[inline]
fn reflect101(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

struct Grid {
    tile_w: usize,
    tile_h: usize,
}

fn grid(img: &GrayImage, p: &ClaheParams) -> Result<Grid> {
    if p.tiles_x == 0 || p.tiles_y == 0 {
        return Err(Error::Param("CLAHE tile grid must be at least 1x1".into()));
    }
    if img.width() < p.tiles_x || img.height() < p.tiles_y {
        return Err(Error::Param(format!(
            "CLAHE needs an image of at least {}x{} for a {}x{} grid, got {}x{}",
            p.tiles_x,
            p.tiles_y,
            p.tiles_x,
            p.tiles_y,
            img.width(),
            img.height()
        )));
    }
    Ok(Grid {
        tile_w: img.width().div_ceil(p.tiles_x),
        tile_h: img.height().div_ceil(p.tiles_y),
    })
}

/// Clip threshold for a tile of `area` pixels.
pub(crate) fn clip_threshold(clip_limit: f64, area: usize) -> Option<u32> {
    (clip_limit > 0.0).then(|| ((clip_limit * area as f64 / BINS as f64).round() as u32).max(1))
}

fn tile_lut(hist: &mut [u32; BINS], area: usize, clip_limit: f64) -> [u8; BINS] {
    if let Some(clip) = clip_threshold(clip_limit, area) {
        let mut excess = 0u32;
        for h in hist.iter_mut() {
            if *h > clip {
                excess += *h - clip;
                *h = clip;
            }
        }
        let batch = excess / BINS as u32;
        let mut residual = excess % BINS as u32;
        for h in hist.iter_mut() {
            *h += batch;
        }
        if residual > 0 {
            let step = (BINS / residual as usize).max(1);
            let mut i = 0;
            while i < BINS && residual > 0 {
                hist[i] += 1;
                residual -= 1;
                i += step;
            }
        }
    }
    let scale = 255.0 / area as f64;
    let mut lut = [0u8; BINS];
    let mut cdf = 0u32;
    for (l, &h) in lut.iter_mut().zip(hist.iter()) {
        cdf += h;
        *l = (cdf as f64 * scale + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Per-tile lookup tables, row-major over the tile grid.
pub fn clahe_tile_luts(img: &GrayImage, p: &ClaheParams) -> Result<Vec<[u8; BINS]>> {
    let g = grid(img, p)?;
    let area = g.tile_w * g.tile_h;
    let mut luts = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let mut hist = [0u32; BINS];
            for y in ty * g.tile_h..(ty + 1) * g.tile_h {
                let row = reflect101(y, img.height()) * img.width();
                for x in tx * g.tile_w..(tx + 1) * g.tile_w {
                    hist[img.pixels()[row + reflect101(x, img.width())] as usize] += 1;
                }
            }
            luts.push(tile_lut(&mut hist, area, p.clip_limit));
        }
    }
    Ok(luts)
}

/// Neighbouring tile indices and blend weight along one axis.
#[inline]
fn neighbours(pos: usize, tile: usize, tiles: usize) -> (usize, usize, f64) {
    let f = pos as f64 / tile as f64 - 0.5;
    let lo = f.floor();
    let weight = f - lo;
    let lo_i = lo as isize;
    let a = lo_i.max(0) as usize;
    let b = ((lo_i + 1) as usize).min(tiles - 1);
    (a, b, weight)
}

pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage> {
    let g = grid(img, p)?;
    let luts = clahe_tile_luts(img, p)?;
    let xs: Vec<_> = (0..img.width()).map(|x| neighbours(x, g.tile_w, p.tiles_x)).collect();
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..img.height() {
        let (ty1, ty2, ya) = neighbours(y, g.tile_h, p.tiles_y);
        for (x, &(tx1, tx2, xa)) in xs.iter().enumerate() {
            let v = img.get(x, y) as usize;
            let l = |ty: usize, tx: usize| luts[ty * p.tiles_x + tx][v] as f64;
            let top = l(ty1, tx1) * (1.0 - xa) + l(ty1, tx2) * xa;
            let bottom = l(ty2, tx1) * (1.0 - xa) + l(ty2, tx2) * xa;
            let res = top * (1.0 - ya) + bottom * ya;
            out.push((res + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(img.width(), img.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        for (w, h, v) in [(9, 9, 0u8), (64, 48, 120), (100, 37, 255), (5, 4, 3)] {
            let img = GrayImage::filled(w, h, v);
            let out = clahe(&img, &ClaheParams::default()).unwrap();
            let first = out.pixels()[0];
            assert!(out.pixels().iter().all(|&p| p == first), "{w}x{h} value {v}");
        }
    }

    #[test]
    fn luts_are_monotone() {
        let mut s = 12345u64;
        let img = GrayImage::from_fn(50, 41, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) % 97) as u8
        });
        for lut in clahe_tile_luts(&img, &ClaheParams::default()).unwrap() {
            assert!(lut.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = GrayImage::filled(2, 10, 1);
        assert!(matches!(clahe(&img, &ClaheParams::default()), Err(Error::Param(_))));
    }

    #[test]
    fn clip_threshold_rounds_and_floors_at_one() {
        assert_eq!(clip_threshold(2.0, 1024), Some(8));
        assert_eq!(clip_threshold(2.0, 9), Some(1));
        assert_eq!(clip_threshold(2.0, 96), Some(1));
        assert_eq!(clip_threshold(0.0, 96), None);
    }
}
