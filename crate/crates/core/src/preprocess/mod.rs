//! Image preprocessing pipeline.
//!
//! Stages run in a fixed order: brightness/contrast, 3x3 median, CLAHE,
//! min-max normalisation, bounding-box mask, nearest-neighbour resize. The
//! first three operate on 8-bit images, the rest on unit-interval floats.

mod clahe;
mod io;

use crate::error::{Error, Result};

pub use clahe::{clahe, clahe_tile_luts, ClaheParams};
pub use io::{image_dimensions, read_gray, write_pgm};

/// 8-bit grayscale image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::shape("GrayImage", "pixel count", width * height, pixels.len()));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage::new(width, height, vec![value; width * height]).expect("positive dims")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage::new(width, height, pixels).expect("positive dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl std::fmt::Debug for FloatImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FloatImage({}x{})", self.width, self.height)
    }
}

impl FloatImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::shape("FloatImage", "pixel count", width * height, pixels.len()));
        }
        Ok(FloatImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Axis-aligned box in pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    /// Clamps a possibly out-of-range box (signed origin, any extent) to an
    /// image. Returns the clamped box and whether anything changed; `None`
    /// when nothing of the box lies inside the image.
    pub fn clamp_to(x: i64, y: i64, w: i64, h: i64, width: usize, height: usize) -> Option<(BBox, bool)> {
        let (iw, ih) = (width as i64, height as i64);
        let x0 = x.clamp(0, iw);
        let y0 = y.clamp(0, ih);
        let x1 = x.saturating_add(w).clamp(0, iw);
        let y1 = y.saturating_add(h).clamp(0, ih);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let b = BBox {
            x: x0 as usize,
            y: y0 as usize,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        };
        let changed = (x0, y0, x1 - x0, y1 - y0) != (x, y, w, h);
        Some((b, changed))
    }

    fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// Default output edge length of [`resize_nearest`] in the pipeline.
pub const TARGET_SIZE: usize = 224;

/// Pipeline parameters. [`Default`] gives the reference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub alpha: f64,
    pub beta: f64,
    pub median_kernel: usize,
    pub clahe: ClaheParams,
    pub output_size: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            alpha: 1.5,
            beta: 15.0,
            median_kernel: 3,
            clahe: ClaheParams::default(),
            output_size: TARGET_SIZE,
        }
    }
}

/// `round(alpha * p + beta)` saturated to `[0, 255]`, halves rounded up.
pub fn adjust_brightness(img: &GrayImage, alpha: f64, beta: f64) -> GrayImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (alpha * p as f64 + beta + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage {
        pixels,
        ..*img
    }
}

/// k x k median with replicate padding at the borders. `k` must be odd.
pub fn median_filter(img: &GrayImage, k: usize) -> Result<GrayImage> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Param(format!("median kernel size must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mid = k * k / 2;
    let mut out = vec![0u8; img.pixels.len()];
    // Sliding 256-bin histogram along each row.
    for y in 0..h {
        let mut hist = [0u32; 256];
        let clamp_row = |dy: isize| (y + dy).clamp(0, h - 1) as usize;
        let col = |x: isize| x.clamp(0, w - 1) as usize;
        for dy in -r..=r {
            let row = clamp_row(dy) * img.width;
            for dx in -r..=r {
                hist[img.pixels[row + col(dx)] as usize] += 1;
            }
        }
        for x in 0..w {
            if x > 0 {
                let (gone, new) = (col(x - r - 1), col(x + r));
                for dy in -r..=r {
                    let row = clamp_row(dy) * img.width;
                    hist[img.pixels[row + gone] as usize] -= 1;
                    hist[img.pixels[row + new] as usize] += 1;
                }
            }
            let mut seen = 0usize;
            for (v, &count) in hist.iter().enumerate() {
                seen += count as usize;
                if seen > mid {
                    out[y as usize * img.width + x as usize] = v as u8;
                    break;
                }
            }
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// `(p - min) / (max - min)`; a constant image maps to all zeros.
pub fn normalize_minmax(img: &GrayImage) -> FloatImage {
    let min = *img.pixels.iter().min().expect("non-empty image");
    let max = *img.pixels.iter().max().expect("non-empty image");
    let pixels = if max == min {
        vec![0.0; img.pixels.len()]
    } else {
        let span = (max - min) as f32;
        img.pixels.iter().map(|&p| (p - min) as f32 / span).collect()
    };
    FloatImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Zeroes every pixel outside `bbox`; the frame size is kept.
pub fn apply_mask(img: &FloatImage, bbox: BBox) -> Result<FloatImage> {
    if bbox.area() == 0 {
        return Err(Error::Param("mask box has zero area".into()));
    }
    if bbox.x + bbox.w > img.width || bbox.y + bbox.h > img.height {
        return Err(Error::Param(format!(
            "mask box {bbox:?} exceeds {}x{} image",
            img.width, img.height
        )));
    }
    let mut pixels = img.pixels.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if !bbox.contains(x, y) {
                pixels[y * img.width + x] = 0.0;
            }
        }
    }
    Ok(FloatImage { pixels, ..*img })
}

/// Nearest-neighbour resize: source index `floor(t * src / out)` per axis.
pub fn resize_nearest(img: &FloatImage, out_w: usize, out_h: usize) -> Result<FloatImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Param("resize target must be at least 1x1".into()));
    }
    let xs: Vec<usize> = (0..out_w).map(|t| t * img.width / out_w).collect();
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for ty in 0..out_h {
        let sy = ty * img.height / out_h;
        let row = &img.pixels[sy * img.width..][..img.width];
        pixels.extend(xs.iter().map(|&sx| row[sx]));
    }
    FloatImage::new(out_w, out_h, pixels)
}

/// Every intermediate image of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineStages {
    pub brightened: GrayImage,
    pub denoised: GrayImage,
    pub equalized: GrayImage,
    pub normalized: FloatImage,
    pub masked: FloatImage,
    pub resized: FloatImage,
}

pub fn run_pipeline_stages(img: &GrayImage, bbox: BBox, params: &PipelineParams) -> Result<PipelineStages> {
    let brightened = adjust_brightness(img, params.alpha, params.beta);
    let denoised = median_filter(&brightened, params.median_kernel)?;
    let equalized = clahe(&denoised, &params.clahe)?;
    let normalized = normalize_minmax(&equalized);
    let masked = apply_mask(&normalized, bbox)?;
    let resized = resize_nearest(&masked, params.output_size, params.output_size)?;
    Ok(PipelineStages {
        brightened,
        denoised,
        equalized,
        normalized,
        masked,
        resized,
    })
}

/// Runs all six stages and returns the final square float image.
pub fn run_pipeline(img: &GrayImage, bbox: BBox, params: &PipelineParams) -> Result<FloatImage> {
    Ok(run_pipeline_stages(img, bbox, params)?.resized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> u8 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as u8
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut r = lcg(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| r()).collect()).unwrap()
    }

    #[test]
    fn brightness_values() {
        let img = GrayImage::new(3, 1, vec![0, 100, 200]).unwrap();
        assert_eq!(adjust_brightness(&img, 1.5, 15.0).pixels(), &[15, 165, 255]);
        // 1.5 * 1 + 15 = 16.5 rounds up.
        let img = GrayImage::new(1, 1, vec![1]).unwrap();
        assert_eq!(adjust_brightness(&img, 1.5, 15.0).pixels(), &[17]);
    }

    #[test]
    fn median_removes_salt() {
        let mut px = vec![0u8; 25];
        px[12] = 255;
        let img = GrayImage::new(5, 5, px).unwrap();
        assert!(median_filter(&img, 3).unwrap().pixels().iter().all(|&p| p == 0));
        let c = GrayImage::filled(7, 4, 90);
        assert_eq!(median_filter(&c, 3).unwrap(), c);
        assert!(matches!(median_filter(&c, 4), Err(Error::Param(_))));
    }

    fn median_oracle(img: &GrayImage, k: usize) -> GrayImage {
        let r = (k / 2) as isize;
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            let mut v = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, img.width() as isize - 1) as usize;
                    let sy = (y as isize + dy).clamp(0, img.height() as isize - 1) as usize;
                    v.push(img.get(sx, sy));
                }
            }
            v.sort_unstable();
            v[v.len() / 2]
        })
    }

    #[test]
    fn median_matches_sort_oracle() {
        for seed in 0..5 {
            let img = noise(16, 16, seed);
            assert_eq!(median_filter(&img, 3).unwrap(), median_oracle(&img, 3));
            assert_eq!(median_filter(&img, 5).unwrap(), median_oracle(&img, 5));
        }
        let tiny = noise(1, 1, 3);
        assert_eq!(median_filter(&tiny, 3).unwrap(), tiny);
    }

    #[test]
    fn normalize_cases() {
        let img = GrayImage::new(3, 1, vec![10, 60, 110]).unwrap();
        assert_eq!(normalize_minmax(&img).pixels(), &[0.0, 0.5, 1.0]);
        let c = GrayImage::filled(4, 4, 77);
        assert!(normalize_minmax(&c).pixels().iter().all(|&v| v == 0.0));
        let full = GrayImage::from_fn(256, 1, |x, _| x as u8);
        let n = normalize_minmax(&full);
        assert_eq!(n.pixels()[0], 0.0);
        assert_eq!(n.pixels()[255], 1.0);
    }

    #[test]
    fn mask_cases() {
        let img = normalize_minmax(&noise(10, 8, 4));
        assert_eq!(apply_mask(&img, BBox::full(10, 8)).unwrap(), img);
        let b = BBox { x: 2, y: 3, w: 4, h: 2 };
        let m = apply_mask(&img, b).unwrap();
        let region: f32 = (3..5).flat_map(|y| (2..6).map(move |x| (x, y))).map(|(x, y)| img.get(x, y)).sum();
        assert!((m.pixels().iter().sum::<f32>() - region).abs() < 1e-5);
        let one = apply_mask(&img, BBox { x: 9, y: 7, w: 1, h: 1 }).unwrap();
        assert_eq!(one.pixels().iter().filter(|&&v| v != 0.0).count() <= 1, true);
        assert!(matches!(apply_mask(&img, BBox { x: 0, y: 0, w: 0, h: 3 }), Err(Error::Param(_))));
    }

    #[test]
    fn resize_quadrants() {
        let img = FloatImage::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = resize_nearest(&img, 224, 224).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let want = [0.1, 0.2, 0.3, 0.4][(y / 112) * 2 + x / 112];
                assert_eq!(r.get(x, y), want);
            }
        }
        let same = normalize_minmax(&noise(224, 224, 2));
        assert_eq!(resize_nearest(&same, 224, 224).unwrap(), same);
    }

    #[test]
    fn clamp_box() {
        assert_eq!(BBox::clamp_to(5, 5, 10, 10, 100, 100), Some((BBox { x: 5, y: 5, w: 10, h: 10 }, false)));
        assert_eq!(BBox::clamp_to(-3, 90, 10, 20, 100, 100), Some((BBox { x: 0, y: 90, w: 7, h: 10 }, true)));
        assert_eq!(BBox::clamp_to(120, 0, 10, 10, 100, 100), None);
    }

    #[test]
    fn pipeline_constant_image_is_zero() {
        let img = GrayImage::filled(64, 48, 120);
        let out = run_pipeline(&img, BBox::full(64, 48), &PipelineParams::default()).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }
}
