//! Drawing → binary raster conversion.
//!
//! Strokes are painted on the 256×256 source grid as round-capped thick
//! segments: a pixel is ink iff the distance from its center to some
//! segment (or isolated point) is at most `line_width / 2`. The source grid
//! is then reduced to `image_size` by blocks and binarized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stroke::Drawing;
use crate::tensor::Tensor;

/// Source canvas side, in pixels.
pub const SOURCE_CANVAS: usize = 256;
pub const IMAGE_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const LINE_WIDTHS: [u32; 3] = [2, 4, 6];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("image size {0} is not one of 32, 64, 128, 256")]
    UnsupportedImageSize(usize),
    #[error("line width must be at least 1")]
    InvalidLineWidth,
    #[error("drawing produced no ink")]
    EmptyDrawing,
}

/// How a block of source pixels collapses into one output cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downscale {
    /// Cell is ink if any source pixel in its block is ink.
    #[default]
    AnyInk,
    /// Block mean rounded half-up: ink iff at least half the block is ink.
    AreaRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RasterConfig {
    pub image_size: usize,
    pub line_width: u32,
    #[serde(default)]
    pub downscale: Downscale,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            image_size: 32,
            line_width: 6,
            downscale: Downscale::AnyInk,
        }
    }
}

impl RasterConfig {
    pub fn new(image_size: usize, line_width: u32) -> Result<Self, RasterError> {
        let cfg = RasterConfig {
            image_size,
            line_width,
            downscale: Downscale::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_downscale(mut self, downscale: Downscale) -> Self {
        self.downscale = downscale;
        self
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(RasterError::UnsupportedImageSize(self.image_size));
        }
        if self.line_width < 1 {
            return Err(RasterError::InvalidLineWidth);
        }
        Ok(())
    }

    /// Source pixels per output cell along one axis.
    pub fn block(&self) -> usize {
        SOURCE_CANVAS / self.image_size
    }
}

/// Square binary image, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    pub size: usize,
    pub values: Vec<u8>,
}

impl RasterImage {
    pub fn new(size: usize, values: Vec<u8>) -> Self {
        assert_eq!(values.len(), size * size, "raster length must be size²");
        debug_assert!(values.iter().all(|&v| v <= 1));
        RasterImage { size, values }
    }

    pub fn zeros(size: usize) -> Self {
        RasterImage::new(size, vec![0; size * size])
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.size + col]
    }

    pub fn ink_count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Shape `[1, size, size]`, values 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![1, self.size, self.size],
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn mirrored(&self) -> RasterImage {
        let n = self.size;
        let mut out = vec![0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + (n - 1 - c)] = self.values[r * n + c];
            }
        }
        RasterImage::new(n, out)
    }
}

pub fn squared_distance_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// The segments a drawing paints: consecutive point pairs inside each
/// stroke, and degenerate `(p, p)` segments for one-point strokes. Strokes
/// are never joined to each other.
pub fn segments(d: &Drawing) -> Vec<((f64, f64), (f64, f64))> {
    let mut out = Vec::new();
    for s in &d.strokes {
        match s.len() {
            0 => {}
            1 => out.push(((s[0].x, s[0].y), (s[0].x, s[0].y))),
            _ => out.extend(s.windows(2).map(|w| ((w[0].x, w[0].y), (w[1].x, w[1].y)))),
        }
    }
    out
}

/// Paints the drawing on the 256×256 source grid (1 = ink).
pub fn source_mask(d: &Drawing, line_width: u32) -> Vec<u8> {
    let n = SOURCE_CANVAS;
    let r = line_width as f64 / 2.0;
    let r2 = r * r;
    let mut mask = vec![0u8; n * n];
    for (a, b) in segments(d) {
        // Pixel i has center i + 0.5; only centers within r of the segment's
        // bounding box can be ink.
        let lo = |v: f64| ((v - r - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + r - 0.5).ceil().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (lo(a.0.min(b.0)), hi(a.0.max(b.0)));
        let (y0, y1) = (lo(a.1.min(b.1)), hi(a.1.max(b.1)));
        for row in y0..=y1 {
            let py = row as f64 + 0.5;
            for col in x0..=x1 {
                let cell = &mut mask[row * n + col];
                if *cell == 0 && squared_distance_to_segment(col as f64 + 0.5, py, a, b) <= r2 {
                    *cell = 1;
                }
            }
        }
    }
    mask
}

/// Collapses a source mask into `cfg.image_size` cells.
pub fn downscale(mask: &[u8], cfg: &RasterConfig) -> RasterImage {
    let n = SOURCE_CANVAS;
    let size = cfg.image_size;
    let block = cfg.block();
    let mut counts = vec![0usize; size * size];
    for row in 0..n {
        let out_row = (row / block) * size;
        for col in 0..n {
            counts[out_row + col / block] += mask[row * n + col] as usize;
        }
    }
    let area = block * block;
    let values = counts
        .into_iter()
        .map(|c| match cfg.downscale {
            Downscale::AnyInk => (c > 0) as u8,
            Downscale::AreaRound => (2 * c >= area) as u8,
        })
        .collect();
    RasterImage::new(size, values)
}

/// Renders a validated drawing.
pub fn rasterize(d: &Drawing, cfg: &RasterConfig) -> Result<RasterImage, RasterError> {
    cfg.validate()?;
    let img = downscale(&source_mask(d, cfg.line_width), cfg);
    if img.ink_count() == 0 {
        return Err(RasterError::EmptyDrawing);
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    /// ASCII.
    P2,
    /// Binary.
    P5,
}

/// Encodes as a portable graymap with maxval 255 (ink = 255).
pub fn to_pgm(img: &RasterImage, format: PgmFormat) -> Vec<u8> {
    let n = img.size;
    let level = |v: u8| if v == 1 { 255u8 } else { 0 };
    match format {
        PgmFormat::P2 => {
            let mut s = format!("P2\n{n} {n}\n255\n");
            for row in img.values.chunks(n) {
                let line: Vec<String> = row.iter().map(|&v| level(v).to_string()).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
            s.into_bytes()
        }
        PgmFormat::P5 => {
            let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
            out.extend(img.values.iter().map(|&v| level(v)));
            out
        }
    }
}
