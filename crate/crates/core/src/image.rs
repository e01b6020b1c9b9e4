//! Single-channel intensity images.

use crate::error::{Error, Result};

/// Row-major grayscale raster with intensities in `[0, 1]`.
///
/// Immutable after construction; cheap to clone and safe to share between
/// workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image from row-major data, validating length, finiteness and range.
    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::NonFiniteValue("image intensity outside [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    /// Constant-intensity image.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::from_data(width, height, vec![value; width * height])
            .expect("constant fill is always valid")
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    /// Signed-index read with edge clamping.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at `(u, v)` in pixel coordinates, clamping to the edge.
    ///
    /// `(0, 0)` is the center of the top-left pixel.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, self.width as f64 - 1.0);
        let v = v.clamp(0.0, self.height as f64 - 1.0);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let top = (1.0 - ax) * self.get(x0, y0) + ax * self.get(x1, y0);
        let bot = (1.0 - ax) * self.get(x0, y1) + ax * self.get(x1, y1);
        (1.0 - ay) * top + ay * bot
    }

    /// Whether `(u, v)` lies within half a pixel of the sampled grid.
    ///
    /// Samples farther out are edge-clamped but should be masked invalid.
    pub fn sample_valid(&self, u: f64, v: f64) -> bool {
        u >= -0.5
            && v >= -0.5
            && u <= self.width as f64 - 0.5
            && v <= self.height as f64 - 0.5
    }

    /// Central-difference gradient `(d/dx, d/dy)` at integer pixel `(x, y)`.
    ///
    /// Uses one-sided differences at the borders.
    pub fn gradient(&self, x: usize, y: usize) -> (f64, f64) {
        let (xi, yi) = (x as i64, y as i64);
        let xm = self.get_clamped(xi - 1, yi);
        let xp = self.get_clamped(xi + 1, yi);
        let ym = self.get_clamped(xi, yi - 1);
        let yp = self.get_clamped(xi, yi + 1);
        let dx_den = if x == 0 || x == self.width - 1 { 1.0 } else { 2.0 };
        let dy_den = if y == 0 || y == self.height - 1 { 1.0 } else { 2.0 };
        ((xp - xm) / dx_den, (yp - ym) / dy_den)
    }

    /// Gradient magnitude at `(x, y)`.
    pub fn gradient_magnitude(&self, x: usize, y: usize) -> f64 {
        let (gx, gy) = self.gradient(x, y);
        (gx * gx + gy * gy).sqrt()
    }

    /// Box-filter downscale by an integer factor along both axes.
    ///
    /// Width and height must be divisible by the factor.
    pub fn downscale_box(&self, factor: usize) -> Result<ImageBuffer> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} not divisible by downscale factor {}",
                self.width, self.height, factor
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = 1.0 / (factor * factor) as f64;
        Ok(ImageBuffer::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(x * factor + dx, y * factor + dy);
                }
            }
            acc * inv
        }))
    }

    /// Half-resolution pyramid level: 2x2 box filter, rounding odd extents down.
    pub fn half_size(&self) -> ImageBuffer {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        ImageBuffer::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            let x1 = (x0 + 1).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            0.25 * (self.get(x0, y0) + self.get(x1, y0) + self.get(x0, y1) + self.get(x1, y1))
        })
    }

    /// Global intensity offset, clamped back to `[0, 1]`.
    pub fn offset(&self, c: f64) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, |x, y| self.get(x, y) + c)
    }
}
