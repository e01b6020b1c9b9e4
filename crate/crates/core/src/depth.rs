//! Per-pixel disparity, depth and uncertainty rasters.

use crate::camera::{self, CameraIntrinsics, MIN_DISPARITY};
use crate::error::{Error, Result};

/// Per-pixel stereo disparity in pixels, bounded by a configured maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    d_max: f64,
}

impl DisparityMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>, d_max: f64) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "disparity data length {} != {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > d_max) {
            return Err(Error::NonFiniteValue("disparity outside [0, d_max]"));
        }
        Ok(Self { width, height, values, d_max })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear sample with edge clamping; disparity fields are smooth enough
    /// for the left-right consistency lookups this serves.
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

    /// Converts to metric depth; pixels at or below the minimum disparity are
    /// flagged invalid rather than mapped to unbounded depth.
    pub fn to_depth(&self, intrinsics: &CameraIntrinsics) -> Result<DepthMap> {
        let zf = intrinsics.baseline()? * intrinsics.fx;
        let mut values = vec![0.0; self.values.len()];
        let mut valid = vec![false; self.values.len()];
        for (i, d) in self.values.iter().enumerate() {
            if *d > MIN_DISPARITY {
                values[i] = zf / d;
                valid[i] = true;
            }
        }
        DepthMap::from_parts(self.width, self.height, values, valid)
    }
}

/// Per-pixel metric depth with an explicit validity flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn from_parts(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth data length {}/{} != {}x{}",
                values.len(),
                valid.len(),
                width,
                height
            )));
        }
        for (v, ok) in values.iter().zip(&valid) {
            if *ok && (!v.is_finite() || *v <= 0.0) {
                return Err(Error::NonFiniteValue("valid depth must be positive and finite"));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    /// All-valid constant depth map.
    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_parts(width, height, vec![depth; width * height], vec![true; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Nearest-neighbor upsample by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<DepthMap> {
        if factor == 0 {
            return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
        }
        let (w, h) = (self.width * factor, self.height * factor);
        let mut values = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let src = (y / factor) * self.width + x / factor;
                values[y * w + x] = self.values[src];
                valid[y * w + x] = self.valid[src];
            }
        }
        DepthMap::from_parts(w, h, values, valid)
    }

    /// Converts valid pixels back to disparity, clamping into `(0, d_max]`.
    pub fn to_disparity(&self, intrinsics: &CameraIntrinsics, d_max: f64) -> Result<DisparityMap> {
        let mut out = vec![0.0; self.values.len()];
        for (i, v) in self.values.iter().enumerate() {
            if self.valid[i] {
                out[i] = camera::depth_to_disparity(*v, intrinsics)?.min(d_max);
            }
        }
        DisparityMap::from_values(self.width, self.height, out, d_max)
    }
}

/// Per-pixel variance proxy for predicted depth.
///
/// Values live in the disparity (inverse-depth) domain: the left-right
/// inconsistency that produces them is measured in pixels of disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "uncertainty data length {} != {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteValue("uncertainty must be non-negative and finite"));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_values(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<UncertaintyMap> {
        if factor == 0 {
            return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
        }
        let (w, h) = (self.width * factor, self.height * factor);
        let mut values = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                values[y * w + x] = self.values[(y / factor) * self.width + x / factor];
            }
        }
        UncertaintyMap::from_values(w, h, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stereo() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 8.0, 8.0, Some(0.5)).unwrap()
    }

    #[test]
    fn disparity_bounds_enforced() {
        assert!(DisparityMap::from_values(2, 2, vec![0.0, 1.0, 2.0, 3.0], 3.0).is_ok());
        assert!(DisparityMap::from_values(2, 2, vec![0.0, 1.0, 2.0, 3.1], 3.0).is_err());
        assert!(DisparityMap::from_values(2, 2, vec![-0.1, 1.0, 2.0, 3.0], 3.0).is_err());
    }

    #[test]
    fn to_depth_flags_zero_disparity() {
        let d = DisparityMap::from_values(2, 1, vec![50.0, 0.0], 64.0).unwrap();
        let depth = d.to_depth(&stereo()).unwrap();
        assert_relative_eq!(depth.get(0, 0).unwrap(), 1.0, epsilon = 1e-12);
        assert!(depth.get(1, 0).is_none());
        assert_eq!(depth.valid_count(), 1);
    }

    #[test]
    fn depth_rejects_nonpositive_valid_pixels() {
        assert!(DepthMap::from_parts(1, 2, vec![1.0, 0.0], vec![true, true]).is_err());
        // Invalid pixels may hold anything.
        assert!(DepthMap::from_parts(1, 2, vec![1.0, 0.0], vec![true, false]).is_ok());
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let d = DepthMap::from_parts(2, 1, vec![1.0, 2.0], vec![true, false]).unwrap();
        let up = d.upsample_nearest(2).unwrap();
        assert_eq!((up.width(), up.height()), (4, 2));
        assert_eq!(up.get(1, 1), Some(1.0));
        assert_eq!(up.get(2, 0), None);
    }
}
