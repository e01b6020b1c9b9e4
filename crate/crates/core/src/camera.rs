//! Pinhole camera model and the disparity/depth conversion.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum disparity accepted by [`disparity_to_depth`]; below this the depth
/// is treated as undefined rather than blowing up toward the horizon.
pub const MIN_DISPARITY: f64 = 1e-3;

/// Pinhole intrinsics, with the stereo baseline when the rig has one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels, x.
    pub fx: f64,
    /// Focal length in pixels, y.
    pub fy: f64,
    /// Principal point, x.
    pub cx: f64,
    /// Principal point, y.
    pub cy: f64,
    /// Stereo baseline in meters; `None` for a plain monocular rig.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: Option<f64>) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if let Some(b) = baseline {
            if b <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "baseline must be positive, got {b}"
                )));
            }
        }
        Ok(Self { fx, fy, cx, cy, baseline })
    }

    /// Baseline, erroring for monocular rigs.
    pub fn baseline(&self) -> Result<f64> {
        self.baseline
            .ok_or_else(|| Error::InvalidConfig("intrinsics carry no stereo baseline".into()))
    }

    /// Intrinsics rescaled to a different image resolution.
    pub fn scaled(&self, sx: f64, sy: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            // Pixel centers: (u + 0.5) scales, not u itself.
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            baseline: self.baseline,
        }
    }
}

/// Depth from stereo disparity: `depth = baseline * fx / d`.
pub fn disparity_to_depth(d: f64, intrinsics: &CameraIntrinsics) -> Result<f64> {
    if d <= MIN_DISPARITY {
        return Err(Error::NonPositiveDisparity(d, MIN_DISPARITY));
    }
    Ok(intrinsics.baseline()? * intrinsics.fx / d)
}

/// Disparity from depth, the algebraic inverse of [`disparity_to_depth`].
pub fn depth_to_disparity(depth: f64, intrinsics: &CameraIntrinsics) -> Result<f64> {
    if depth <= 0.0 {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(intrinsics.baseline()? * intrinsics.fx / depth)
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project(point: &Vector3<f64>, intrinsics: &CameraIntrinsics) -> Result<(f64, f64)> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera(point.z));
    }
    Ok((
        intrinsics.fx * point.x / point.z + intrinsics.cx,
        intrinsics.fy * point.y / point.z + intrinsics.cy,
    ))
}

/// Back-projects a pixel at the given depth into the camera frame.
pub fn unproject(u: f64, v: f64, depth: f64, intrinsics: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (u - intrinsics.cx) / intrinsics.fx * depth,
        (v - intrinsics.cy) / intrinsics.fy * depth,
        depth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stereo() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, Some(0.5)).unwrap()
    }

    #[test]
    fn disparity_depth_direct_values() {
        let k = stereo();
        assert_relative_eq!(disparity_to_depth(50.0, &k).unwrap(), 1.0, epsilon = 1e-12);
        // d = z * fx numerically gives exactly 1 m.
        assert_relative_eq!(disparity_to_depth(0.5 * 100.0, &k).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(depth_to_disparity(1.0, &k).unwrap(), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn disparity_guards() {
        let k = stereo();
        assert!(matches!(
            disparity_to_depth(1e-6, &k),
            Err(Error::NonPositiveDisparity(_, _))
        ));
        assert!(matches!(depth_to_disparity(0.0, &k), Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn projection_fixed_points() {
        let k = stereo();
        let (u, v) = project(&Vector3::new(0.0, 0.0, 2.0), &k).unwrap();
        assert_relative_eq!(u, 64.0, epsilon = 1e-12);
        assert_relative_eq!(v, 64.0, epsilon = 1e-12);

        let (u, _) = project(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_relative_eq!(u, 114.0, epsilon = 1e-12);

        let p = unproject(64.0, 64.0, 2.0, &k).unwrap();
        assert_relative_eq!((p - Vector3::new(0.0, 0.0, 2.0)).norm(), 0.0, epsilon = 1e-12);

        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &k),
            Err(Error::BehindCamera(_))
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_depth_disparity(depth in 0.05f64..500.0) {
            let k = stereo();
            let d = depth_to_disparity(depth, &k).unwrap();
            let back = disparity_to_depth(d, &k).unwrap();
            prop_assert!((back - depth).abs() / depth < 1e-9);
        }

        #[test]
        fn disparity_to_depth_strictly_decreasing(d in 0.01f64..1000.0, step in 0.001f64..10.0) {
            let k = stereo();
            let a = disparity_to_depth(d, &k).unwrap();
            let b = disparity_to_depth(d + step, &k).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn project_unproject_roundtrip(
            x in -50.0f64..50.0,
            y in -50.0f64..50.0,
            z in 0.1f64..100.0,
        ) {
            let k = stereo();
            let p = Vector3::new(x, y, z);
            let (u, v) = project(&p, &k).unwrap();
            let q = unproject(u, v, z, &k).unwrap();
            prop_assert!((p - q).norm() < 1e-9);
        }
    }
}
