//! Depth-based image warping between camera views.

use crate::camera::{project, unproject, CameraIntrinsics};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::par;
use crate::se3::PoseSE3;

/// Warps `source` into the target view.
///
/// Each target pixel with valid depth is unprojected, moved by
/// `relative_pose` (target frame into source frame), reprojected and
/// bilinearly sampled from `source`. Pixels that land behind the camera or
/// more than half a pixel outside `source` are masked invalid; masked pixels
/// carry intensity 0.
pub fn warp_image(
    source: &ImageBuffer,
    target_depth: &DepthMap,
    relative_pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> Result<(ImageBuffer, Vec<bool>)> {
    if source.width() != target_depth.width() || source.height() != target_depth.height() {
        return Err(Error::DimensionMismatch(format!(
            "source {}x{} vs depth {}x{}",
            source.width(),
            source.height(),
            target_depth.width(),
            target_depth.height()
        )));
    }
    let (w, h) = (source.width(), source.height());

    let rows = par::map_indexed(h, |y| {
        let mut vals = vec![0.0f64; w];
        let mut mask = vec![false; w];
        for x in 0..w {
            let Some(depth) = target_depth.get(x, y) else {
                continue;
            };
            let p = unproject(x as f64, y as f64, depth, intrinsics)
                .expect("valid depth is positive");
            let q = relative_pose.transform(&p);
            if q.z <= 0.0 {
                continue;
            }
            let (u, v) = project(&q, intrinsics).expect("z checked above");
            if !source.sample_valid(u, v) {
                continue;
            }
            vals[x] = source.sample_bilinear(u, v);
            mask[x] = true;
        }
        (vals, mask)
    });

    let mut data = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for (vals, row_mask) in rows {
        data.extend_from_slice(&vals);
        mask.extend_from_slice(&row_mask);
    }
    Ok((ImageBuffer::from_data(w, h, data)?, mask))
}
