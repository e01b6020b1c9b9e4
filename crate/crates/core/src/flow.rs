//! Sparse pyramidal Lucas-Kanade optical flow.
//!
//! Tracks keypoints between two frames by iteratively solving the 2x2
//! normal equations of the local brightness-constancy model on each pyramid
//! level, coarse to fine. Points whose spatial gradient matrix is close to
//! singular (the aperture problem) are flagged invalid. The pipeline uses
//! the median flow to seed pose alignment with a small-angle rotation
//! guess.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::keypoints::KeypointList;
use crate::par;

/// Lucas-Kanade parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Window side length; odd, at least 3.
    pub window: usize,
    pub pyramid_levels: usize,
    pub iterations: usize,
    /// Minimum eigenvalue of the mean structure tensor below which a point
    /// is untrackable.
    pub min_eigenvalue: f64,
    /// Update-norm early stop per level, in pixels.
    pub epsilon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            window: 7,
            pyramid_levels: 3,
            iterations: 10,
            min_eigenvalue: 1e-4,
            epsilon: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "flow window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.pyramid_levels == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig(
                "pyramid levels and iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Search-range bound: flow larger than this cannot be produced by the
    /// pyramid and is discarded as invalid.
    pub fn max_flow(&self) -> f64 {
        (1usize << self.pyramid_levels) as f64 * self.window as f64
    }
}

/// Flow of one tracked keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEntry {
    pub u: f64,
    pub v: f64,
    pub du: f64,
    pub dv: f64,
    pub valid: bool,
}

/// Sparse flow entries at the tracked keypoints.
pub type FlowField = Vec<FlowEntry>;

fn build_pyramid(img: &ImageBuffer, levels: usize) -> Vec<ImageBuffer> {
    let mut pyr = vec![img.clone()];
    for _ in 1..levels {
        let prev = pyr.last().expect("non-empty");
        if prev.width() < 8 || prev.height() < 8 {
            break;
        }
        pyr.push(prev.half_size());
    }
    pyr
}

/// Tracks `points` from `prev` into `next`.
pub fn lucas_kanade(
    prev: &ImageBuffer,
    next: &ImageBuffer,
    points: &KeypointList,
    config: &FlowConfig,
) -> Result<FlowField> {
    config.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::DimensionMismatch(format!(
            "frames {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }

    let prev_pyr = build_pyramid(prev, config.pyramid_levels);
    let next_pyr = build_pyramid(next, config.pyramid_levels);
    let levels = prev_pyr.len();
    let radius = (config.window / 2) as f64;
    let max_flow = config.max_flow();

    let entries = par::map_indexed(points.len(), |pi| {
        let point = points[pi];
        let mut entry = FlowEntry { u: point.u, v: point.v, du: 0.0, dv: 0.0, valid: false };

        let mut gx_flow = 0.0f64;
        let mut gy_flow = 0.0f64;
        let mut ok = true;

        for level in (0..levels).rev() {
            let scale = (1usize << level) as f64;
            let p_img = &prev_pyr[level];
            let n_img = &next_pyr[level];
            let cx = point.u / scale;
            let cy = point.v / scale;

            // The gradient stencil needs one extra pixel around the window.
            // Coarse levels that cannot fit it are skipped (the flow guess
            // still doubles); only the finest level is mandatory.
            let margin = radius + 1.5;
            if cx < margin
                || cy < margin
                || cx > p_img.width() as f64 - 1.0 - margin
                || cy > p_img.height() as f64 - 1.0 - margin
            {
                if level > 0 {
                    gx_flow *= 2.0;
                    gy_flow *= 2.0;
                    continue;
                }
                ok = false;
                break;
            }

            // Spatial gradients of the template window.
            let n = config.window;
            let mut gx = vec![0.0; n * n];
            let mut gy = vec![0.0; n * n];
            let mut tmpl = vec![0.0; n * n];
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for wy in 0..n {
                for wx in 0..n {
                    let sx = cx + wx as f64 - radius;
                    let sy = cy + wy as f64 - radius;
                    tmpl[wy * n + wx] = p_img.sample_bilinear(sx, sy);
                    let dx = (p_img.sample_bilinear(sx + 0.5, sy)
                        - p_img.sample_bilinear(sx - 0.5, sy))
                        / 1.0;
                    let dy = (p_img.sample_bilinear(sx, sy + 0.5)
                        - p_img.sample_bilinear(sx, sy - 0.5))
                        / 1.0;
                    gx[wy * n + wx] = dx;
                    gy[wy * n + wx] = dy;
                    sxx += dx * dx;
                    sxy += dx * dy;
                    syy += dy * dy;
                }
            }
            let area = (n * n) as f64;
            let half_trace = 0.5 * (sxx + syy) / area;
            let disc = ((0.5 * (sxx - syy) / area).powi(2) + (sxy / area) * (sxy / area)).sqrt();
            if half_trace - disc < config.min_eigenvalue {
                ok = false;
                break;
            }
            let det = sxx * syy - sxy * sxy;
            if det.abs() < 1e-300 {
                ok = false;
                break;
            }

            // Iterative refinement on this level.
            let (mut nu_x, mut nu_y) = (0.0f64, 0.0f64);
            for _ in 0..config.iterations {
                let (mut bx, mut by) = (0.0, 0.0);
                let mut inside = true;
                for wy in 0..n {
                    for wx in 0..n {
                        let sx = cx + wx as f64 - radius + gx_flow + nu_x;
                        let sy = cy + wy as f64 - radius + gy_flow + nu_y;
                        if !n_img.sample_valid(sx, sy) {
                            inside = false;
                            break;
                        }
                        let it = tmpl[wy * n + wx] - n_img.sample_bilinear(sx, sy);
                        bx += it * gx[wy * n + wx];
                        by += it * gy[wy * n + wx];
                    }
                    if !inside {
                        break;
                    }
                }
                if !inside {
                    ok = false;
                    break;
                }
                let eta_x = (syy * bx - sxy * by) / det;
                let eta_y = (sxx * by - sxy * bx) / det;
                nu_x += eta_x;
                nu_y += eta_y;
                if (eta_x * eta_x + eta_y * eta_y).sqrt() < config.epsilon {
                    break;
                }
            }
            if !ok {
                break;
            }
            if level > 0 {
                gx_flow = 2.0 * (gx_flow + nu_x);
                gy_flow = 2.0 * (gy_flow + nu_y);
            } else {
                gx_flow += nu_x;
                gy_flow += nu_y;
            }
        }

        if ok && (gx_flow * gx_flow + gy_flow * gy_flow).sqrt() <= max_flow {
            entry.du = gx_flow;
            entry.dv = gy_flow;
            entry.valid = true;
        }
        entry
    });

    Ok(entries)
}

/// Componentwise median of the valid flow plus the count of entries within
/// 3 px of it. An empty or all-invalid field gives a zero vector and zero
/// inliers.
pub fn dominant_motion(flow: &FlowField) -> ((f64, f64), usize) {
    let valid: Vec<&FlowEntry> = flow.iter().filter(|e| e.valid).collect();
    if valid.is_empty() {
        return ((0.0, 0.0), 0);
    }
    let median_of = |mut values: Vec<f64>| -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite flow"));
        let n = values.len();
        if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        }
    };
    let mx = median_of(valid.iter().map(|e| e.du).collect());
    let my = median_of(valid.iter().map(|e| e.dv).collect());
    let inliers = valid
        .iter()
        .filter(|e| ((e.du - mx).powi(2) + (e.dv - my).powi(2)).sqrt() <= 3.0)
        .count();
    ((mx, my), inliers)
}

/// Writes a flow field as `u,v,du,dv,valid` CSV.
pub fn write_flow_csv(path: &std::path::Path, flow: &FlowField) -> Result<()> {
    use std::io::Write as _;
    let mut out = String::from("u,v,du,dv,valid\n");
    for e in flow {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.u,
            e.v,
            e.du,
            e.dv,
            if e.valid { 1 } else { 0 }
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
