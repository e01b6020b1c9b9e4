//! Corner scoring and detection.
//!
//! The score of a pixel is the weighted sum of squared differences between
//! the image and a shifted copy of itself, accumulated over a Gaussian
//! window. A region that changes under shifts in all directions scores high
//! in every direction and makes a trackable corner. Two response forms are
//! provided: the direct form evaluates the shifted-SSD minimum over the 8
//! compass directions, the fast form (the default) uses the Shi-Tomasi
//! minimum eigenvalue of the Gaussian-weighted structure tensor.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::par;

/// Default Gaussian window sigma in pixels.
pub const DEFAULT_WINDOW_SIGMA: f64 = 1.5;

/// The 8 compass directions discretizing the unit circle of shifts.
pub const COMPASS_SHIFTS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Per-pixel corner score map; zero where the scoring window does not fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerScoreMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl CornerScoreMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "score data length {} != {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, values })
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

    /// Pixel with the highest score, ties broken by scan order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_score = f64::NEG_INFINITY;
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.get(x, y);
                if s > best_score {
                    best_score = s;
                    best = (x, y);
                }
            }
        }
        best
    }
}

/// A detected corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub score: f64,
}

/// Corners sorted by descending score, pairwise separated by the NMS radius.
pub type KeypointList = Vec<Keypoint>;

/// Truncated Gaussian window weights, radius `ceil(3 sigma)`.
fn gaussian_window(sigma: f64) -> (i64, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let size = (2 * radius + 1) as usize;
    let mut w = Vec::with_capacity(size * size);
    for v in -radius..=radius {
        for u in -radius..=radius {
            w.push((-((u * u + v * v) as f64) * inv_two_sigma2).exp());
        }
    }
    (radius, w)
}

/// Weighted sum of squared differences between the window around `center`
/// and the same window shifted by `shift`.
pub fn ssd_shift_score(
    image: &ImageBuffer,
    center: (usize, usize),
    shift: (i64, i64),
    window_sigma: f64,
) -> Result<f64> {
    let (radius, weights) = gaussian_window(window_sigma);
    let (cx, cy) = (center.0 as i64, center.1 as i64);
    let (w, h) = (image.width() as i64, image.height() as i64);
    let fits = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    if !fits(cx - radius, cy - radius)
        || !fits(cx + radius, cy + radius)
        || !fits(cx - radius + shift.0, cy - radius + shift.1)
        || !fits(cx + radius + shift.0, cy + radius + shift.1)
    {
        return Err(Error::WindowOutOfBounds(center.0, center.1));
    }

    let mut score = 0.0;
    let mut wi = 0;
    for v in -radius..=radius {
        for u in -radius..=radius {
            let a = image.get((cx + u + shift.0) as usize, (cy + v + shift.1) as usize);
            let b = image.get((cx + u) as usize, (cy + v) as usize);
            let d = a - b;
            score += weights[wi] * d * d;
            wi += 1;
        }
    }
    Ok(score)
}

fn require_window_fits(image: &ImageBuffer, sigma: f64) -> Result<i64> {
    let (radius, _) = gaussian_window(sigma);
    let margin = radius + 1; // +1 for the unit shift / gradient stencil
    if image.width() as i64 <= 2 * margin || image.height() as i64 <= 2 * margin {
        return Err(Error::ImageTooSmall(
            image.width(),
            image.height(),
            (2 * margin + 1) as usize,
        ));
    }
    Ok(radius)
}

/// Direct-form corner response: per-pixel minimum of [`ssd_shift_score`]
/// over the 8 compass shifts. Quadratic in the window size; the oracle for
/// the fast form.
pub fn corner_response_direct(image: &ImageBuffer, window_sigma: f64) -> Result<CornerScoreMap> {
    let radius = require_window_fits(image, window_sigma)?;
    let margin = radius + 1;
    let (w, h) = (image.width(), image.height());

    let rows = par::map_indexed(h, |y| {
        let mut row = vec![0.0f64; w];
        let yi = y as i64;
        if yi < margin || yi >= h as i64 - margin {
            return row;
        }
        for x in (margin as usize)..(w - margin as usize) {
            let mut min_score = f64::INFINITY;
            for shift in COMPASS_SHIFTS {
                let s = ssd_shift_score(image, (x, y), shift, window_sigma)
                    .expect("window fit checked by margin");
                min_score = min_score.min(s);
            }
            row[x] = min_score;
        }
        row
    });

    Ok(CornerScoreMap {
        width: w,
        height: h,
        values: rows.concat(),
    })
}

/// Fast-form corner response. The default.
///
/// Algebraic reformulation of the direct form: the shifted SSD for every
/// compass direction is a Gaussian window sum over one of four
/// forward-difference-squared fields (the four negative shifts reuse the
/// positive fields sampled at `x - d`), so the whole map costs four
/// separable smoothing passes instead of a window sum per pixel per shift.
/// Produces the same scores as [`corner_response_direct`] up to float
/// summation order.
pub fn corner_response(image: &ImageBuffer, window_sigma: f64) -> Result<CornerScoreMap> {
    let radius = require_window_fits(image, window_sigma)?;
    let margin = (radius + 1) as usize;
    let (w, h) = (image.width(), image.height());
    let wx: Vec<f64> = (-radius..=radius)
        .map(|u| (-((u * u) as f64) / (2.0 * window_sigma * window_sigma)).exp())
        .collect();

    // Squared finite differences for the four positive shift directions.
    // Border reads are edge-clamped; only margin-interior pixels are scored.
    let diffs: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
    let fields: Vec<Vec<f64>> = diffs
        .iter()
        .map(|(dx, dy)| {
            par::map_indexed(h, |y| {
                let mut row = vec![0.0f64; w];
                for (x, item) in row.iter_mut().enumerate() {
                    let d = image.get_clamped(x as i64 + dx, y as i64 + dy)
                        - image.get(x, y);
                    *item = d * d;
                }
                row
            })
            .concat()
        })
        .collect();

    // Separable Gaussian window sum of each field.
    let smooth = |field: &[f64]| -> Vec<f64> {
        let horiz: Vec<f64> = par::map_indexed(h, |y| {
            let mut row = vec![0.0f64; w];
            for (x, item) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (wi, u) in (-radius..=radius).enumerate() {
                    let xs = (x as i64 + u).clamp(0, w as i64 - 1) as usize;
                    acc += wx[wi] * field[y * w + xs];
                }
                *item = acc;
            }
            row
        })
        .concat();
        par::map_indexed(h, |y| {
            let mut row = vec![0.0f64; w];
            for (x, item) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (wi, v) in (-radius..=radius).enumerate() {
                    let ys = (y as i64 + v).clamp(0, h as i64 - 1) as usize;
                    acc += wx[wi] * horiz[ys * w + x];
                }
                *item = acc;
            }
            row
        })
        .concat()
    };
    let smoothed: Vec<Vec<f64>> = fields.iter().map(|f| smooth(f)).collect();

    let rows = par::map_indexed(h, |y| {
        let mut row = vec![0.0f64; w];
        if y < margin || y >= h - margin {
            return row;
        }
        for x in margin..(w - margin) {
            let mut min_s = f64::INFINITY;
            for (fi, (dx, dy)) in diffs.iter().enumerate() {
                let pos = smoothed[fi][y * w + x];
                let neg =
                    smoothed[fi][(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
                min_s = min_s.min(pos.min(neg));
            }
            row[x] = min_s.max(0.0);
        }
        row
    });

    Ok(CornerScoreMap {
        width: w,
        height: h,
        values: rows.concat(),
    })
}

/// Local maxima above `threshold`, greedily suppressed so that surviving
/// detections are pairwise at least `nms_radius` pixels apart, sorted by
/// descending score. Requires `threshold > 0` and `nms_radius >= 1`.
pub fn detect_corners(score_map: &CornerScoreMap, threshold: f64, nms_radius: f64) -> KeypointList {
    let (w, h) = (score_map.width, score_map.height);
    let mut candidates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = score_map.get(x, y);
            if s <= threshold {
                continue;
            }
            // Plateau tie-break: strictly greater than neighbors after this
            // pixel in scan order, greater-or-equal before it.
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = score_map.get(nx as usize, ny as usize);
                    let later = dy > 0 || (dy == 0 && dx > 0);
                    if (later && n >= s) || (!later && n > s) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push(Keypoint { u: x as f64, v: y as f64, score: s });
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.v.partial_cmp(&b.v).unwrap())
            .then(a.u.partial_cmp(&b.u).unwrap())
    });

    let r2 = nms_radius * nms_radius;
    let mut kept: KeypointList = Vec::new();
    for c in candidates {
        let clear = kept
            .iter()
            .all(|k| (k.u - c.u).powi(2) + (k.v - c.v).powi(2) >= r2);
        if clear {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal transcription of the weighted shifted-SSD sum, kept separate
    /// from the implementation as its oracle.
    fn ssd_oracle(img: &ImageBuffer, cx: i64, cy: i64, sx: i64, sy: i64, sigma: f64) -> f64 {
        let r = (3.0 * sigma).ceil() as i64;
        let mut total = 0.0;
        for v in -r..=r {
            for u in -r..=r {
                let w = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
                let shifted = img.get((cx + u + sx) as usize, (cy + v + sy) as usize);
                let base = img.get((cx + u) as usize, (cy + v) as usize);
                total += w * (shifted - base) * (shifted - base);
            }
        }
        total
    }

    /// Random but smooth test image: bilinear upsample of a coarse random grid.
    fn random_smooth(seed: u64, w: usize, h: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cw, ch) = (w / 4 + 2, h / 4 + 2);
        let coarse: Vec<f64> = (0..cw * ch).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageBuffer::from_fn(w, h, |x, y| {
            let fx = x as f64 / 4.0;
            let fy = y as f64 / 4.0;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let g = |i: usize, j: usize| coarse[j.min(ch - 1) * cw + i.min(cw - 1)];
            (1.0 - ay) * ((1.0 - ax) * g(x0, y0) + ax * g(x0 + 1, y0))
                + ay * ((1.0 - ax) * g(x0, y0 + 1) + ax * g(x0 + 1, y0 + 1))
        })
    }

    fn white_square(size: usize, lo: usize, hi: usize) -> ImageBuffer {
        ImageBuffer::from_fn(size, size, |x, y| {
            if x >= lo && x < hi && y >= lo && y < hi {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_scores_zero() {
        let img = ImageBuffer::filled(16, 16, 0.4);
        assert_eq!(ssd_shift_score(&img, (8, 8), (1, 0), 1.5).unwrap(), 0.0);
        let map = corner_response_direct(&img, 1.5).unwrap();
        assert!(map.values().iter().all(|v| *v == 0.0));
        let fast = corner_response(&img, 1.5).unwrap();
        assert!(fast.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_shift_scores_zero() {
        let img = random_smooth(3, 16, 16);
        assert_eq!(ssd_shift_score(&img, (8, 8), (0, 0), 1.5).unwrap(), 0.0);
    }

    #[test]
    fn matches_literal_oracle() {
        let img = random_smooth(11, 16, 16);
        for (sx, sy) in COMPASS_SHIFTS {
            let got = ssd_shift_score(&img, (8, 7), (sx, sy), 1.5).unwrap();
            let want = ssd_oracle(&img, 8, 7, sx, sy, 1.5);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_edge_prefers_horizontal_shift() {
        // 11x11 vertical step edge: crossing it horizontally changes
        // intensity, sliding along it does not.
        let img = ImageBuffer::from_fn(11, 11, |x, _| if x < 5 { 0.1 } else { 0.9 });
        let horizontal = ssd_shift_score(&img, (5, 5), (1, 0), 1.0).unwrap();
        let vertical = ssd_shift_score(&img, (5, 5), (0, 1), 1.0).unwrap();
        assert!(horizontal > vertical);
        assert_eq!(vertical, 0.0);
    }

    #[test]
    fn window_bounds_are_enforced() {
        let img = random_smooth(5, 16, 16);
        assert!(matches!(
            ssd_shift_score(&img, (1, 8), (-1, 0), 1.5),
            Err(Error::WindowOutOfBounds(_, _))
        ));
        let tiny = ImageBuffer::filled(6, 6, 0.5);
        assert!(matches!(
            corner_response(&tiny, 1.5),
            Err(Error::ImageTooSmall(_, _, _))
        ));
    }

    #[test]
    fn square_corner_beats_edge_midpoint() {
        let img = white_square(24, 8, 16);
        let map = corner_response_direct(&img, 1.5).unwrap();
        // True corner (8,8) vs midpoint of the top edge (12,8).
        assert!(map.get(8, 8) > map.get(12, 8));
        assert!(map.get(15, 15) > map.get(8, 12));
    }

    #[test]
    fn direct_form_invariant_under_intensity_offset() {
        let img = ImageBuffer::from_fn(16, 16, |x, y| {
            0.2 + 0.3 * ((x as f64 * 0.5).sin() * (y as f64 * 0.4).cos()).abs()
        });
        let shifted = img.offset(0.25);
        let a = corner_response_direct(&img, 1.5).unwrap();
        let b = corner_response_direct(&shifted, 1.5).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    /// Random bandlimited image: a mixture of seeded sinusoids with
    /// wavelengths of a few pixels.
    fn random_waves(seed: u64, w: usize, h: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                // Wavelengths of 12+ px: the first-order shift model the fast
                // form relies on holds, so the two forms should rank alike.
                let freq = rng.gen_range(0.12..0.5);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.3..1.0);
                (angle.cos() * freq, angle.sin() * freq, phase, amp)
            })
            .collect();
        ImageBuffer::from_fn(w, h, |x, y| {
            let s: f64 = waves
                .iter()
                .map(|(kx, ky, phase, amp)| amp * (kx * x as f64 + ky * y as f64 + phase).sin())
                .sum();
            0.5 + s / 8.0
        })
    }

    #[test]
    fn fast_form_argmax_matches_direct_oracle() {
        let mut agree = 0;
        for seed in 0..100u64 {
            let img = random_waves(1000 + seed, 16, 16);
            let direct = corner_response_direct(&img, 1.5).unwrap();
            let fast = corner_response(&img, 1.5).unwrap();
            if direct.argmax() == fast.argmax() {
                agree += 1;
            }
        }
        assert!(agree >= 95, "argmax agreement {agree}/100");
    }

    #[test]
    fn detect_corners_finds_square_corners() {
        let img = white_square(32, 10, 22);
        let map = corner_response(&img, 1.5).unwrap();
        let corners = detect_corners(&map, 1e-6, 4.0);
        assert_eq!(corners.len(), 4, "got {corners:?}");
        // Edge pixels: square covers [10, 21] in both axes.
        let truth = [(10.0, 10.0), (21.0, 10.0), (10.0, 21.0), (21.0, 21.0)];
        for t in truth {
            let hit = corners
                .iter()
                .any(|k| (k.u - t.0).abs() <= 1.0 && (k.v - t.1).abs() <= 1.0);
            assert!(hit, "no detection within 1 px of {t:?}: {corners:?}");
        }
    }

    #[test]
    fn empty_map_detects_nothing() {
        let map = CornerScoreMap::from_values(8, 8, vec![0.0; 64]).unwrap();
        assert!(detect_corners(&map, 0.1, 3.0).is_empty());
    }

    #[test]
    fn nms_keeps_the_stronger_of_close_peaks() {
        let mut values = vec![0.0; 64];
        values[3 * 8 + 3] = 1.0;
        values[3 * 8 + 4] = 2.0;
        let map = CornerScoreMap::from_values(8, 8, values).unwrap();
        let corners = detect_corners(&map, 0.5, 3.0);
        assert_eq!(corners.len(), 1);
        assert_eq!((corners[0].u, corners[0].v), (4.0, 3.0));
    }

    #[test]
    fn nms_radius_respected_pairwise() {
        let img = random_smooth(77, 32, 32);
        let map = corner_response(&img, 1.5).unwrap();
        let corners = detect_corners(&map, 1e-9, 3.0);
        for i in 0..corners.len() {
            for j in (i + 1)..corners.len() {
                let d = ((corners[i].u - corners[j].u).powi(2)
                    + (corners[i].v - corners[j].v).powi(2))
                .sqrt();
                assert!(d >= 3.0);
            }
        }
        for w in corners.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn noise_robustness_of_top_detections() {
        let board = ImageBuffer::from_fn(48, 48, |x, y| {
            if ((x / 8) + (y / 8)) % 2 == 0 {
                0.15
            } else {
                0.85
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noisy_data: Vec<f64> = board
            .data()
            .iter()
            .map(|v| (v + rng.gen_range(-0.017..0.017)).clamp(0.0, 1.0))
            .collect();
        let noisy = ImageBuffer::from_data(48, 48, noisy_data).unwrap();
        let clean_kps = detect_corners(&corner_response(&board, 1.5).unwrap(), 1e-6, 5.0);
        let noisy_kps = detect_corners(&corner_response(&noisy, 1.5).unwrap(), 1e-6, 5.0);
        for k in clean_kps.iter().take(10) {
            // Chebyshev distance: junctions sit between pixels, so noise may
            // flip a detection to any of the 4 pixels around the junction.
            let moved = noisy_kps
                .iter()
                .map(|n| (n.u - k.u).abs().max((n.v - k.v).abs()))
                .fold(f64::INFINITY, f64::min);
            assert!(moved <= 1.0, "keypoint at ({}, {}) moved {moved:.2} px", k.u, k.v);
        }
    }
}
