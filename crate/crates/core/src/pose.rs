//! Direct keyframe-based pose estimation.
//!
//! The camera pose relative to a keyframe minimizes the robust photometric
//! energy `sum rho(r(u, C) / sigma(r))` over the keyframe's high-gradient
//! pixels: each pixel is unprojected with the keyframe depth, moved by the
//! candidate pose, projected into the current frame, and compared by
//! intensity. Minimization is iteratively reweighted Gauss-Newton on the
//! 6-dof twist with Levenberg damping.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, RowVector3, Vector3, Vector6};

use crate::camera::{project, unproject, CameraIntrinsics};
use crate::depth::{DepthMap, UncertaintyMap};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::par;
use crate::se3::PoseSE3;

/// Alignment configuration. Residuals are normalized by their uncertainty,
/// so the Huber threshold is dimensionless (1.345 is the 95%-efficiency
/// convention for unit-variance residuals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Constant image noise standard deviation.
    pub sigma_intensity: f64,
    /// Huber threshold on normalized residuals.
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub step_norm_tol: f64,
    pub energy_rel_tol: f64,
    /// Keyframe pixels with gradient magnitude above this enter the energy.
    pub gradient_threshold: f64,
    /// Coarse-to-fine levels; 1 is single-scale.
    pub pyramid_levels: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            sigma_intensity: 0.02,
            huber_delta: 1.345,
            max_iterations: 50,
            step_norm_tol: 1e-8,
            energy_rel_tol: 1e-9,
            gradient_threshold: 0.03,
            pyramid_levels: 1,
        }
    }
}

/// Keyframe spawning thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnConfig {
    pub translation_threshold: f64,
    pub rotation_threshold_deg: f64,
    pub min_valid_ratio: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            translation_threshold: 0.15,
            rotation_threshold_deg: 10.0,
            min_valid_ratio: 0.6,
        }
    }
}

/// Reference frame for direct alignment: image, depth, uncertainty and the
/// pixels worth aligning against.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub uncertainty: UncertaintyMap,
    /// Camera-to-world pose.
    pub pose_world: PoseSE3,
    /// Pixels with both usable depth and gradient magnitude above the
    /// configured threshold.
    pub high_gradient_pixels: Vec<(usize, usize)>,
}

impl Keyframe {
    pub fn new(
        id: u64,
        image: ImageBuffer,
        depth: DepthMap,
        uncertainty: UncertaintyMap,
        pose_world: PoseSE3,
        gradient_threshold: f64,
    ) -> Result<Self> {
        if depth.width() != image.width()
            || depth.height() != image.height()
            || uncertainty.width() != image.width()
            || uncertainty.height() != image.height()
        {
            return Err(Error::DimensionMismatch(format!(
                "keyframe rasters disagree: image {}x{}, depth {}x{}, uncertainty {}x{}",
                image.width(),
                image.height(),
                depth.width(),
                depth.height(),
                uncertainty.width(),
                uncertainty.height()
            )));
        }
        let mut high_gradient_pixels = Vec::new();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if depth.get(x, y).is_some() && image.gradient_magnitude(x, y) > gradient_threshold
                {
                    high_gradient_pixels.push((x, y));
                }
            }
        }
        Ok(Self { id, image, depth, uncertainty, pose_world, high_gradient_pixels })
    }

    pub fn is_usable(&self) -> bool {
        !self.high_gradient_pixels.is_empty()
    }

    /// Half-resolution copy for coarse-to-fine alignment. Depth and
    /// uncertainty average the valid pixels of each 2x2 block.
    fn half_size(&self, gradient_threshold: f64) -> Result<Keyframe> {
        let (w, h) = (self.image.width() / 2, self.image.height() / 2);
        let image = self.image.half_size();
        let mut depth = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        let mut unc = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut dsum = 0.0;
                let mut usum = 0.0;
                let mut count = 0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < self.image.width() && sy < self.image.height() {
                        if let Some(d) = self.depth.get(sx, sy) {
                            dsum += d;
                            usum += self.uncertainty.get(sx, sy);
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    depth[y * w + x] = dsum / count as f64;
                    unc[y * w + x] = usum / count as f64;
                    valid[y * w + x] = true;
                }
            }
        }
        Keyframe::new(
            self.id,
            image,
            DepthMap::from_parts(w, h, depth, valid)?,
            UncertaintyMap::from_values(w, h, unc)?,
            self.pose_world,
            gradient_threshold,
        )
    }
}

/// One residual sample of the photometric energy.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSample {
    /// Keyframe pixel.
    pub pixel: (usize, usize),
    /// `I_frame(pi(u)) - I_keyframe(u)`.
    pub residual: f64,
    /// Residual standard deviation: image noise plus first-order
    /// depth-uncertainty propagation.
    pub sigma: f64,
}

/// Converged alignment result.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    /// Transform taking keyframe-camera coordinates to frame-camera
    /// coordinates.
    pub pose: PoseSE3,
    /// Inverse of the damped normal-equations matrix at convergence.
    pub covariance: Matrix6<f64>,
    pub final_energy: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Fraction of high-gradient pixels that projected into the frame.
    pub valid_pixel_ratio: f64,
    /// Per-iteration convergence trace.
    pub trace: Vec<IterationRecord>,
}

/// One row of the alignment debug dump.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iter: usize,
    pub energy: f64,
    pub step_norm: f64,
    pub lambda: f64,
    pub valid_pixels: usize,
}

/// Writes the trace as `iter,energy,step_norm,lambda,valid_pixels`.
pub fn write_alignment_csv(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let mut out = String::from("iter,energy,step_norm,lambda,valid_pixels\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.energy, r.step_norm, r.lambda, r.valid_pixels
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Huber penalty: quadratic inside `delta`, linear outside, C1-continuous.
pub fn huber(x: f64, delta: f64) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::NonPositiveDelta(delta));
    }
    let a = x.abs();
    Ok(if a <= delta { 0.5 * x * x } else { delta * (a - 0.5 * delta) })
}

/// Photometric residuals and their uncertainties at the given pose.
///
/// Pixels that leave the frame or land behind the camera are dropped;
/// errors with [`Error::NoValidPixels`] when none survive.
pub fn residuals(
    frame: &ImageBuffer,
    keyframe: &Keyframe,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<ResidualSample>> {
    if !keyframe.is_usable() {
        return Err(Error::NoValidPixels("keyframe has no high-gradient pixels".into()));
    }
    let samples =
        evaluate_samples(frame, keyframe, pose, intrinsics, AlignConfig::default().sigma_intensity);
    let out: Vec<ResidualSample> = samples.into_iter().flatten().map(|s| s.sample).collect();
    if out.is_empty() {
        return Err(Error::NoValidPixels(
            "every high-gradient pixel projected outside the frame".into(),
        ));
    }
    Ok(out)
}

struct FullSample {
    sample: ResidualSample,
    /// d residual / d twist (translation part first).
    jacobian: Vector6<f64>,
}

/// Per-pixel evaluation: residual, uncertainty and twist Jacobian. Runs in
/// parallel over pixels; results keep pixel order so downstream reductions
/// are deterministic.
fn evaluate_samples(
    frame: &ImageBuffer,
    keyframe: &Keyframe,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
    sigma_intensity: f64,
) -> Vec<Option<FullSample>> {
    par::map_indexed(keyframe.high_gradient_pixels.len(), |i| {
        let (x, y) = keyframe.high_gradient_pixels[i];
        let d = keyframe.depth.get(x, y)?;
        let p_kf = unproject(x as f64, y as f64, d, intrinsics).ok()?;
        let p = pose.transform(&p_kf);
        if p.z <= 0.0 {
            return None;
        }
        let (u, v) = project(&p, intrinsics).ok()?;
        if !frame.sample_valid(u, v) {
            return None;
        }

        let r = frame.sample_bilinear(u, v) - keyframe.image.get(x, y);

        // Frame intensity gradient at the projection.
        let (gx, gy) = frame_gradient(frame, u, v);

        // d pixel / d point.
        let inv_z = 1.0 / p.z;
        let j_u = RowVector3::new(intrinsics.fx * inv_z, 0.0, -intrinsics.fx * p.x * inv_z * inv_z);
        let j_v = RowVector3::new(0.0, intrinsics.fy * inv_z, -intrinsics.fy * p.y * inv_z * inv_z);
        // d intensity / d point.
        let g_point = j_u * gx + j_v * gy;

        // Left-multiplied twist: d point / d rho = I, d point / d omega = -[p]x,
        // and g . (-[p]x w) = (p x g) . w.
        let g = Vector3::new(g_point[0], g_point[1], g_point[2]);
        let cross = p.cross(&g);
        let jac = Vector6::new(g[0], g[1], g[2], cross[0], cross[1], cross[2]);

        // First-order depth-uncertainty propagation: the warped point moves
        // along the rotated ray when the keyframe depth shifts.
        let ray = Vector3::new(
            (x as f64 - intrinsics.cx) / intrinsics.fx,
            (y as f64 - intrinsics.cy) / intrinsics.fy,
            1.0,
        );
        let dp_dd = pose.rotation() * ray;
        let dr_dd = g.dot(&dp_dd);
        let sigma2 =
            sigma_intensity * sigma_intensity + dr_dd * dr_dd * keyframe.uncertainty.get(x, y);

        Some(FullSample {
            sample: ResidualSample { pixel: (x, y), residual: r, sigma: sigma2.sqrt() },
            jacobian: jac,
        })
    })
}

/// Bilinear-consistent image gradient at a subpixel position.
fn frame_gradient(img: &ImageBuffer, u: f64, v: f64) -> (f64, f64) {
    let eps = 0.5;
    let gx = (img.sample_bilinear(u + eps, v) - img.sample_bilinear(u - eps, v)) / (2.0 * eps);
    let gy = (img.sample_bilinear(u, v + eps) - img.sample_bilinear(u, v - eps)) / (2.0 * eps);
    (gx, gy)
}

/// `H + lambda * (diag(H) + eps I)`: relative damping with an absolute
/// floor for rank-deficient directions.
fn damp(h: &Matrix6<f64>, lambda: f64) -> Matrix6<f64> {
    let mut out = *h;
    for i in 0..6 {
        out[(i, i)] += lambda * (h[(i, i)] + 1e-12);
    }
    out
}

fn robust_energy(samples: &[Option<FullSample>], delta: f64) -> (f64, usize) {
    let mut energy = 0.0;
    let mut count = 0;
    for s in samples.iter().flatten() {
        let e = s.sample.residual / s.sample.sigma;
        energy += huber(e, delta).expect("delta validated");
        count += 1;
    }
    (energy, count)
}

/// Single-level iteratively reweighted Gauss-Newton with Levenberg damping.
fn estimate_pose_single_level(
    frame: &ImageBuffer,
    keyframe: &Keyframe,
    initial: &PoseSE3,
    intrinsics: &CameraIntrinsics,
    config: &AlignConfig,
) -> Result<PoseEstimate> {
    if !keyframe.is_usable() {
        return Err(Error::NoValidPixels("keyframe has no high-gradient pixels".into()));
    }
    let total_pixels = keyframe.high_gradient_pixels.len();
    let delta = config.huber_delta;
    if delta <= 0.0 {
        return Err(Error::NonPositiveDelta(delta));
    }

    let mut pose = *initial;
    let mut samples = evaluate_samples(frame, keyframe, &pose, intrinsics, config.sigma_intensity);
    let (mut energy, mut valid) = robust_energy(&samples, delta);
    if valid == 0 {
        return Err(Error::NoValidPixels(
            "every high-gradient pixel projected outside the frame".into(),
        ));
    }

    let mut lambda = 1e-6;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;
    let mut hessian = Matrix6::<f64>::zeros();

    for iter in 0..config.max_iterations {
        iterations_used = iter + 1;

        // Normal equations with Huber reweighting.
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for s in samples.iter().flatten() {
            let sigma = s.sample.sigma;
            let e = s.sample.residual / sigma;
            let w = if e.abs() <= delta { 1.0 } else { delta / e.abs() };
            let j = s.jacobian / sigma;
            for r in 0..6 {
                for c in 0..6 {
                    h[(r, c)] += w * j[r] * j[c];
                }
            }
            b += j * (w * e);
        }
        hessian = h;

        // Marquardt-scaled damping: lambda multiplies the Hessian diagonal
        // so the retry schedule works at any residual scale.
        let mut accepted = false;
        let mut retries = 0;
        let mut usable_candidate = false;
        loop {
            let damped = damp(&h, lambda);
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                retries += 1;
                if retries >= 5 {
                    return Err(Error::Diverged(retries));
                }
                continue;
            };
            let step = chol.solve(&(-b));
            let step_norm = step.norm();

            if step_norm < config.step_norm_tol {
                trace.push(IterationRecord { iter, energy, step_norm, lambda, valid_pixels: valid });
                converged = true;
                break;
            }

            let candidate = PoseSE3::exp(&step).compose(&pose);
            let cand_samples =
                evaluate_samples(frame, keyframe, &candidate, intrinsics, config.sigma_intensity);
            let (cand_energy, cand_valid) = robust_energy(&cand_samples, delta);
            if cand_valid > 0 && cand_energy < energy {
                let rel_decrease = (energy - cand_energy) / energy.max(1e-300);
                pose = candidate;
                samples = cand_samples;
                energy = cand_energy;
                valid = cand_valid;
                lambda = (lambda * 0.5).max(1e-9);
                accepted = true;
                trace.push(IterationRecord { iter, energy, step_norm, lambda, valid_pixels: valid });
                if rel_decrease < config.energy_rel_tol {
                    converged = true;
                }
                break;
            }
            usable_candidate |= cand_valid > 0;
            lambda *= 100.0;
            retries += 1;
            if retries >= 5 {
                if !usable_candidate {
                    // Every damped step threw the alignment off the image.
                    return Err(Error::Diverged(retries));
                }
                // No damped step decreases the energy: the current pose sits
                // at the energy's floor, so the achievable relative decrease
                // is below tolerance. Keep the best-found pose.
                trace.push(IterationRecord { iter, energy, step_norm, lambda, valid_pixels: valid });
                converged = true;
                break;
            }
        }

        if converged || !accepted {
            break;
        }
    }

    let damped = damp(&hessian, lambda);
    let covariance = damped.cholesky().map(|c| c.inverse()).unwrap_or_else(Matrix6::identity);
    let covariance = (covariance + covariance.transpose()) * 0.5;

    Ok(PoseEstimate {
        pose,
        covariance,
        final_energy: energy,
        iterations_used,
        converged,
        valid_pixel_ratio: valid as f64 / total_pixels as f64,
        trace,
    })
}

/// Estimates the pose aligning `keyframe` to `frame`, starting at `initial`.
///
/// With `pyramid_levels > 1` the alignment runs coarse to fine, feeding
/// each level's estimate into the next.
pub fn estimate_pose(
    frame: &ImageBuffer,
    keyframe: &Keyframe,
    initial: &PoseSE3,
    intrinsics: &CameraIntrinsics,
    config: &AlignConfig,
) -> Result<PoseEstimate> {
    if config.pyramid_levels <= 1 {
        return estimate_pose_single_level(frame, keyframe, initial, intrinsics, config);
    }

    // Build the pyramid, coarsest last.
    let mut frames = vec![frame.clone()];
    let mut keyframes = vec![keyframe.clone()];
    let mut cams = vec![*intrinsics];
    for _ in 1..config.pyramid_levels {
        let prev_kf = keyframes.last().expect("non-empty");
        if prev_kf.image.width() < 16 || prev_kf.image.height() < 16 {
            break;
        }
        frames.push(frames.last().expect("non-empty").half_size());
        keyframes.push(prev_kf.half_size(config.gradient_threshold)?);
        cams.push(cams.last().expect("non-empty").scaled(0.5, 0.5));
    }

    let mut pose = *initial;
    let mut result = None;
    for level in (0..frames.len()).rev() {
        let est =
            estimate_pose_single_level(&frames[level], &keyframes[level], &pose, &cams[level], config)?;
        pose = est.pose;
        result = Some(est);
    }
    Ok(result.expect("at least one level"))
}

/// Keyframe whose pose is closest to the guess under
/// `|t_rel| + 0.5 * angle(R_rel)`; ties break toward the lower id.
pub fn select_reference_keyframe<'a>(
    keyframes: &'a [Keyframe],
    current_pose_guess: &PoseSE3,
) -> Result<&'a Keyframe> {
    const LAMBDA_ROT: f64 = 0.5;
    let mut best: Option<(&Keyframe, f64)> = None;
    for kf in keyframes {
        let rel = kf.pose_world.relative_to(current_pose_guess);
        let dist = rel.translation().norm() + LAMBDA_ROT * rel.rotation_angle();
        let better = match best {
            None => true,
            Some((b, bd)) => dist < bd || (dist == bd && kf.id < b.id),
        };
        if better {
            best = Some((kf, dist));
        }
    }
    best.map(|(kf, _)| kf).ok_or(Error::EmptyKeyframeSet)
}

/// Whether tracking should spawn a new keyframe after this estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnDecision {
    Keep,
    Spawn(SpawnReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnReason {
    Translation,
    Rotation,
    ValidPixelRatio,
}

pub fn keyframe_spawn_policy(
    estimate: &PoseEstimate,
    _reference: &Keyframe,
    config: &SpawnConfig,
) -> SpawnDecision {
    if estimate.pose.translation().norm() > config.translation_threshold {
        return SpawnDecision::Spawn(SpawnReason::Translation);
    }
    if estimate.pose.rotation_angle().to_degrees() > config.rotation_threshold_deg {
        return SpawnDecision::Spawn(SpawnReason::Rotation);
    }
    if estimate.valid_pixel_ratio < config.min_valid_ratio {
        return SpawnDecision::Spawn(SpawnReason::ValidPixelRatio);
    }
    SpawnDecision::Keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_view, SceneKind, Texture3};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize, fx: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, None).unwrap()
    }

    fn plane_keyframe(
        seed: u64,
        w: usize,
        h: usize,
        fx: f64,
    ) -> (Keyframe, CameraIntrinsics, Texture3, SceneKind) {
        let scene = SceneKind::FrontoPlane { depth: 2.0 };
        // Gentle texture: subpixel interpolation stays faithful, so the
        // energy minimum sits at the true pose.
        let texture = Texture3::with_frequencies(seed, 2.0, 6.0);
        let k = intr(w, h, fx);
        let (img, depth) = render_view(&scene, &texture, &PoseSE3::identity(), &k, w, h);
        let unc = UncertaintyMap::constant(w, h, 1e-4).unwrap();
        let kf = Keyframe::new(0, img, depth, unc, PoseSE3::identity(), 0.01).unwrap();
        (kf, k, texture, scene)
    }

    #[test]
    fn huber_values_and_bound() {
        assert_eq!(huber(0.0, 1.0).unwrap(), 0.0);
        // Branch boundary: both forms give delta^2 / 2.
        assert_relative_eq!(huber(1.0, 1.0).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(huber(3.0, 1.0).unwrap(), 2.5, epsilon = 1e-15);
        assert!(matches!(huber(1.0, 0.0), Err(Error::NonPositiveDelta(_))));
        for i in -20..20 {
            let x = i as f64 * 0.3;
            let h = huber(x, 1.0).unwrap();
            assert!(h <= 0.5 * x * x + 1e-15);
            if x.abs() <= 1.0 {
                assert_relative_eq!(h, 0.5 * x * x, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn residuals_vanish_on_self_alignment() {
        let (kf, k, _, _) = plane_keyframe(1, 48, 48, 40.0);
        assert!(kf.is_usable());
        let frame = kf.image.clone();
        let r = residuals(&frame, &kf, &PoseSE3::identity(), &k).unwrap();
        assert!(!r.is_empty());
        for s in &r {
            assert!(s.residual.abs() < 1e-12);
            assert!(s.sigma >= 0.02);
        }
    }

    #[test]
    fn residuals_grow_with_pose_error_and_vanish_at_truth() {
        let (kf, k, texture, scene) = plane_keyframe(2, 48, 48, 40.0);
        // Frame rendered 2-px-equivalent to the right: tx = 2 * Z / fx = 0.1.
        let frame_pose =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let (frame, _) = render_view(&scene, &texture, &frame_pose, &k, 48, 48);

        let at_identity = residuals(&frame, &kf, &PoseSE3::identity(), &k).unwrap();
        let mean_abs: f64 =
            at_identity.iter().map(|s| s.residual.abs()).sum::<f64>() / at_identity.len() as f64;
        assert!(mean_abs > 1e-3, "misaligned mean |r| = {mean_abs}");

        let truth = frame_pose.inverse();
        let at_truth = residuals(&frame, &kf, &truth, &k).unwrap();
        let mean_truth: f64 =
            at_truth.iter().map(|s| s.residual.abs()).sum::<f64>() / at_truth.len() as f64;
        // Bilinear resampling noise only.
        assert!(mean_truth < 5e-4, "aligned mean |r| = {mean_truth}");
    }

    #[test]
    fn all_points_behind_camera_is_no_valid_pixels() {
        let (kf, k, _, _) = plane_keyframe(3, 32, 32, 24.0);
        let frame = kf.image.clone();
        let behind =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
        assert!(matches!(
            residuals(&frame, &kf, &behind, &k),
            Err(Error::NoValidPixels(_))
        ));
    }

    #[test]
    fn textureless_keyframe_is_unusable() {
        let img = ImageBuffer::filled(32, 32, 0.5);
        let depth = DepthMap::constant(32, 32, 2.0).unwrap();
        let unc = UncertaintyMap::constant(32, 32, 1e-4).unwrap();
        let kf = Keyframe::new(0, img.clone(), depth, unc, PoseSE3::identity(), 0.03).unwrap();
        assert!(!kf.is_usable());
        assert!(matches!(
            estimate_pose(&img, &kf, &PoseSE3::identity(), &intr(32, 32, 24.0), &AlignConfig::default()),
            Err(Error::NoValidPixels(_))
        ));
    }

    #[test]
    fn self_alignment_converges_to_identity() {
        let (kf, k, _, _) = plane_keyframe(4, 48, 48, 40.0);
        let frame = kf.image.clone();
        let est =
            estimate_pose(&frame, &kf, &PoseSE3::identity(), &k, &AlignConfig::default()).unwrap();
        assert!(est.converged);
        assert!(est.pose.log().norm() < 1e-9, "twist {:?}", est.pose.log());
        assert!(est.final_energy < 1e-12);
    }

    #[test]
    fn recovers_small_translation_and_rotation() {
        let (kf, k, texture, scene) = plane_keyframe(5, 96, 96, 80.0);
        // Ground truth: 1 cm translation and 1 degree rotation about y.
        let angle = 1.0f64.to_radians();
        let true_frame_pose = PoseSE3::exp(&Vector6::new(0.01, 0.0, 0.0, 0.0, angle, 0.0));
        let (frame, _) = render_view(&scene, &texture, &true_frame_pose, &k, 96, 96);
        let truth = true_frame_pose.inverse();

        let est =
            estimate_pose(&frame, &kf, &PoseSE3::identity(), &k, &AlignConfig::default()).unwrap();
        assert!(est.converged);
        assert!(est.iterations_used <= 50);

        let err = est.pose.relative_to(&truth);
        let t_err = err.translation().norm();
        let r_err = err.rotation_angle().to_degrees();
        assert!(t_err < 1e-3, "translation error {t_err}");
        assert!(r_err < 0.05, "rotation error {r_err} deg");
    }

    #[test]
    fn energy_is_minimal_at_ground_truth() {
        let (kf, k, texture, scene) = plane_keyframe(6, 48, 48, 40.0);
        let true_frame_pose = PoseSE3::exp(&Vector6::new(0.02, -0.01, 0.005, 0.0, 0.01, -0.005));
        let (frame, _) = render_view(&scene, &texture, &true_frame_pose, &k, 48, 48);
        let truth = true_frame_pose.inverse();

        let energy_at = |pose: &PoseSE3| -> f64 {
            let samples = residuals(&frame, &kf, pose, &k).unwrap();
            samples
                .iter()
                .map(|s| huber(s.residual / s.sigma, 1.345).unwrap())
                .sum::<f64>()
                / samples.len() as f64
        };
        let e_truth = energy_at(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let noise = Vector6::from_fn(|_, _| rng.gen_range(-0.05..0.05));
            let perturbed = PoseSE3::exp(&noise).compose(&truth);
            if residuals(&frame, &kf, &perturbed, &k).is_err() {
                continue;
            }
            assert!(
                energy_at(&perturbed) >= e_truth,
                "perturbed energy below truth for twist {noise:?}"
            );
        }
    }

    #[test]
    fn intensity_offset_does_not_move_the_estimate() {
        let (kf, k, texture, scene) = plane_keyframe(7, 48, 48, 40.0);
        let true_frame_pose = PoseSE3::exp(&Vector6::new(0.01, 0.005, 0.0, 0.0, 0.005, 0.0));
        let (frame, _) = render_view(&scene, &texture, &true_frame_pose, &k, 48, 48);

        let base =
            estimate_pose(&frame, &kf, &PoseSE3::identity(), &k, &AlignConfig::default()).unwrap();

        let offset_kf = Keyframe::new(
            0,
            kf.image.offset(0.05),
            kf.depth.clone(),
            kf.uncertainty.clone(),
            kf.pose_world,
            0.01,
        )
        .unwrap();
        let shifted = estimate_pose(
            &frame.offset(0.05),
            &offset_kf,
            &PoseSE3::identity(),
            &k,
            &AlignConfig::default(),
        )
        .unwrap();
        let diff = base.pose.relative_to(&shifted.pose).log().norm();
        assert!(diff < 1e-9, "offset moved the pose by {diff}");
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let (kf, k, texture, scene) = plane_keyframe(8, 48, 48, 40.0);
        let true_frame_pose = PoseSE3::exp(&Vector6::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.0));
        let (frame, _) = render_view(&scene, &texture, &true_frame_pose, &k, 48, 48);
        let est =
            estimate_pose(&frame, &kf, &PoseSE3::identity(), &k, &AlignConfig::default()).unwrap();
        let sym_dev = (est.covariance - est.covariance.transpose()).norm();
        assert!(sym_dev < 1e-15);
        let eig = est.covariance.symmetric_eigenvalues();
        assert!(eig.iter().all(|l| *l >= -1e-12), "eigenvalues {eig:?}");
    }

    #[test]
    fn pyramid_handles_large_motion() {
        // ~10 px of image motion: the pyramid's coarse level brings it into
        // range quickly and the fine level polishes.
        let (kf, k, texture, scene) = plane_keyframe(9, 96, 96, 80.0);
        let true_frame_pose = PoseSE3::exp(&Vector6::new(0.25, 0.03, 0.0, 0.0, 0.0, 0.0));
        let (frame, _) = render_view(&scene, &texture, &true_frame_pose, &k, 96, 96);
        let truth = true_frame_pose.inverse();

        let cfg = AlignConfig { pyramid_levels: 3, ..AlignConfig::default() };
        let est = estimate_pose(&frame, &kf, &PoseSE3::identity(), &k, &cfg).unwrap();
        let err = est.pose.relative_to(&truth);
        assert!(est.converged);
        assert!(err.translation().norm() < 2e-3, "t err {}", err.translation().norm());
    }

    #[test]
    fn reference_selection_prefers_nearest_and_breaks_ties_by_id() {
        let (kf0, _, _, _) = plane_keyframe(10, 32, 32, 24.0);
        let mut kf1 = kf0.clone();
        kf1.id = 1;
        kf1.pose_world =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let mut kf2 = kf0.clone();
        kf2.id = 2;
        kf2.pose_world =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();

        let kfs = vec![kf1.clone(), kf2.clone()];
        let guess = PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.12, 0.0, 0.0)).unwrap();
        assert_eq!(select_reference_keyframe(&kfs, &guess).unwrap().id, 1);

        // Equidistant (exactly representable distances): lower id wins.
        kf1.pose_world =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.5, 0.0, 0.0)).unwrap();
        kf2.pose_world =
            PoseSE3::from_parts(Matrix3::identity(), Vector3::new(1.5, 0.0, 0.0)).unwrap();
        let kfs = vec![kf2.clone(), kf1.clone()];
        let mid = PoseSE3::from_parts(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(select_reference_keyframe(&kfs, &mid).unwrap().id, 1);

        assert!(matches!(
            select_reference_keyframe(&[], &PoseSE3::identity()),
            Err(Error::EmptyKeyframeSet)
        ));
        let single = vec![kf2];
        assert_eq!(select_reference_keyframe(&single, &PoseSE3::identity()).unwrap().id, 2);
    }

    #[test]
    fn spawn_policy_thresholds() {
        let (kf, _, _, _) = plane_keyframe(11, 32, 32, 24.0);
        let cfg = SpawnConfig::default();
        let mut est = PoseEstimate {
            pose: PoseSE3::identity(),
            covariance: Matrix6::identity(),
            final_energy: 0.0,
            iterations_used: 1,
            converged: true,
            valid_pixel_ratio: 1.0,
            trace: vec![],
        };
        assert_eq!(keyframe_spawn_policy(&est, &kf, &cfg), SpawnDecision::Keep);

        est.pose = PoseSE3::from_parts(Matrix3::identity(), Vector3::new(0.2, 0.0, 0.0)).unwrap();
        assert_eq!(
            keyframe_spawn_policy(&est, &kf, &cfg),
            SpawnDecision::Spawn(SpawnReason::Translation)
        );

        est.pose = PoseSE3::exp(&Vector6::new(0.0, 0.0, 0.0, 0.0, 0.3, 0.0));
        assert_eq!(
            keyframe_spawn_policy(&est, &kf, &cfg),
            SpawnDecision::Spawn(SpawnReason::Rotation)
        );

        est.pose = PoseSE3::identity();
        est.valid_pixel_ratio = 0.5;
        assert_eq!(
            keyframe_spawn_policy(&est, &kf, &cfg),
            SpawnDecision::Spawn(SpawnReason::ValidPixelRatio)
        );
    }
}
