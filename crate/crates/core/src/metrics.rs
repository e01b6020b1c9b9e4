//! Evaluation metrics: percent correct depth and absolute trajectory error.

use nalgebra::{Matrix3, Vector3};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::se3::PoseSE3;

/// Default relative depth tolerance for the percent-correct metric.
pub const DEFAULT_DEPTH_TAU: f64 = 0.10;

/// Maximum timestamp gap when associating trajectory poses, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

/// Percentage of jointly-valid pixels whose predicted depth lies within
/// relative tolerance `tau` of ground truth.
pub fn percent_correct_depth(pred: &DepthMap, gt: &DepthMap, tau: f64) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::DimensionMismatch(format!(
            "depth maps {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (Some(p), Some(g)) = (pred.get(x, y), gt.get(x, y)) else {
                continue;
            };
            total += 1;
            if (p - g).abs() / g < tau {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoValidPixels("no pixels valid in both maps".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Associates the two trajectories by nearest timestamp within
/// [`ASSOCIATION_WINDOW`], rigidly aligns the estimate onto the ground
/// truth (closed-form orthogonal Procrustes over positions, no scale) and
/// returns the RMSE of the remaining position residuals.
pub fn ate_rmse(estimated: &[(f64, PoseSE3)], groundtruth: &[(f64, PoseSE3)]) -> Result<f64> {
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    for (t, est) in estimated {
        let nearest = groundtruth
            .iter()
            .min_by(|a, b| {
                (a.0 - t).abs().partial_cmp(&(b.0 - t).abs()).expect("finite timestamps")
            })
            .filter(|(gt_t, _)| (gt_t - t).abs() <= ASSOCIATION_WINDOW);
        if let Some((_, gt)) = nearest {
            pairs.push((*est.translation(), *gt.translation()));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::InsufficientOverlap);
    }

    let n = pairs.len() as f64;
    let mean_est: Vector3<f64> = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let mean_gt: Vector3<f64> = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;

    // Rotation minimizing sum |R (e - me) - (g - mg)|^2.
    let mut h = Matrix3::<f64>::zeros();
    for (e, g) in &pairs {
        h += (g - mean_gt) * (e - mean_est).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd");
    let vt = svd.v_t.expect("svd");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;

    let mut se = 0.0;
    for (e, g) in &pairs {
        let aligned = rot * (e - mean_est) + mean_gt;
        se += (aligned - g).norm_squared();
    }
    Ok((se / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(w: usize, h: usize, values: Vec<f64>) -> DepthMap {
        let valid = vec![true; w * h];
        DepthMap::from_parts(w, h, values, valid).unwrap()
    }

    #[test]
    fn pcd_exact_and_uniform_error() {
        let gt = dm(4, 4, vec![2.0; 16]);
        assert_eq!(percent_correct_depth(&gt, &gt, 0.1).unwrap(), 100.0);

        let double = dm(4, 4, vec![4.0; 16]);
        assert_eq!(percent_correct_depth(&double, &gt, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn pcd_counts_half_correct() {
        let gt = dm(4, 2, vec![2.0; 8]);
        let mut values = vec![2.0; 8];
        for v in values.iter_mut().take(4) {
            *v = 4.0;
        }
        let pred = dm(4, 2, values);
        assert_eq!(percent_correct_depth(&pred, &gt, 0.1).unwrap(), 50.0);
    }

    #[test]
    fn pcd_monotone_in_tau_and_excludes_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt_vals: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..5.0)).collect();
        let pred_vals: Vec<f64> =
            gt_vals.iter().map(|v| v * rng.gen_range(0.8..1.2)).collect();
        let gt = dm(8, 8, gt_vals);
        let pred = dm(8, 8, pred_vals);
        let mut last = 0.0;
        for tau in [0.01, 0.05, 0.1, 0.2, 0.5] {
            let pcd = percent_correct_depth(&pred, &gt, tau).unwrap();
            assert!((0.0..=100.0).contains(&pcd));
            assert!(pcd >= last);
            last = pcd;
        }

        let nothing = DepthMap::from_parts(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(
            percent_correct_depth(&nothing, &nothing, 0.1),
            Err(Error::NoValidPixels(_))
        ));
    }

    fn line_trajectory(n: usize, step: f64) -> Vec<(f64, PoseSE3)> {
        (0..n)
            .map(|i| {
                let pose = PoseSE3::exp(&Vector6::new(
                    i as f64 * step,
                    (i as f64 * 0.05).sin() * 0.1,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                ));
                (i as f64 * 0.1, pose)
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let traj = line_trajectory(50, 0.02);
        assert_relative_eq!(ate_rmse(&traj, &traj).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rigid_offset_is_absorbed_by_alignment() {
        let gt = line_trajectory(50, 0.02);
        let offset = PoseSE3::exp(&Vector6::new(1.0, -2.0, 0.5, 0.2, -0.1, 0.3));
        let est: Vec<(f64, PoseSE3)> =
            gt.iter().map(|(t, p)| (*t, offset.compose(p))).collect();
        assert!(ate_rmse(&est, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn ate_invariant_under_rigid_transform_of_estimate() {
        let gt = line_trajectory(60, 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy: Vec<(f64, PoseSE3)> = gt
            .iter()
            .map(|(t, p)| {
                let d = Vector6::from_fn(|_, _| rng.gen_range(-0.01..0.01));
                (*t, PoseSE3::exp(&d).compose(p))
            })
            .collect();
        let base = ate_rmse(&noisy, &gt).unwrap();
        let transform = PoseSE3::exp(&Vector6::new(3.0, 1.0, -2.0, 0.7, -0.4, 0.2));
        let moved: Vec<(f64, PoseSE3)> =
            noisy.iter().map(|(t, p)| (*t, transform.compose(p))).collect();
        let after = ate_rmse(&moved, &gt).unwrap();
        assert!((base - after).abs() < 1e-9, "{base} vs {after}");
    }

    #[test]
    fn insufficient_overlap_is_rejected() {
        let gt = line_trajectory(10, 0.02);
        // Timestamps shifted outside the association window.
        let est: Vec<(f64, PoseSE3)> =
            gt.iter().map(|(t, p)| (*t + 1.0, *p)).collect();
        assert!(matches!(ate_rmse(&est, &gt), Err(Error::InsufficientOverlap)));
        assert!(matches!(ate_rmse(&gt[..1], &gt), Err(Error::InsufficientOverlap)));
    }

    #[test]
    fn ate_of_seeded_noise_is_pinned() {
        // 100 poses with per-pose position noise sigma = 0.01 m; the RMSE
        // lands inside (0.005, 0.02) and the exact seeded value is frozen.
        let gt = line_trajectory(100, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let noisy: Vec<(f64, PoseSE3)> = gt
            .iter()
            .map(|(t, p)| {
                let d = Vector6::new(
                    gauss(&mut rng) * 0.01,
                    gauss(&mut rng) * 0.01,
                    gauss(&mut rng) * 0.01,
                    0.0,
                    0.0,
                    0.0,
                );
                (*t, PoseSE3::exp(&d).compose(p))
            })
            .collect();
        let rmse = ate_rmse(&noisy, &gt).unwrap();
        assert!(rmse > 0.005 && rmse < 0.02, "rmse {rmse}");
        assert_relative_eq!(rmse, PINNED_NOISE_ATE, epsilon = 1e-9);
    }

    const PINNED_NOISE_ATE: f64 = 0.01702191131630578;
}
