//! Keyframe store, uncertainty-weighted depth fusion and global map export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::camera::{unproject, CameraIntrinsics};
use crate::depth::{DepthMap, UncertaintyMap};
use crate::error::{Error, Result};
use crate::pose::Keyframe;

/// Variance floor guarding the inverse-variance weights.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Keyframes by id plus the reference links recording which keyframe
/// spawned which.
#[derive(Debug, Clone, Default)]
pub struct KeyframeGraph {
    nodes: BTreeMap<u64, Keyframe>,
    /// spawned id -> reference id
    parents: BTreeMap<u64, u64>,
}

impl KeyframeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the root keyframe (no reference link).
    pub fn insert_root(&mut self, kf: Keyframe) -> Result<()> {
        if self.nodes.contains_key(&kf.id) {
            return Err(Error::InvalidConfig(format!("duplicate keyframe id {}", kf.id)));
        }
        self.nodes.insert(kf.id, kf);
        Ok(())
    }

    /// Inserts a keyframe spawned from `reference_id`.
    pub fn insert_spawned(&mut self, kf: Keyframe, reference_id: u64) -> Result<()> {
        if self.nodes.contains_key(&kf.id) {
            return Err(Error::InvalidConfig(format!("duplicate keyframe id {}", kf.id)));
        }
        if !self.nodes.contains_key(&reference_id) {
            return Err(Error::InvalidConfig(format!(
                "reference keyframe {reference_id} does not exist"
            )));
        }
        self.parents.insert(kf.id, reference_id);
        self.nodes.insert(kf.id, kf);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Keyframe> {
        self.nodes.get(&id)
    }

    pub fn reference_of(&self, id: u64) -> Option<u64> {
        self.parents.get(&id).copied()
    }

    /// Keyframes in id order.
    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.nodes.values()
    }
}

/// Fuses two depth estimates per pixel by inverse-variance weighting.
///
/// Operates in inverse depth, where the disparity-derived variances are
/// homogeneous: `i = (i1/v1 + i2/v2) / (1/v1 + 1/v2)`, `v = 1/(1/v1 + 1/v2)`.
/// Pixels valid in only one input copy through; the fused uncertainty
/// never exceeds either input.
pub fn fuse_depth(
    existing: (&DepthMap, &UncertaintyMap),
    incoming: (&DepthMap, &UncertaintyMap),
) -> Result<(DepthMap, UncertaintyMap)> {
    let (d1, u1) = existing;
    let (d2, u2) = incoming;
    let (w, h) = (d1.width(), d1.height());
    if d2.width() != w
        || d2.height() != h
        || u1.width() != w
        || u1.height() != h
        || u2.width() != w
        || u2.height() != h
    {
        return Err(Error::DimensionMismatch(format!(
            "fusion inputs disagree: {}x{} vs {}x{}",
            w,
            h,
            d2.width(),
            d2.height()
        )));
    }

    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    let mut unc = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match (d1.get(x, y), d2.get(x, y)) {
                (Some(a), Some(b)) => {
                    let va = u1.get(x, y).max(VARIANCE_FLOOR);
                    let vb = u2.get(x, y).max(VARIANCE_FLOOR);
                    let (ia, ib) = (1.0 / a, 1.0 / b);
                    let wsum = 1.0 / va + 1.0 / vb;
                    let fused_inv = (ia / va + ib / vb) / wsum;
                    depth[i] = 1.0 / fused_inv;
                    unc[i] = 1.0 / wsum;
                    valid[i] = true;
                }
                (Some(a), None) => {
                    depth[i] = a;
                    unc[i] = u1.get(x, y);
                    valid[i] = true;
                }
                (None, Some(b)) => {
                    depth[i] = b;
                    unc[i] = u2.get(x, y);
                    valid[i] = true;
                }
                (None, None) => {}
            }
        }
    }
    Ok((
        DepthMap::from_parts(w, h, depth, valid)?,
        UncertaintyMap::from_values(w, h, unc)?,
    ))
}

/// Renders the graph as an ASCII PLY point cloud and returns the content
/// plus the exact point count declared in the header.
///
/// Every valid depth pixel at stride intervals is unprojected, moved to the
/// world frame and written as `x y z intensity`.
pub fn pointcloud_ply(
    graph: &KeyframeGraph,
    intrinsics: &CameraIntrinsics,
    stride: usize,
) -> Result<(String, usize)> {
    if graph.is_empty() {
        return Err(Error::EmptyMap);
    }
    let stride = stride.max(1);
    let mut body = String::new();
    let mut count = 0usize;
    for kf in graph.keyframes() {
        let mut y = 0;
        while y < kf.depth.height() {
            let mut x = 0;
            while x < kf.depth.width() {
                if let Some(d) = kf.depth.get(x, y) {
                    let p = unproject(x as f64, y as f64, d, intrinsics)
                        .expect("valid depth is positive");
                    let world = kf.pose_world.transform(&p);
                    let intensity = kf.image.get(x, y);
                    body.push_str(&format!("{} {} {} {}\n", world.x, world.y, world.z, intensity));
                    count += 1;
                }
                x += stride;
            }
            y += stride;
        }
    }
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {count}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n"
    );
    Ok((header + &body, count))
}

/// Writes [`pointcloud_ply`] output to a file, returning the point count.
pub fn export_pointcloud(
    path: &Path,
    graph: &KeyframeGraph,
    intrinsics: &CameraIntrinsics,
    stride: usize,
) -> Result<usize> {
    let (content, count) = pointcloud_ply(graph, intrinsics, stride)?;
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;
    use crate::se3::PoseSE3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps(w: usize, h: usize, depth: f64, unc: f64) -> (DepthMap, UncertaintyMap) {
        (
            DepthMap::constant(w, h, depth).unwrap(),
            UncertaintyMap::constant(w, h, unc).unwrap(),
        )
    }

    #[test]
    fn equal_uncertainty_fuses_in_inverse_depth() {
        let (d1, u1) = maps(4, 3, 2.0, 0.1);
        let (d2, u2) = maps(4, 3, 4.0, 0.1);
        let (fused, unc) = fuse_depth((&d1, &u1), (&d2, &u2)).unwrap();
        // Equal weights average the inverse depths: (1/2 + 1/4)/2 = 3/8.
        for y in 0..3 {
            for x in 0..4 {
                assert_relative_eq!(fused.get(x, y).unwrap(), 8.0 / 3.0, epsilon = 1e-12);
                assert_relative_eq!(unc.get(x, y), 0.05, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dominant_weight_wins() {
        let (d1, u1) = maps(4, 3, 2.0, 1e-6);
        let (d2, u2) = maps(4, 3, 4.0, 1e6);
        let (fused, _) = fuse_depth((&d1, &u1), (&d2, &u2)).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert!((fused.get(x, y).unwrap() - 2.0).abs() / 2.0 < 1e-6);
            }
        }
    }

    #[test]
    fn single_valid_pixels_copy_through() {
        let d1 = DepthMap::from_parts(2, 1, vec![2.0, 0.0], vec![true, false]).unwrap();
        let u1 = UncertaintyMap::from_values(2, 1, vec![0.3, 0.0]).unwrap();
        let d2 = DepthMap::from_parts(2, 1, vec![0.0, 5.0], vec![false, true]).unwrap();
        let u2 = UncertaintyMap::from_values(2, 1, vec![0.0, 0.7]).unwrap();
        let (fused, unc) = fuse_depth((&d1, &u1), (&d2, &u2)).unwrap();
        assert_eq!(fused.get(0, 0), Some(2.0));
        assert_eq!(unc.get(0, 0), 0.3);
        assert_eq!(fused.get(1, 0), Some(5.0));
        assert_eq!(unc.get(1, 0), 0.7);
    }

    #[test]
    fn matches_per_pixel_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (9, 7);
        let gen_maps = |rng: &mut ChaCha8Rng| {
            let d: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.5..10.0)).collect();
            let u: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1e-4..2.0)).collect();
            (
                DepthMap::from_parts(w, h, d, vec![true; w * h]).unwrap(),
                UncertaintyMap::from_values(w, h, u).unwrap(),
            )
        };
        let (d1, u1) = gen_maps(&mut rng);
        let (d2, u2) = gen_maps(&mut rng);
        let (fused, unc) = fuse_depth((&d1, &u1), (&d2, &u2)).unwrap();
        for y in 0..h {
            for x in 0..w {
                // Direct evaluation of the two inverse-depth formulas.
                let (va, vb) = (u1.get(x, y), u2.get(x, y));
                let (ia, ib) = (1.0 / d1.get(x, y).unwrap(), 1.0 / d2.get(x, y).unwrap());
                let wsum = 1.0 / va + 1.0 / vb;
                let expect_d = 1.0 / ((ia / va + ib / vb) / wsum);
                let expect_v = 1.0 / wsum;
                assert_relative_eq!(fused.get(x, y).unwrap(), expect_d, epsilon = 1e-12);
                assert_relative_eq!(unc.get(x, y), expect_v, epsilon = 1e-12);
                assert!(unc.get(x, y) <= va.min(vb) + 1e-15);
            }
        }
    }

    #[test]
    fn fusion_is_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (6, 5);
        let d: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.5..10.0)).collect();
        let u: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1e-4..2.0)).collect();
        let d1 = DepthMap::from_parts(w, h, d.clone(), vec![true; w * h]).unwrap();
        let u1 = UncertaintyMap::from_values(w, h, u.clone()).unwrap();
        let d2 = DepthMap::from_parts(
            w,
            h,
            d.iter().map(|v| v * 1.7).collect(),
            vec![true; w * h],
        )
        .unwrap();
        let u2 = UncertaintyMap::from_values(w, h, u.iter().map(|v| v * 0.3).collect()).unwrap();

        let (f_ab, v_ab) = fuse_depth((&d1, &u1), (&d2, &u2)).unwrap();
        let (f_ba, v_ba) = fuse_depth((&d2, &u2), (&d1, &u1)).unwrap();
        for i in 0..w * h {
            assert!((f_ab.values()[i] - f_ba.values()[i]).abs() < 1e-12);
            assert!((v_ab.values()[i] - v_ba.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_fusion_halves_variance_and_keeps_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (w, h) = (5, 4);
        let d: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.5..10.0)).collect();
        let u: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1e-4..2.0)).collect();
        let dm = DepthMap::from_parts(w, h, d, vec![true; w * h]).unwrap();
        let um = UncertaintyMap::from_values(w, h, u).unwrap();
        let (fused, unc) = fuse_depth((&dm, &um), (&dm, &um)).unwrap();
        for i in 0..w * h {
            let rel = (fused.values()[i] - dm.values()[i]).abs() / dm.values()[i];
            assert!(rel < 1e-12, "depth moved by {rel}");
            let vrel = (unc.values()[i] - um.values()[i] / 2.0).abs() / (um.values()[i] / 2.0);
            assert!(vrel < 1e-12, "variance not halved: {vrel}");
        }
    }

    fn plane_graph() -> (KeyframeGraph, CameraIntrinsics) {
        let k = CameraIntrinsics::new(20.0, 20.0, 7.5, 7.5, None).unwrap();
        let img = ImageBuffer::from_fn(16, 16, |x, y| ((x + y) % 5) as f64 / 5.0);
        let depth = DepthMap::constant(16, 16, 3.0).unwrap();
        let unc = UncertaintyMap::constant(16, 16, 0.1).unwrap();
        let kf = Keyframe::new(0, img, depth, unc, PoseSE3::identity(), 0.01).unwrap();
        let mut graph = KeyframeGraph::new();
        graph.insert_root(kf).unwrap();
        (graph, k)
    }

    #[test]
    fn graph_invariants() {
        let (mut graph, _) = plane_graph();
        let dup = graph.get(0).unwrap().clone();
        assert!(graph.insert_root(dup.clone()).is_err());
        let mut spawned = dup.clone();
        spawned.id = 1;
        assert!(graph.insert_spawned(spawned.clone(), 7).is_err());
        graph.insert_spawned(spawned, 0).unwrap();
        assert_eq!(graph.reference_of(1), Some(0));
        assert_eq!(graph.reference_of(0), None);
        assert_eq!(graph.len(), 2);
    }

    #[test]
    fn ply_header_count_matches_body() {
        let (graph, k) = plane_graph();
        for stride in [1usize, 2, 3] {
            let (content, count) = pointcloud_ply(&graph, &k, stride).unwrap();
            let expected_per_axis = (16 + stride - 1) / stride;
            assert_eq!(count, expected_per_axis * expected_per_axis);
            assert!(content.contains(&format!("element vertex {count}")));
            let body_lines = content
                .lines()
                .skip_while(|l| *l != "end_header")
                .skip(1)
                .count();
            assert_eq!(body_lines, count);
        }
        assert!(matches!(
            pointcloud_ply(&KeyframeGraph::new(), &k, 1),
            Err(Error::EmptyMap)
        ));
    }

    #[test]
    fn exported_points_lie_on_the_plane() {
        let (graph, k) = plane_graph();
        let (content, _) = pointcloud_ply(&graph, &k, 1).unwrap();
        for line in content.lines().skip_while(|l| *l != "end_header").skip(1) {
            let parts: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
            assert_eq!(parts.len(), 4);
            assert!((parts[2] - 3.0).abs() < 1e-3, "z = {}", parts[2]);
            assert!(parts[3] >= 0.0 && parts[3] <= 1.0);
        }
    }

    #[test]
    fn stride_subsamples_even_coordinates() {
        let (graph, k) = plane_graph();
        let (full, _) = pointcloud_ply(&graph, &k, 1).unwrap();
        let (half, count_half) = pointcloud_ply(&graph, &k, 2).unwrap();
        let full_set: std::collections::HashSet<&str> =
            full.lines().skip_while(|l| *l != "end_header").skip(1).collect();
        let mut present = 0;
        for line in half.lines().skip_while(|l| *l != "end_header").skip(1) {
            assert!(full_set.contains(line));
            present += 1;
        }
        assert_eq!(present, count_half);
        assert_eq!(count_half, 64);
    }
}
