//! Sequence ingestion and trajectory file I/O.
//!
//! A sequence directory holds:
//!
//! ```text
//! times.txt          one `<timestamp> <relative-image-path>` line per frame
//! intrinsics.json    fx, fy, cx, cy, optional baseline and depth_scale
//! images/            grayscale frames (PNG or PGM)
//! right/             optional right-camera frames for stereo training
//! depth/             optional 16-bit ground-truth depth PNGs, one per frame
//! groundtruth.txt    optional trajectory, one `t tx ty tz qx qy qz qw` line
//! ```
//!
//! Trajectories use the plain-text format `timestamp tx ty tz qx qy qz qw`
//! with six decimal places.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io::{self, DEPTH_PNG_SCALE};
use crate::se3::PoseSE3;
use crate::synth::SynthSequence;

/// One frame reference inside a sequence directory.
#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub timestamp: f64,
    pub image_path: PathBuf,
    /// Right-camera image, when the sequence carries stereo pairs.
    pub right_path: Option<PathBuf>,
    /// Ground-truth depth map, when present.
    pub depth_path: Option<PathBuf>,
}

/// A validated sequence: frame index, intrinsics and optional ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub root: PathBuf,
    pub frames: Vec<SequenceFrame>,
    pub intrinsics: CameraIntrinsics,
    /// Counts per meter in the depth PNGs.
    pub depth_scale: f64,
    pub groundtruth: Option<Vec<(f64, PoseSE3)>>,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    baseline: Option<f64>,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    DEPTH_PNG_SCALE
}

/// Loads and validates a sequence directory.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let intrinsics_path = dir.join("intrinsics.json");
    if !intrinsics_path.exists() {
        return Err(Error::MissingIntrinsics(intrinsics_path));
    }
    let intr_file: IntrinsicsFile = serde_json::from_str(&fs::read_to_string(&intrinsics_path)?)?;
    let intrinsics = CameraIntrinsics::new(
        intr_file.fx,
        intr_file.fy,
        intr_file.cx,
        intr_file.cy,
        intr_file.baseline,
    )?;

    let times_path = dir.join("times.txt");
    if !times_path.exists() {
        return Err(Error::MissingTimestamps(times_path));
    }
    let mut frames = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, line) in fs::read_to_string(&times_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(t), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: times_path.clone(),
                msg: format!("line {}: expected `<timestamp> <image>`", i + 1),
            });
        };
        let timestamp: f64 = t.parse().map_err(|_| Error::Parse {
            path: times_path.clone(),
            msg: format!("line {}: bad timestamp {t}", i + 1),
        })?;
        if timestamp <= last_t {
            return Err(Error::NonMonotonicTimestamps(frames.len()));
        }
        last_t = timestamp;

        let image_path = dir.join(rel);
        if !image_path.exists() {
            return Err(Error::MissingImageFile(image_path));
        }
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let file_name = image_path.file_name().map(PathBuf::from).unwrap_or_default();
        let right = dir.join("right").join(&file_name);
        let depth = dir.join("depth").join(format!("{stem}.png"));
        frames.push(SequenceFrame {
            timestamp,
            image_path,
            right_path: right.exists().then_some(right),
            depth_path: depth.exists().then_some(depth),
        });
    }

    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() { Some(read_tum(&gt_path)?) } else { None };

    Ok(Sequence {
        root: dir.to_path_buf(),
        frames,
        intrinsics,
        depth_scale: intr_file.depth_scale,
        groundtruth,
    })
}

impl Sequence {
    pub fn load_image(&self, index: usize) -> Result<ImageBuffer> {
        io::load_image(&self.frames[index].image_path)
    }

    pub fn load_right_image(&self, index: usize) -> Result<Option<ImageBuffer>> {
        match &self.frames[index].right_path {
            Some(p) => Ok(Some(io::load_image(p)?)),
            None => Ok(None),
        }
    }

    pub fn load_depth(&self, index: usize) -> Result<Option<DepthMap>> {
        match &self.frames[index].depth_path {
            Some(p) => Ok(Some(io::load_depth_png(p, self.depth_scale)?)),
            None => Ok(None),
        }
    }
}

/// Reads a trajectory: `timestamp tx ty tz qx qy qz qw` per line, `#`
/// comments skipped.
pub fn read_tum(path: &Path) -> Result<Vec<(f64, PoseSE3)>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingImageFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: bad number", i + 1),
            })?;
        if vals.len() != 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: expected 8 fields, got {}", i + 1, vals.len()),
            });
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            vals[7], vals[4], vals[5], vals[6],
        ));
        let pose = PoseSE3::from_parts(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(vals[1], vals[2], vals[3]),
        )?;
        out.push((vals[0], pose));
    }
    Ok(out)
}

/// Writes a trajectory in the same format, six decimal places.
pub fn write_tum(path: &Path, trajectory: &[(f64, PoseSE3)]) -> Result<()> {
    let mut out = String::new();
    for (t, pose) in trajectory {
        let tr = pose.translation();
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            *pose.rotation(),
        ));
        out.push_str(&format!(
            "{t:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            tr.x,
            tr.y,
            tr.z,
            q.i,
            q.j,
            q.k,
            q.w
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Writes a rendered synthetic sequence into the on-disk layout, including
/// right images, exact depth and the ground-truth trajectory.
pub fn write_synth_sequence(dir: &Path, seq: &SynthSequence) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("right"))?;
    fs::create_dir_all(dir.join("depth"))?;

    let intr = IntrinsicsFile {
        fx: seq.config.intrinsics.fx,
        fy: seq.config.intrinsics.fy,
        cx: seq.config.intrinsics.cx,
        cy: seq.config.intrinsics.cy,
        baseline: seq.config.intrinsics.baseline,
        depth_scale: DEPTH_PNG_SCALE,
    };
    fs::write(dir.join("intrinsics.json"), serde_json::to_string_pretty(&intr)?)?;

    let mut times = String::new();
    let mut trajectory = Vec::new();
    for (i, frame) in seq.frames.iter().enumerate() {
        let name = format!("{i:05}.png");
        io::save_png8(&dir.join("images").join(&name), &frame.left)?;
        io::save_png8(&dir.join("right").join(&name), &frame.right)?;
        io::save_depth_png(&dir.join("depth").join(&name), &frame.depth, DEPTH_PNG_SCALE)?;
        times.push_str(&format!("{:.6} images/{name}\n", frame.timestamp));
        trajectory.push((frame.timestamp, frame.pose));
    }
    fs::write(dir.join("times.txt"), times)?;
    write_tum(&dir.join("groundtruth.txt"), &trajectory)?;
    Ok(())
}
