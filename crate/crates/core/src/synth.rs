//! Synthetic stereo scenes with exact ground truth.
//!
//! Scenes are raycast against analytic geometry (a fronto-parallel plane or
//! the interior of an axis-aligned box) shaded by a smooth procedural 3-D
//! texture, so every rendered frame comes with its exact depth map and
//! camera pose. Left and right views sample the same continuous radiance,
//! which keeps stereo pairs photometrically consistent to float precision.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::par;
use crate::se3::PoseSE3;

/// Scene geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SceneKind {
    /// Plane `z = depth` (world frame), unbounded.
    FrontoPlane { depth: f64 },
    /// Interior of an axis-aligned box centered at the origin.
    BoxRoom { half_extents: [f64; 3] },
    /// Box interior elongated along +z: x in `[-width/2, width/2]`,
    /// y in `[-height/2, height/2]`, z in `[-1, length]`. The far wall at
    /// `z = length` faces a camera looking down +z.
    TexturedCorridor { width: f64, height: f64, length: f64 },
}

/// Camera trajectory through the scene; orientation stays identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectorySpec {
    Static { frames: usize },
    Line { start: [f64; 3], end: [f64; 3], frames: usize },
    /// One sinusoidal lateral sweep of `amplitude` meters plus a linear
    /// forward drift of `forward` meters over the whole run.
    LateralSweep { amplitude: f64, forward: f64, frames: usize },
}

impl TrajectorySpec {
    pub fn frames(&self) -> usize {
        match self {
            TrajectorySpec::Static { frames }
            | TrajectorySpec::Line { frames, .. }
            | TrajectorySpec::LateralSweep { frames, .. } => *frames,
        }
    }

    /// Camera-to-world pose of frame `k`.
    pub fn pose(&self, k: usize) -> PoseSE3 {
        let t = match self {
            TrajectorySpec::Static { .. } => Vector3::zeros(),
            TrajectorySpec::Line { start, end, frames } => {
                let a = Vector3::from_column_slice(start);
                let b = Vector3::from_column_slice(end);
                let s = if *frames > 1 { k as f64 / (*frames as f64 - 1.0) } else { 0.0 };
                a + (b - a) * s
            }
            TrajectorySpec::LateralSweep { amplitude, forward, frames } => {
                let s = if *frames > 1 { k as f64 / (*frames as f64 - 1.0) } else { 0.0 };
                Vector3::new(
                    amplitude * (std::f64::consts::TAU * s).sin(),
                    0.0,
                    forward * s,
                )
            }
        };
        PoseSE3::from_parts(Matrix3::identity(), t).expect("identity rotation")
    }
}

/// Full description of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub scene: SceneKind,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: TrajectorySpec,
    pub texture_seed: u64,
    /// Texture spatial frequency range, rad/m. Lower values give smoother
    /// shading.
    #[serde(default = "default_texture_freq")]
    pub texture_freq: (f64, f64),
    /// Frame rate used to synthesize timestamps.
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    10.0
}

fn default_texture_freq() -> (f64, f64) {
    (2.0, 9.0)
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        self.intrinsics.baseline()?;
        if self.trajectory.frames() == 0 {
            return Err(Error::InvalidConfig("trajectory needs at least one frame".into()));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        if self.texture_freq.0 <= 0.0 || self.texture_freq.1 <= self.texture_freq.0 {
            return Err(Error::InvalidConfig(format!(
                "texture frequency range {:?} must be positive and increasing",
                self.texture_freq
            )));
        }
        Ok(())
    }
}

/// Smooth seeded 3-D texture: a fixed mixture of sinusoids.
#[derive(Debug, Clone)]
pub struct Texture3 {
    waves: Vec<(Vector3<f64>, f64, f64)>,
}

impl Texture3 {
    pub fn new(seed: u64) -> Self {
        Self::with_frequencies(seed, 2.0, 9.0)
    }

    /// Texture with spatial frequencies drawn from `[freq_lo, freq_hi)`
    /// rad/m. Lower frequencies give smoother shading, which keeps
    /// subpixel interpolation faithful for alignment fixtures.
    pub fn with_frequencies(seed: u64, freq_lo: f64, freq_hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..8)
            .map(|i| {
                let dir = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                let freq = rng.gen_range(freq_lo..freq_hi);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = 1.0 / (1.0 + i as f64 * 0.5);
                (dir * freq, phase, amp)
            })
            .collect();
        Self { waves }
    }

    /// Intensity in `[0.05, 0.95]` at a world point.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let total_amp: f64 = self.waves.iter().map(|(_, _, a)| a).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phase, amp)| amp * (k.dot(p) + phase).sin())
            .sum();
        0.5 + 0.45 * s / total_amp
    }
}

fn scene_box(kind: &SceneKind) -> Option<(Vector3<f64>, Vector3<f64>)> {
    match kind {
        SceneKind::FrontoPlane { .. } => None,
        SceneKind::BoxRoom { half_extents } => Some((
            Vector3::new(-half_extents[0], -half_extents[1], -half_extents[2]),
            Vector3::new(half_extents[0], half_extents[1], half_extents[2]),
        )),
        SceneKind::TexturedCorridor { width, height, length } => Some((
            Vector3::new(-width / 2.0, -height / 2.0, -1.0),
            Vector3::new(width / 2.0, height / 2.0, *length),
        )),
    }
}

/// First wall hit by an interior ray (slab method): smallest positive `t`
/// where `origin + t * dir` reaches one of the box faces from inside.
fn ray_box_exit(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-15 {
            continue;
        }
        let face = if d > 0.0 { hi[axis] } else { lo[axis] };
        let t = (face - origin[axis]) / d;
        if t > 0.0 {
            t_exit = t_exit.min(t);
        }
    }
    t_exit.is_finite().then_some(t_exit)
}

/// Ray parameter of the hit, or `None` when the ray misses.
///
/// `dir` has camera-frame z component 1, so the returned parameter is the
/// camera-frame depth directly.
pub fn intersect(kind: &SceneKind, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match kind {
        SceneKind::FrontoPlane { depth } => {
            if dir.z.abs() < 1e-15 {
                return None;
            }
            let t = (depth - origin.z) / dir.z;
            (t > 0.0).then_some(t)
        }
        _ => {
            let (lo, hi) = scene_box(kind).expect("box scenes");
            ray_box_exit(origin, dir, &lo, &hi)
        }
    }
}

/// One rendered frame with exact ground truth.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub timestamp: f64,
    pub left: ImageBuffer,
    pub right: ImageBuffer,
    /// Exact depth of the left view.
    pub depth: DepthMap,
    /// Camera-to-world pose of the left camera.
    pub pose: PoseSE3,
}

/// A generated sequence: frames plus the shared texture and config.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub config: SynthSceneConfig,
    pub frames: Vec<SynthFrame>,
}

/// Renders one view: image plus exact depth map.
///
/// `pose` is camera-to-world. Rays that miss the scene are flagged invalid
/// in the depth map and shaded mid-gray.
pub fn render_view(
    kind: &SceneKind,
    texture: &Texture3,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> (ImageBuffer, DepthMap) {
    let origin = *pose.translation();
    let rot = *pose.rotation();
    let rows = par::map_indexed(height, |y| {
        let mut intensity = vec![0.5f64; width];
        let mut depth = vec![0.0f64; width];
        let mut valid = vec![false; width];
        for x in 0..width {
            let dir_cam = Vector3::new(
                (x as f64 - intrinsics.cx) / intrinsics.fx,
                (y as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let dir = rot * dir_cam;
            if let Some(t) = intersect(kind, &origin, &dir) {
                let hit = origin + dir * t;
                intensity[x] = texture.sample(&hit);
                depth[x] = t;
                valid[x] = true;
            }
        }
        (intensity, depth, valid)
    });

    let mut img = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for (i, d, v) in rows {
        img.extend_from_slice(&i);
        depth.extend_from_slice(&d);
        valid.extend_from_slice(&v);
    }
    (
        ImageBuffer::from_data(width, height, img).expect("texture output in [0,1]"),
        DepthMap::from_parts(width, height, depth, valid).expect("positive hits"),
    )
}

/// Generates the whole sequence: per frame a left and right view, the exact
/// left-view depth, pose, and timestamp. Deterministic per config.
pub fn generate_synthetic(config: &SynthSceneConfig) -> Result<SynthSequence> {
    config.validate()?;
    let texture = Texture3::with_frequencies(
        config.texture_seed,
        config.texture_freq.0,
        config.texture_freq.1,
    );
    let baseline = config.intrinsics.baseline()?;
    let n = config.trajectory.frames();
    let frames = (0..n)
        .map(|k| {
            let pose = config.trajectory.pose(k);
            let right_offset =
                PoseSE3::from_parts(Matrix3::identity(), Vector3::new(baseline, 0.0, 0.0))
                    .expect("identity rotation");
            let right_pose = pose.compose(&right_offset);
            let (left, depth) = render_view(
                &config.scene,
                &texture,
                &pose,
                &config.intrinsics,
                config.width,
                config.height,
            );
            let (right, _) = render_view(
                &config.scene,
                &texture,
                &right_pose,
                &config.intrinsics,
                config.width,
                config.height,
            );
            SynthFrame {
                timestamp: k as f64 / config.fps,
                left,
                right,
                depth,
                pose,
            }
        })
        .collect();
    Ok(SynthSequence { config: config.clone(), frames })
}
