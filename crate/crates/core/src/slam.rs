//! End-to-end pipeline: disparity prediction, keyframe tracking, optical
//! flow seeding, EKF smoothing and metrics.
//!
//! Per frame: the capsule network predicts left/right disparity on the
//! (possibly downscaled) image; disparity becomes depth plus a left-right
//! uncertainty map; the frame is aligned photometrically against the
//! nearest keyframe, seeded by the median optical flow converted into a
//! small-angle rotation guess; the spawn policy decides whether the frame
//! becomes a new keyframe; and the pose stream feeds the EKF. Tracking
//! failures are recorded and the pipeline respawns a keyframe at the
//! filter's predicted pose rather than aborting.

use nalgebra::{UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::capsnet::{uncertainty_from_lr, CapsNetParams};
use crate::dataset::Sequence;
use crate::depth::{DepthMap, UncertaintyMap};
use crate::ekf::{self, EkfState, NoiseConfig};
use crate::error::{Error, Result};
use crate::flow::{dominant_motion, lucas_kanade, FlowConfig};
use crate::image::ImageBuffer;
use crate::keypoints::{corner_response, detect_corners};
use crate::mapping::KeyframeGraph;
use crate::metrics::{ate_rmse, percent_correct_depth};
use crate::pose::{
    estimate_pose, keyframe_spawn_policy, select_reference_keyframe, AlignConfig, Keyframe,
    SpawnConfig, SpawnDecision,
};
use crate::se3::PoseSE3;

/// In-memory sequence: frames, intrinsics and optional ground truth.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub frames: Vec<(f64, ImageBuffer)>,
    pub intrinsics: CameraIntrinsics,
    pub groundtruth: Option<Vec<(f64, PoseSE3)>>,
    /// Ground-truth depth per frame, where available; may be empty.
    pub gt_depth: Vec<Option<DepthMap>>,
}

impl SequenceData {
    /// Loads every frame of an on-disk sequence.
    pub fn from_sequence(seq: &Sequence) -> Result<Self> {
        let mut frames = Vec::with_capacity(seq.frames.len());
        let mut gt_depth = Vec::with_capacity(seq.frames.len());
        for (i, f) in seq.frames.iter().enumerate() {
            frames.push((f.timestamp, seq.load_image(i)?));
            gt_depth.push(seq.load_depth(i)?);
        }
        Ok(Self {
            frames,
            intrinsics: seq.intrinsics,
            groundtruth: seq.groundtruth.clone(),
            gt_depth,
        })
    }

    /// Wraps a rendered synthetic sequence.
    pub fn from_synth(seq: &crate::synth::SynthSequence) -> Self {
        Self {
            frames: seq.frames.iter().map(|f| (f.timestamp, f.left.clone())).collect(),
            intrinsics: seq.config.intrinsics,
            groundtruth: Some(seq.frames.iter().map(|f| (f.timestamp, f.pose)).collect()),
            gt_depth: seq.frames.iter().map(|f| Some(f.depth.clone())).collect(),
        }
    }
}

/// Pipeline configuration.
#[derive(Debug, Clone)]
pub struct SlamConfig {
    pub align: AlignConfig,
    pub spawn: SpawnConfig,
    pub noise: NoiseConfig,
    pub flow: FlowConfig,
    /// Corner detection for flow seeding.
    pub corner_sigma: f64,
    pub corner_threshold: f64,
    pub corner_nms_radius: f64,
    pub max_keypoints: usize,
    /// Relative tolerance of the percent-correct-depth metric.
    pub depth_tau: f64,
    /// Valid-pixel ratio below which tracking counts as lost.
    pub min_track_ratio: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            // Coarse-to-fine alignment: per-frame motion can reach several
            // pixels, and the coarse levels also smooth interpolation kinks
            // that can stall a cold single-scale start.
            align: AlignConfig { pyramid_levels: 3, ..AlignConfig::default() },
            spawn: SpawnConfig::default(),
            noise: NoiseConfig::default(),
            flow: FlowConfig::default(),
            corner_sigma: 1.5,
            corner_threshold: 1e-6,
            corner_nms_radius: 5.0,
            max_keypoints: 60,
            depth_tau: crate::metrics::DEFAULT_DEPTH_TAU,
            min_track_ratio: 0.25,
        }
    }
}

/// Summary of one pipeline run. Serialized as the report JSON; fields are
/// emitted in declaration order, so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlamReport {
    pub frames: usize,
    pub keyframes: usize,
    pub tracking_failures: usize,
    pub tracking_failure_frames: Vec<usize>,
    pub ate_rmse: Option<f64>,
    pub percent_correct_depth: Option<f64>,
    pub gt_trajectory_length: Option<f64>,
    pub mean_valid_pixel_ratio: f64,
}

/// Full pipeline output.
pub struct SlamOutput {
    pub report: SlamReport,
    /// Per-frame pose estimates straight from alignment.
    pub trajectory_raw: Vec<(f64, PoseSE3)>,
    /// EKF-smoothed trajectory.
    pub trajectory_filtered: Vec<(f64, PoseSE3)>,
    pub graph: KeyframeGraph,
}

struct FramePrediction {
    depth: DepthMap,
    uncertainty: UncertaintyMap,
}

/// Network prediction upsampled back to frame resolution.
fn predict_frame(
    image: &ImageBuffer,
    params: &CapsNetParams,
    intrinsics: &CameraIntrinsics,
    factor: usize,
) -> Result<FramePrediction> {
    let net_input =
        if factor == 1 { image.clone() } else { image.downscale_box(factor)? };
    let (dl, dr) = params.predict_disparity(&net_input)?;
    let scaled = intrinsics.scaled(1.0 / factor as f64, 1.0 / factor as f64);
    let depth = dl.to_depth(&scaled)?;
    let uncertainty = uncertainty_from_lr(&dl, &dr)?;
    Ok(FramePrediction {
        depth: depth.upsample_nearest(factor)?,
        uncertainty: uncertainty.upsample_nearest(factor)?,
    })
}

/// Median-flow rotation prior: content shifting by `(du, dv)` between
/// frames reads as a camera rotation of about `(-dv/fy, -du/fx)` around
/// the x and y axes.
fn flow_rotation_prior(
    prev: &ImageBuffer,
    current: &ImageBuffer,
    intrinsics: &CameraIntrinsics,
    config: &SlamConfig,
) -> Result<PoseSE3> {
    let scores = match corner_response(prev, config.corner_sigma) {
        Ok(s) => s,
        // Image too small for the scoring window: no prior.
        Err(_) => return Ok(PoseSE3::identity()),
    };
    let mut kps = detect_corners(&scores, config.corner_threshold, config.corner_nms_radius);
    kps.truncate(config.max_keypoints);
    if kps.is_empty() {
        return Ok(PoseSE3::identity());
    }
    let field = lucas_kanade(prev, current, &kps, &config.flow)?;
    let ((du, dv), inliers) = dominant_motion(&field);
    if inliers < 3 {
        return Ok(PoseSE3::identity());
    }
    let theta_x = -dv / intrinsics.fy;
    let theta_y = -du / intrinsics.fx;
    Ok(PoseSE3::exp(&Vector6::new(0.0, 0.0, 0.0, theta_x, theta_y, 0.0)))
}

/// Runs the full pipeline over a sequence.
///
/// Deterministic: identical inputs produce byte-identical reports.
pub fn run_slam(
    data: &SequenceData,
    params: &CapsNetParams,
    config: &SlamConfig,
) -> Result<SlamOutput> {
    if data.frames.is_empty() {
        return Err(Error::InvalidConfig("sequence has no frames".into()));
    }
    let (frame_w, frame_h) = (data.frames[0].1.width(), data.frames[0].1.height());
    let net = params.config();
    if frame_w % net.input_width != 0
        || frame_h % net.input_height != 0
        || frame_w / net.input_width != frame_h / net.input_height
    {
        return Err(Error::InvalidConfig(format!(
            "frames {frame_w}x{frame_h} are not an integer multiple of the network input {}x{}",
            net.input_width, net.input_height
        )));
    }
    let factor = frame_w / net.input_width;
    for (i, (_, img)) in data.frames.iter().enumerate() {
        if img.width() != frame_w || img.height() != frame_h {
            return Err(Error::DimensionMismatch(format!(
                "frame {i} is {}x{}, expected {frame_w}x{frame_h}",
                img.width(),
                img.height()
            )));
        }
    }

    let mut graph = KeyframeGraph::new();
    let mut trajectory_raw: Vec<(f64, PoseSE3)> = Vec::with_capacity(data.frames.len());
    let mut measurements = Vec::with_capacity(data.frames.len());
    let mut tracking_failure_frames = Vec::new();
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    let mut pcd_sum = 0.0;
    let mut pcd_count = 0usize;

    let mut ekf_state: Option<(f64, EkfState)> = None;
    let mut next_kf_id: u64 = 0;
    // Reference keyframe of the current alignment, for failure-path linking.
    let mut active_kf_id: u64;
    let mut prev_image: Option<&ImageBuffer> = None;
    let mut prev_pose = PoseSE3::identity();

    for (idx, (timestamp, image)) in data.frames.iter().enumerate() {
        let prediction = predict_frame(image, params, &data.intrinsics, factor)?;

        if let Some(gt) = data.gt_depth.get(idx).and_then(|d| d.as_ref()) {
            if let Ok(pcd) = percent_correct_depth(&prediction.depth, gt, config.depth_tau) {
                pcd_sum += pcd;
                pcd_count += 1;
            }
        }

        let world_pose = if graph.is_empty() {
            // First frame anchors the world frame.
            let kf = Keyframe::new(
                next_kf_id,
                image.clone(),
                prediction.depth.clone(),
                prediction.uncertainty.clone(),
                PoseSE3::identity(),
                config.align.gradient_threshold,
            )?;
            graph.insert_root(kf)?;
            next_kf_id += 1;
            PoseSE3::identity()
        } else {
            let rotation_prior = match prev_image {
                Some(prev) => flow_rotation_prior(prev, image, &data.intrinsics, config)?,
                None => PoseSE3::identity(),
            };
            let guess_world = prev_pose.compose(&rotation_prior);

            let keyframes: Vec<Keyframe> = graph.keyframes().cloned().collect();
            let reference = select_reference_keyframe(&keyframes, &guess_world)?.clone();
            active_kf_id = reference.id;
            let initial = guess_world.relative_to(&reference.pose_world);

            match estimate_pose(image, &reference, &initial, &data.intrinsics, &config.align) {
                Ok(est) if est.converged && est.valid_pixel_ratio >= config.min_track_ratio => {
                    ratio_sum += est.valid_pixel_ratio;
                    ratio_count += 1;
                    // est.pose maps keyframe coords into frame coords.
                    let world = reference.pose_world.compose(&est.pose.inverse());

                    if let SpawnDecision::Spawn(_) =
                        keyframe_spawn_policy(&est, &reference, &config.spawn)
                    {
                        let kf = Keyframe::new(
                            next_kf_id,
                            image.clone(),
                            prediction.depth.clone(),
                            prediction.uncertainty.clone(),
                            world,
                            config.align.gradient_threshold,
                        )?;
                        graph.insert_spawned(kf, reference.id)?;
                        next_kf_id += 1;
                    }
                    world
                }
                _ => {
                    // Tracking lost: respawn a keyframe at the predicted pose
                    // and continue from there.
                    tracking_failure_frames.push(idx);
                    let predicted_world = match &ekf_state {
                        Some((last_t, state)) => {
                            let dt = (timestamp - last_t).max(1e-6);
                            ekf::predict(state, dt, &config.noise)
                                .map(|s| s.pose())
                                .unwrap_or(prev_pose)
                        }
                        None => prev_pose,
                    };
                    let kf = Keyframe::new(
                        next_kf_id,
                        image.clone(),
                        prediction.depth.clone(),
                        prediction.uncertainty.clone(),
                        predicted_world,
                        config.align.gradient_threshold,
                    )?;
                    graph.insert_spawned(kf, active_kf_id)?;
                    next_kf_id += 1;
                    predicted_world
                }
            }
        };

        trajectory_raw.push((*timestamp, world_pose));
        measurements.push(ekf::PoseMeasurement {
            timestamp: *timestamp,
            pose: world_pose,
            cov: None,
        });
        // Track filter state incrementally for failure prediction.
        ekf_state = Some(match ekf_state.take() {
            None => {
                let q = UnitQuaternion::from_rotation_matrix(
                    &nalgebra::Rotation3::from_matrix_unchecked(*world_pose.rotation()),
                );
                (*timestamp, EkfState::new(*world_pose.translation(), q, 1e-2))
            }
            Some((last_t, state)) => {
                let predicted = ekf::predict(&state, (timestamp - last_t).max(1e-6), &config.noise)?;
                let (updated, _) = ekf::update(&predicted, &world_pose, None, &config.noise)?;
                (*timestamp, updated)
            }
        });

        prev_image = Some(image);
        prev_pose = world_pose;
    }

    let filtered_states = ekf::run_filter(&measurements, &config.noise)?;
    let trajectory_filtered: Vec<(f64, PoseSE3)> =
        filtered_states.iter().map(|(t, s)| (*t, s.pose())).collect();

    let (ate, gt_length) = match &data.groundtruth {
        Some(gt) if trajectory_filtered.len() >= 2 => {
            let length: f64 = gt
                .windows(2)
                .map(|w| (w[1].1.translation() - w[0].1.translation()).norm())
                .sum();
            (ate_rmse(&trajectory_filtered, gt).ok(), Some(length))
        }
        Some(gt) => {
            let length: f64 = gt
                .windows(2)
                .map(|w| (w[1].1.translation() - w[0].1.translation()).norm())
                .sum();
            (None, Some(length))
        }
        None => (None, None),
    };

    let report = SlamReport {
        frames: data.frames.len(),
        keyframes: graph.len(),
        tracking_failures: tracking_failure_frames.len(),
        tracking_failure_frames,
        ate_rmse: ate,
        percent_correct_depth: (pcd_count > 0).then(|| pcd_sum / pcd_count as f64),
        gt_trajectory_length: gt_length,
        mean_valid_pixel_ratio: if ratio_count > 0 { ratio_sum / ratio_count as f64 } else { 1.0 },
    };

    Ok(SlamOutput { report, trajectory_raw, trajectory_filtered, graph })
}
