//! Capsule-network disparity prediction and its unsupervised stereo training.
//!
//! A small conv encoder feeds primary capsules whose prediction vectors are
//! routed by agreement into one parent capsule layer; a conv decoder
//! upsamples the parent activations into two dense disparity fields (left-
//! and right-aligned) from a single input image. Training needs no ground
//! truth: the predicted disparities must reconstruct each stereo view from
//! the other, stay edge-aware smooth, and agree with each other.

mod loss;
pub mod routing;
mod train;

pub use loss::{
    loss_appearance, loss_appearance_region, loss_gradients, loss_lr, loss_smoothness,
    loss_total, LossWeights,
};
pub use train::{train, write_history_csv, StepRecord, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_uniform, NamedParams, Tape, Tensor, Var};
use crate::camera::CameraIntrinsics;
use crate::depth::{DisparityMap, UncertaintyMap};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Floor applied to the left-right uncertainty proxy, in disparity pixels.
pub const UNCERTAINTY_FLOOR: f64 = 1e-3;

/// A rectified stereo training pair.
#[derive(Debug, Clone)]
pub struct StereoPair {
    pub left: ImageBuffer,
    pub right: ImageBuffer,
    pub intrinsics: CameraIntrinsics,
}

impl StereoPair {
    pub fn new(left: ImageBuffer, right: ImageBuffer, intrinsics: CameraIntrinsics) -> Result<Self> {
        if left.width() != right.width() || left.height() != right.height() {
            return Err(Error::DimensionMismatch(format!(
                "stereo pair {}x{} vs {}x{}",
                left.width(),
                left.height(),
                right.width(),
                right.height()
            )));
        }
        intrinsics.baseline()?;
        Ok(Self { left, right, intrinsics })
    }
}

/// Shape of the routed capsule layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleLayerSpec {
    pub num_capsules_in: usize,
    pub dim_in: usize,
    pub num_capsules_out: usize,
    pub dim_out: usize,
    pub routing_iterations: usize,
}

impl Default for CapsuleLayerSpec {
    fn default() -> Self {
        Self {
            num_capsules_in: 8,
            dim_in: 8,
            num_capsules_out: 16,
            dim_out: 8,
            routing_iterations: 3,
        }
    }
}

/// Network architecture sizes.
///
/// The encoder halves the resolution twice, so input dimensions must be
/// divisible by 4; the decoder mirrors it back up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsNetConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Channels of the first encoder conv.
    pub encoder_channels: usize,
    pub capsules: CapsuleLayerSpec,
    /// Channels of the two decoder convs.
    pub decoder_channels: (usize, usize),
    /// Disparity range: outputs are `d_max * sigmoid(raw)`.
    pub d_max: f64,
}

impl CapsNetConfig {
    /// Desk-scale default for a given input size: `d_max = 0.3 * width`.
    pub fn for_input(width: usize, height: usize) -> Self {
        Self {
            input_width: width,
            input_height: height,
            encoder_channels: 8,
            capsules: CapsuleLayerSpec::default(),
            decoder_channels: (16, 8),
            d_max: 0.3 * width as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.capsules;
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % 4 != 0
            || self.input_height % 4 != 0
        {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} must be non-zero and divisible by 4",
                self.input_width, self.input_height
            )));
        }
        if c.num_capsules_in == 0
            || c.dim_in == 0
            || c.num_capsules_out == 0
            || c.dim_out == 0
            || c.routing_iterations == 0
        {
            return Err(Error::InvalidConfig("capsule spec fields must be positive".into()));
        }
        if self.encoder_channels == 0 || self.decoder_channels.0 == 0 || self.decoder_channels.1 == 0
        {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.d_max <= 0.0 {
            return Err(Error::InvalidConfig(format!("d_max must be positive, got {}", self.d_max)));
        }
        Ok(())
    }

    fn capsule_positions(&self) -> usize {
        (self.input_width / 4) * (self.input_height / 4)
    }
}

/// Learnable weights plus the architecture they belong to.
#[derive(Debug, Clone)]
pub struct CapsNetParams {
    config: CapsNetConfig,
    params: NamedParams,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    pub disp_left: Var,
    pub disp_right: Var,
    /// Routing couplings `(I, J, P)` from the final iteration.
    pub couplings: Var,
}

impl CapsNetParams {
    /// Deterministic seeded initialization, uniform `+-1/sqrt(fan_in)` drawn
    /// in sorted parameter-name order.
    pub fn init(config: CapsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config.capsules;
        let (c1, c2) = (config.encoder_channels, c.num_capsules_in * c.dim_in);
        let (d1, d2) = config.decoder_channels;
        let dec_in = c.num_capsules_out * c.dim_out;

        // (name, shape, fan_in), sorted by name.
        let specs: Vec<(&str, Vec<usize>, usize)> = vec![
            ("dec1.b", vec![d1], dec_in * 9),
            ("dec1.w", vec![d1, dec_in, 3, 3], dec_in * 9),
            ("dec2.b", vec![d2], d1 * 9),
            ("dec2.w", vec![d2, d1, 3, 3], d1 * 9),
            ("dec3l.b", vec![1], d2 * 9),
            ("dec3l.w", vec![1, d2, 3, 3], d2 * 9),
            ("dec3r.b", vec![1], d2 * 9),
            ("dec3r.w", vec![1, d2, 3, 3], d2 * 9),
            ("enc1.b", vec![c1], 9),
            ("enc1.w", vec![c1, 1, 3, 3], 9),
            ("enc2.b", vec![c2], c1 * 9),
            ("enc2.w", vec![c2, c1, 3, 3], c1 * 9),
            (
                "route.w",
                vec![c.num_capsules_in, c.num_capsules_out, c.dim_out, c.dim_in],
                c.dim_in,
            ),
        ];
        let mut params = NamedParams::new();
        for (name, shape, fan_in) in specs {
            params.insert(name.to_string(), init_uniform(shape, fan_in, &mut rng));
        }
        Ok(Self { config, params })
    }

    /// Wraps existing named tensors, validating them against `config`.
    pub fn from_named(config: CapsNetConfig, params: NamedParams) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name}: shape {:?} does not match architecture {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            if !got.all_finite() {
                return Err(Error::NonFiniteValue("checkpoint parameter"));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    pub fn named(&self) -> &NamedParams {
        &self.params
    }

    pub(crate) fn set_named(&mut self, params: NamedParams) {
        self.params = params;
    }

    /// Saves weights plus architecture into one checkpoint file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(&self.config)?;
        crate::autodiff::save_checkpoint_with_meta(path, &self.params, Some(meta))
    }

    /// Loads a checkpoint written by [`CapsNetParams::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = crate::autodiff::load_checkpoint_with_meta(path)?;
        let meta = meta.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{} carries no architecture metadata",
                path.display()
            ))
        })?;
        let config: CapsNetConfig = serde_json::from_value(meta)?;
        Self::from_named(config, params)
    }

    /// Registers all parameters on a tape, in sorted-name order.
    pub fn add_to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect()
    }

    /// Full forward pass from an input image leaf of shape `(H, W)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        param_vars: &[(String, Var)],
        image: Var,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (w, h) = (cfg.input_width, cfg.input_height);
        let img_shape = tape.value(image).shape().to_vec();
        if img_shape != [h, w] {
            return Err(Error::DimensionMismatch(format!(
                "network input {h}x{w}, image {img_shape:?}"
            )));
        }
        let p = |name: &str| -> Var {
            param_vars
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("parameter {name} not on tape"))
                .1
        };
        let caps = &cfg.capsules;
        let (ni, nj) = (caps.num_capsules_in, caps.num_capsules_out);
        let (din, dout) = (caps.dim_in, caps.dim_out);

        // Encoder: two stride-2 convs.
        let x = tape.reshape(image, vec![1, h, w])?;
        let h1 = tape.conv2d(x, p("enc1.w"), 2, 1)?;
        let h1 = tape.bias_add(h1, p("enc1.b"))?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.conv2d(h1, p("enc2.w"), 2, 1)?;
        let h2 = tape.bias_add(h2, p("enc2.b"))?;
        let h2 = tape.relu(h2)?;

        // Primary capsules: channel groups become capsule vectors.
        let positions = cfg.capsule_positions();
        let u = tape.reshape(h2, vec![ni, din, positions])?;
        let u = tape.squash(u, 1)?;

        // Prediction vectors and routing by agreement.
        let u_hat = tape.capsule_predict(p("route.w"), u)?;
        let mut logits = tape.leaf(Tensor::zeros(vec![ni, nj, positions]), false);
        let mut parent = None;
        let mut couplings = None;
        for iter in 0..caps.routing_iterations {
            let c = tape.softmax(logits, 1)?;
            let c_exp = tape.expand(c, 2, dout)?;
            let weighted = tape.mul(c_exp, u_hat)?;
            let s = tape.sum_axis(weighted, 0)?;
            let v = tape.squash(s, 1)?;
            couplings = Some(c);
            parent = Some(v);
            if iter + 1 < caps.routing_iterations {
                let v_exp = tape.expand(v, 0, ni)?;
                let prod = tape.mul(u_hat, v_exp)?;
                let agreement = tape.sum_axis(prod, 2)?;
                logits = tape.add(logits, agreement)?;
            }
        }
        let parent = parent.expect("at least one routing iteration");

        // Decoder: parent activations back up to full resolution.
        let dec_in = tape.reshape(parent, vec![nj * dout, h / 4, w / 4])?;
        let up1 = tape.upsample2x(dec_in)?;
        let d1 = tape.conv2d(up1, p("dec1.w"), 1, 1)?;
        let d1 = tape.bias_add(d1, p("dec1.b"))?;
        let d1 = tape.relu(d1)?;
        let up2 = tape.upsample2x(d1)?;
        let d2 = tape.conv2d(up2, p("dec2.w"), 1, 1)?;
        let d2 = tape.bias_add(d2, p("dec2.b"))?;
        let d2 = tape.relu(d2)?;

        let mut heads = Vec::with_capacity(2);
        for side in ["dec3l", "dec3r"] {
            let raw = tape.conv2d(d2, p(&format!("{side}.w")), 1, 1)?;
            let raw = tape.bias_add(raw, p(&format!("{side}.b")))?;
            let act = tape.sigmoid(raw)?;
            let disp = tape.scale(act, cfg.d_max)?;
            heads.push(tape.reshape(disp, vec![h, w])?);
        }

        Ok(ForwardVars {
            disp_left: heads[0],
            disp_right: heads[1],
            couplings: couplings.expect("at least one routing iteration"),
        })
    }

    /// Predicts the left- and right-aligned disparity fields for one image.
    ///
    /// Pure: identical inputs and parameters give bit-identical outputs.
    pub fn predict_disparity(&self, image: &ImageBuffer) -> Result<(DisparityMap, DisparityMap)> {
        let cfg = &self.config;
        if image.width() != cfg.input_width || image.height() != cfg.input_height {
            return Err(Error::DimensionMismatch(format!(
                "network input {}x{}, image {}x{}",
                cfg.input_width,
                cfg.input_height,
                image.width(),
                image.height()
            )));
        }
        let mut tape = Tape::new();
        let param_vars = self.add_to_tape(&mut tape, false);
        let img = tape.leaf(
            Tensor::new(vec![image.height(), image.width()], image.data().to_vec())?,
            false,
        );
        let out = self.forward(&mut tape, &param_vars, img)?;
        let dl = DisparityMap::from_values(
            image.width(),
            image.height(),
            tape.value(out.disp_left).data().to_vec(),
            cfg.d_max,
        )?;
        let dr = DisparityMap::from_values(
            image.width(),
            image.height(),
            tape.value(out.disp_right).data().to_vec(),
            cfg.d_max,
        )?;
        Ok((dl, dr))
    }
}

/// Which image a disparity field is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

/// Reconstructs one stereo view by sampling the opposite view at
/// disparity-shifted positions: `left(u) ~ right(u - d_l(u))` and
/// `right(u) ~ left(u + d_r(u))`.
///
/// Returns the reconstruction and a mask flagging pixels whose source
/// coordinate stayed inside the opposite image; outside samples are
/// edge-clamped.
pub fn reconstruct(
    opposite: &ImageBuffer,
    disparity: &DisparityMap,
    direction: Direction,
) -> Result<(ImageBuffer, Vec<bool>)> {
    if opposite.width() != disparity.width() || opposite.height() != disparity.height() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs disparity {}x{}",
            opposite.width(),
            opposite.height(),
            disparity.width(),
            disparity.height()
        )));
    }
    let (w, h) = (opposite.width(), opposite.height());
    let sign = match direction {
        Direction::Left => -1.0,
        Direction::Right => 1.0,
    };
    let mut data = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 + sign * disparity.get(x, y);
            data.push(opposite.sample_bilinear(u, y as f64));
            mask.push(opposite.sample_valid(u, y as f64));
        }
    }
    Ok((ImageBuffer::from_data(w, h, data)?, mask))
}

/// Per-pixel left-right inconsistency `|d_l(u) - d_r(u - d_l(u))|` as a
/// variance proxy, clamped below by [`UNCERTAINTY_FLOOR`].
pub fn uncertainty_from_lr(dl: &DisparityMap, dr: &DisparityMap) -> Result<UncertaintyMap> {
    if dl.width() != dr.width() || dl.height() != dr.height() {
        return Err(Error::DimensionMismatch(format!(
            "disparity maps {}x{} vs {}x{}",
            dl.width(),
            dl.height(),
            dr.width(),
            dr.height()
        )));
    }
    let (w, h) = (dl.width(), dl.height());
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = dl.get(x, y);
            let opposite = dr.sample_bilinear(x as f64 - d, y as f64);
            values.push((d - opposite).abs().max(UNCERTAINTY_FLOOR));
        }
    }
    UncertaintyMap::from_values(w, h, values)
}
